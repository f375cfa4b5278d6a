"""Background prototype adaptation.

Support background prototypes are adapted to the query scene while the
support foreground is used to gate out target-like cues:

    r_q = C1(p_bg, f_q)          inclusive correlation
    r_s = C2(p_bg, p_fg)         exclusive correlation
    r   = r_q * (1 - sigmoid(MLP(r_s)))
    p_as_bg = R(p_bg, r)

C1, C2 and R are calls into one shared :class:`CrossAttention`. Multi-way and
multi-prototype sets are handled by stacking every foreground prototype into
one matrix first.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .blocks import MLP, CrossAttention, seeded_init
from .prototypes import PrototypeSet, flatten_for_bpa, unflatten

FILTER_MODES = ("gate", "subtract", "projector")
CORR_MODES = ("paper", "no_fg", "mlp")


@dataclass(frozen=True)
class CorrelationBundle:
    r_q: torch.Tensor
    r_s: torch.Tensor | None
    r: torch.Tensor


@dataclass
class BpaFlags:
    use_c1: bool = True
    use_g: bool = True
    use_r: bool = True
    filter: str = "gate"
    corr: str = "paper"
    adapt_fg: bool = False

    def __post_init__(self):
        if self.filter not in FILTER_MODES:
            raise ValueError(f"unknown FG filter mode {self.filter!r}; expected one of {FILTER_MODES}")
        if self.corr not in CORR_MODES:
            raise ValueError(f"unknown correlation mode {self.corr!r}; expected one of {CORR_MODES}")


class BPA(nn.Module):
    """Parameters and forward pass of background prototype adaptation."""

    def __init__(self, dim: int, flags: BpaFlags | None = None, seed: int = 0):
        super().__init__()
        self.dim = dim
        self.flags = flags or BpaFlags()
        self.attention = CrossAttention(dim)
        self.gate = MLP([dim, dim, dim])
        self.projector = MLP([2 * dim, dim, dim])
        self.correlator = MLP([3 * dim, dim, dim])
        seeded_init(self, seed)

    # C1, C2 and R deliberately resolve to the same module object.
    @property
    def c1(self) -> CrossAttention:
        return self.attention

    @property
    def c2(self) -> CrossAttention:
        return self.attention

    @property
    def rect(self) -> CrossAttention:
        return self.attention

    def forward(self, ps: PrototypeSet, f_q: torch.Tensor) -> PrototypeSet:
        return bpa_adapt(ps, f_q, self)


def inclusive_correlation(p_bg: torch.Tensor, f_q: torch.Tensor, bpa: BPA) -> torch.Tensor:
    return bpa.c1(p_bg, f_q)


def exclusive_correlation(p_bg: torch.Tensor, p_fg: torch.Tensor, bpa: BPA) -> torch.Tensor:
    return bpa.c2(p_bg, p_fg)


def fg_filter_gate(r_q: torch.Tensor, r_s: torch.Tensor, bpa: BPA, mode: str = "gate") -> torch.Tensor:
    """Remove foreground-related content from the inclusive correlation."""
    if r_q.shape != r_s.shape:
        raise ValueError(f"shape mismatch: {tuple(r_q.shape)} vs {tuple(r_s.shape)}")
    if mode == "gate":
        return r_q * (1.0 - torch.sigmoid(bpa.gate(r_s)))
    if mode == "subtract":
        return r_q - r_s
    if mode == "projector":
        return bpa.projector(torch.cat([r_q, r_s], dim=-1))
    raise ValueError(f"unknown FG filter mode {mode!r}; expected one of {FILTER_MODES}")


def rectify(p_bg: torch.Tensor, r: torch.Tensor, bpa: BPA) -> torch.Tensor:
    return bpa.rect(p_bg, r)


def correlate(target: torch.Tensor, f_q: torch.Tensor, other: torch.Tensor, bpa: BPA) -> CorrelationBundle:
    """Correlation r for ``target`` prototypes given the query and the opposite role."""
    flags = bpa.flags
    if flags.corr == "mlp":
        pooled = torch.cat([f_q.mean(0), other.mean(0)])
        r = bpa.correlator(torch.cat([target, pooled.expand(target.shape[0], -1)], dim=-1))
        return CorrelationBundle(r_q=r, r_s=None, r=r)
    r_q = inclusive_correlation(target, f_q, bpa) if flags.use_c1 else target
    if flags.corr == "no_fg" or not flags.use_g:
        return CorrelationBundle(r_q=r_q, r_s=None, r=r_q)
    r_s = exclusive_correlation(target, other, bpa)
    return CorrelationBundle(r_q=r_q, r_s=r_s, r=fg_filter_gate(r_q, r_s, bpa, flags.filter))


def adapt_rows(target: torch.Tensor, f_q: torch.Tensor, other: torch.Tensor, bpa: BPA) -> tuple[torch.Tensor, CorrelationBundle]:
    corr = correlate(target, f_q, other, bpa)
    out = rectify(target, corr.r, bpa) if bpa.flags.use_r else corr.r
    return out, corr


def bpa_adapt(ps: PrototypeSet, f_q: torch.Tensor, bpa: BPA) -> PrototypeSet:
    """Return ``ps`` with its background replaced by the adapted background.

    Foreground prototypes are passed through untouched unless the
    ``adapt_fg`` ablation flag is set.
    """
    bg, fg, index = flatten_for_bpa(ps)
    if not (bg.shape[-1] == fg.shape[-1] == f_q.shape[-1] == bpa.dim):
        raise ValueError("prototype, query and BPA widths must agree")
    new_bg, _ = adapt_rows(bg, f_q, fg, bpa)
    if not bpa.flags.adapt_fg:
        return ps.with_background(new_bg)
    new_fg, _ = adapt_rows(fg, f_q, bg, bpa)
    return unflatten(new_bg, new_fg, index, source="adapted")

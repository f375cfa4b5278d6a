"""Foreground/background prototypes from labelled feature maps.

Category 0 is always the background; categories 1..N are the episode's
foreground classes, matching the column order of every logit matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import torch

from .geometry import SeedIndex, fps, sq_dist_exact

SOURCES = ("support", "query", "adapted")


@dataclass
class PrototypeSet:
    """Per-category prototype matrices; ``protos[0]`` is the background."""

    protos: list[torch.Tensor]
    source: str = "support"
    degenerate: list[bool] = field(default_factory=list)

    def __post_init__(self):
        if len(self.protos) < 2:
            raise ValueError("a prototype set needs a background and at least one foreground")
        if self.source not in SOURCES:
            raise ValueError(f"unknown prototype source {self.source!r}")
        if not self.degenerate:
            self.degenerate = [False] * len(self.protos)
        if len(self.degenerate) != len(self.protos):
            raise ValueError("one degeneracy flag per category is required")

    @property
    def bg(self) -> torch.Tensor:
        return self.protos[0]

    @property
    def fg(self) -> list[torch.Tensor]:
        return self.protos[1:]

    @property
    def n_categories(self) -> int:
        return len(self.protos)

    @property
    def counts(self) -> list[int]:
        return [p.shape[0] for p in self.protos]

    @property
    def any_degenerate(self) -> bool:
        return any(self.degenerate)

    def with_background(self, bg: torch.Tensor, source: str = "adapted") -> "PrototypeSet":
        return replace(self, protos=[bg] + list(self.fg), source=source, degenerate=list(self.degenerate))

    def stacked(self) -> tuple[torch.Tensor, torch.Tensor]:
        """All prototypes as one matrix plus the category of every row."""
        labels = torch.cat(
            [torch.full((p.shape[0],), c, dtype=torch.long) for c, p in enumerate(self.protos)]
        )
        return torch.cat(self.protos, dim=0), labels


@dataclass(frozen=True)
class SeedAssignment:
    seeds: SeedIndex
    assignment: torch.Tensor  # (count,) seed ordinal of every category point
    member_counts: torch.Tensor  # (m,)


def _check_mask(y: torch.Tensor, n: int) -> torch.Tensor:
    y = torch.as_tensor(y)
    if y.shape != (n,):
        raise ValueError(f"mask has shape {tuple(y.shape)}, expected ({n},)")
    if not torch.all((y == 0) | (y == 1)):
        raise ValueError("mask must be binary (0/1)")
    return y.to(torch.bool)


def masked_mean(f: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, bool]:
    """Mean of the rows selected by ``mask``; zero vector and ``True`` if none are."""
    count = int(mask.sum())
    if count == 0:
        return f.new_zeros(f.shape[1]), True
    w = mask.to(f.dtype)
    return (w[:, None] * f).sum(0) / count, False


def mask_pool(f: torch.Tensor, y) -> tuple[torch.Tensor, torch.Tensor, tuple[bool, bool]]:
    """Masked-mean foreground and background prototypes.

    Returns ``(p_fg, p_bg, (fg_empty, bg_empty))``. The mean is taken over the
    masked points, not over all n points.
    """
    mask = _check_mask(y, f.shape[0])
    p_fg, fg_empty = masked_mean(f, mask)
    p_bg, bg_empty = masked_mean(f, ~mask)
    return p_fg, p_bg, (fg_empty, bg_empty)


def merge_shots(features: Sequence[torch.Tensor], masks: Sequence) -> tuple[torch.Tensor, torch.Tensor]:
    """Concatenate K shots of one class into a single point set, in shot order."""
    if len(features) != len(masks) or not features:
        raise ValueError("need one mask per shot and at least one shot")
    d = features[0].shape[1]
    for f in features:
        if f.shape[1] != d:
            raise ValueError(f"feature width mismatch across shots: {f.shape[1]} vs {d}")
    masks = [torch.as_tensor(m) for m in masks]
    return torch.cat(list(features), 0), torch.cat(masks, 0)


def multi_prototype_generate(
    f: torch.Tensor, mask, m: int, start: int = 0, category: str = "category"
) -> tuple[torch.Tensor, SeedAssignment]:
    """FPS-seeded multi-prototypes for the points selected by ``mask``.

    FPS runs on the selected features (``start`` indexes within the selected
    subset); each point joins its nearest seed by squared L2, ties to the
    lower seed ordinal; each prototype is the mean of its members. Gradients
    flow through the means, not through the discrete seed choice.
    """
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    sel = _check_mask(mask, f.shape[0])
    members = f[sel]
    count = members.shape[0]
    if count == 0:
        raise ValueError(f"{category} has no points to build prototypes from")
    seeds = fps(members.detach(), m, start=start)
    with torch.no_grad():
        centers = members.detach()[seeds.indices]
        d = sq_dist_exact(members.detach(), centers)
        assign = torch.argmin(d, dim=1)  # first minimum -> lower seed ordinal
        n_seeds = len(seeds)
        onehot = torch.zeros(count, n_seeds, dtype=f.dtype)
        onehot[torch.arange(count), assign] = 1.0
        member_counts = onehot.sum(0)
    protos = (onehot.T @ members) / member_counts[:, None]
    return protos, SeedAssignment(seeds, assign, member_counts.to(torch.long))


def single_prototypes(
    fg_feats: Sequence[Sequence[torch.Tensor]],
    fg_masks: Sequence[Sequence],
    source: str = "support",
) -> PrototypeSet:
    """One prototype per category by masked mean pooling.

    ``fg_feats[c]`` / ``fg_masks[c]`` hold the K shot feature maps and binary
    masks of foreground class c+1. The background prototype pools the
    not-class points of every shot of every class.
    """
    protos: list[torch.Tensor] = []
    flags: list[bool] = []
    bg_rows, bg_masks = [], []
    for feats, masks in zip(fg_feats, fg_masks):
        f, y = merge_shots(feats, masks)
        p_fg, _, (fg_empty, _) = mask_pool(f, y)
        protos.append(p_fg[None])
        flags.append(fg_empty)
        bg_rows.append(f)
        bg_masks.append(1 - torch.as_tensor(y))
    f_all, y_bg = merge_shots(bg_rows, bg_masks)
    p_bg, _, (bg_empty, _) = mask_pool(f_all, y_bg)
    return PrototypeSet([p_bg[None]] + protos, source=source, degenerate=[bg_empty] + flags)


def multi_prototypes(
    fg_feats: Sequence[Sequence[torch.Tensor]],
    fg_masks: Sequence[Sequence],
    m: int,
    start: int = 0,
    source: str = "support",
) -> PrototypeSet:
    """Multi-prototype counterpart of :func:`single_prototypes` (m per category)."""
    protos: list[torch.Tensor] = []
    flags: list[bool] = []
    bg_rows, bg_masks = [], []
    for c, (feats, masks) in enumerate(zip(fg_feats, fg_masks), start=1):
        f, y = merge_shots(feats, masks)
        p, flag = _multi_or_empty(f, y, m, start, f"foreground class {c}")
        protos.append(p)
        flags.append(flag)
        bg_rows.append(f)
        bg_masks.append(1 - torch.as_tensor(y))
    f_all, y_bg = merge_shots(bg_rows, bg_masks)
    p_bg, bg_flag = _multi_or_empty(f_all, y_bg, m, start, "background")
    return PrototypeSet([p_bg] + protos, source=source, degenerate=[bg_flag] + flags)


def _multi_or_empty(f, y, m, start, category):
    if int(torch.as_tensor(y).sum()) == 0:
        return f.new_zeros(1, f.shape[1]), True
    p, _ = multi_prototype_generate(f, y, m, start=start, category=category)
    return p, False


@dataclass(frozen=True)
class FlatIndex:
    """Row counts per foreground class, to undo :func:`flatten_for_bpa`."""

    fg_counts: tuple[int, ...]
    source: str
    degenerate: tuple[bool, ...]


def flatten_for_bpa(ps: PrototypeSet) -> tuple[torch.Tensor, torch.Tensor, FlatIndex]:
    """Stack background rows and all foreground rows into two matrices."""
    fg = torch.cat(ps.fg, dim=0)
    return ps.bg, fg, FlatIndex(tuple(p.shape[0] for p in ps.fg), ps.source, tuple(ps.degenerate))


def unflatten(bg: torch.Tensor, fg: torch.Tensor, index: FlatIndex, source: str | None = None) -> PrototypeSet:
    if fg.shape[0] != sum(index.fg_counts):
        raise ValueError("foreground rows do not match the flatten index")
    parts = list(torch.split(fg, list(index.fg_counts), dim=0))
    return PrototypeSet([bg] + parts, source=source or index.source, degenerate=list(index.degenerate))

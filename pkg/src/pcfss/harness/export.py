"""Feature dumps for external embedding visualisation.

Layout (UTF-8), one row per query point or prototype::

    pcfss-features v1 n=<rows> d=<dim>
    <role> v_1 ... v_d

Roles are ``query_fg``, ``query_bg``, ``support_fg``, ``support_bg`` and
``adapted_bg``; values use 9 significant digits.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..data import Episode
from ..data.blocks import BlockFormatError
from .model import FewShotSegmenter, episode_tensors

ROLES = ("query_fg", "query_bg", "support_fg", "support_bg", "adapted_bg")
_HEADER = re.compile(r"^pcfss-features v1 n=(\d+) d=(\d+)$")


@dataclass(eq=False)
class FeatureDump:
    roles: list[str]
    values: np.ndarray  # (rows, d) float32

    def __eq__(self, other) -> bool:
        return isinstance(other, FeatureDump) and self.roles == other.roles and np.array_equal(self.values, other.values)

    def select(self, role: str) -> np.ndarray:
        return self.values[[r == role for r in self.roles]]


def collect_features(model: FewShotSegmenter, episode: Episode) -> FeatureDump:
    batch = episode_tensors(episode)
    with torch.no_grad():
        out = model(batch, compute_loss=False)
    roles: list[str] = ["query_fg" if y > 0 else "query_bg" for y in batch.query_labels.tolist()]
    rows = [out.f_q]
    sp = out.support_prototypes
    for c, p in enumerate(sp.protos):
        roles += ["support_bg" if c == 0 else "support_fg"] * p.shape[0]
        rows.append(p)
    if model.bpa is not None:
        roles += ["adapted_bg"] * out.prototypes.bg.shape[0]
        rows.append(out.prototypes.bg)
    return FeatureDump(roles, torch.cat(rows).to(torch.float32).numpy())


def write_features(path, dump: FeatureDump) -> Path:
    path = Path(path)
    n, d = dump.values.shape
    lines = [f"pcfss-features v1 n={n} d={d}"]
    for role, row in zip(dump.roles, dump.values):
        lines.append(role + " " + " ".join("%.9g" % v for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_features(path) -> FeatureDump:
    path = Path(path)
    text = path.read_text(encoding="utf-8").splitlines()
    m = _HEADER.match(text[0].strip()) if text else None
    if m is None:
        raise BlockFormatError(f"{path}:1: bad feature header")
    n, d = int(m.group(1)), int(m.group(2))
    body = [(i, ln) for i, ln in enumerate(text[1:], start=2) if ln.strip()]
    if len(body) != n:
        raise BlockFormatError(f"{path}: header says n={n} but the body has {len(body)} rows")
    roles, vals = [], np.empty((n, d), dtype=np.float32)
    for row, (lineno, ln) in enumerate(body):
        toks = ln.split()
        if len(toks) != d + 1 or toks[0] not in ROLES:
            raise BlockFormatError(f"{path}:{lineno}: expected a role and {d} values")
        try:
            vals[row] = [np.float32(t) for t in toks[1:]]
        except ValueError as exc:
            raise BlockFormatError(f"{path}:{lineno}: {exc}") from None
        roles.append(toks[0])
    return FeatureDump(roles, vals)


def export_features(model: FewShotSegmenter, episode: Episode, path) -> FeatureDump:
    dump = collect_features(model, episode)
    write_features(path, dump)
    return dump

"""Fixed-size point blocks: window sampling and the text block format.

Block file layout (UTF-8)::

    pcfss-block v1 n=<count> cols=<xyz|xyzrgb>
    x y z [r g b] label
    ...

Floats are written with 9 significant digits, which round-trips float32
exactly.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scene import Scene

_HEADER = re.compile(r"^pcfss-block v1 n=(\d+) cols=(xyz|xyzrgb)$")


class BlockFormatError(ValueError):
    """Malformed block file; the message carries the offending line number."""


@dataclass(eq=False)
class PointBlock:
    coords: np.ndarray  # (n, 3) float32, block frame
    labels: np.ndarray  # (n,) int64, global class ids
    block_id: str = ""
    colors: np.ndarray | None = None  # (n, 3) float32 in [0, 1]

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ValueError(f"coords must be (n, 3), got {self.coords.shape}")
        if self.labels.shape != (self.coords.shape[0],):
            raise ValueError("one label per point is required")
        if self.colors is not None:
            self.colors = np.ascontiguousarray(self.colors, dtype=np.float32)
            if self.colors.shape != self.coords.shape:
                raise ValueError("colors must match coords in shape")

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def class_inventory(self) -> dict[int, int]:
        ids, counts = np.unique(self.labels, return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointBlock):
            return NotImplemented
        same_colors = (self.colors is None and other.colors is None) or (
            self.colors is not None
            and other.colors is not None
            and np.array_equal(self.colors, other.colors)
        )
        return (
            self.block_id == other.block_id
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.labels, other.labels)
            and same_colors
        )


def _window(scene: Scene, origin, size: float) -> np.ndarray:
    x, y = scene.points[:, 0], scene.points[:, 1]
    return np.flatnonzero((x >= origin[0]) & (x < origin[0] + size) & (y >= origin[1]) & (y < origin[1] + size))


def sample_block(
    scene: Scene,
    origin,
    size: float,
    n_points: int,
    rng: np.random.Generator,
    block_id: str = "",
    retries: int = 20,
    with_color: bool = False,
) -> PointBlock:
    """Subsample exactly ``n_points`` from the ``size`` x ``size`` window at ``origin``.

    A window with too few points is replaced by a random one inside the
    scene, up to ``retries`` times. Coordinates are shifted so the window
    centre sits at x = y = 0; heights are kept.
    """
    if n_points < 1 or size <= 0:
        raise ValueError("n_points and size must be positive")
    origin = np.asarray(origin, dtype=np.float64)
    for _ in range(retries + 1):
        idx = _window(scene, origin, size)
        if idx.size >= n_points:
            break
        origin = rng.uniform(0, max(scene.extent - size, 0.0), 2)
    else:
        raise ValueError(f"no {size} m window with {n_points} points found after {retries} retries")
    pick = rng.choice(idx, size=n_points, replace=False)
    shift = np.array([origin[0] + size / 2, origin[1] + size / 2, 0.0])
    coords = (scene.points[pick].astype(np.float64) - shift).astype(np.float32)
    colors = scene.colors[pick] if with_color else None
    return PointBlock(coords, scene.labels[pick], block_id=block_id, colors=colors)


def blocks_from_scene(
    scene: Scene,
    size: float = 1.0,
    n_points: int = 512,
    rng: np.random.Generator | None = None,
    prefix: str = "b",
    stride: float | None = None,
    with_color: bool = False,
) -> list[PointBlock]:
    """Tile the scene into ``size`` windows (``stride`` defaults to ``size``).

    Windows with fewer than ``n_points`` points are skipped rather than
    resampled so that the tiling stays aligned.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    stride = size if stride is None else stride
    starts = np.arange(0.0, scene.extent - size + 1e-9, stride)
    out = []
    for i, ox in enumerate(starts):
        for j, oy in enumerate(starts):
            if _window(scene, (ox, oy), size).size < n_points:
                continue
            out.append(
                sample_block(scene, (ox, oy), size, n_points, rng, block_id=f"{prefix}_{i}_{j}", retries=0, with_color=with_color)
            )
    return out


def write_block_file(path, block: PointBlock) -> Path:
    path = Path(path)
    cols = "xyz" if block.colors is None else "xyzrgb"
    lines = [f"pcfss-block v1 n={block.n} cols={cols}"]
    for i in range(block.n):
        vals = list(block.coords[i])
        if block.colors is not None:
            vals += list(block.colors[i])
        lines.append(" ".join("%.9g" % v for v in vals) + f" {int(block.labels[i])}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_block_file(path, block_id: str | None = None) -> PointBlock:
    """Parse a block file; the block id defaults to the file stem."""
    path = Path(path)
    text = path.read_text(encoding="utf-8").splitlines()
    if not text:
        raise BlockFormatError(f"{path}:1: empty file")
    m = _HEADER.match(text[0].strip())
    if m is None:
        raise BlockFormatError(f"{path}:1: bad header {text[0]!r}")
    n, cols = int(m.group(1)), m.group(2)
    width = 3 if cols == "xyz" else 6
    body = [(i, line) for i, line in enumerate(text[1:], start=2) if line.strip()]
    if len(body) != n:
        raise BlockFormatError(f"{path}: header says n={n} but the body has {len(body)} points")
    vals = np.empty((n, width), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    for row, (lineno, line) in enumerate(body):
        toks = line.split()
        if len(toks) != width + 1:
            raise BlockFormatError(f"{path}:{lineno}: expected {width + 1} fields, got {len(toks)}")
        try:
            vals[row] = [np.float32(t) for t in toks[:width]]
            labels[row] = int(toks[width])
        except ValueError as exc:
            raise BlockFormatError(f"{path}:{lineno}: {exc}") from None
    colors = vals[:, 3:] if width == 6 else None
    return PointBlock(vals[:, :3], labels, block_id=path.stem if block_id is None else block_id, colors=colors)

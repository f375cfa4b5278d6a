"""Procedural indoor-like scenes built from labelled geometric primitives.

A scene is a floor, two walls meeting at a corner, a handful of primitive
objects standing on the floor and optional small clutter fragments. Every
point carries the index of its class in :data:`CLASS_NAMES`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PRIMITIVES = (
    "sphere",
    "box",
    "cylinder",
    "cone",
    "ridge",
    "torus_band",
    "l_bracket",
    "wedge",
    "cross",
    "stairs",
)
CLASS_NAMES = ("floor", "wall") + PRIMITIVES
FLOOR, WALL = 0, 1


@dataclass
class SceneConfig:
    room: float = 3.0  # side of the square room, metres
    wall_height: float = 1.0
    walls: bool = True
    objects: tuple[int, int] = (3, 8)
    object_size: tuple[float, float] = (0.3, 0.6)
    density: float = 2500.0  # surface points per square metre
    clutter: float = 0.4  # clutter fragments per square metre of floor
    clutter_size: tuple[float, float] = (0.08, 0.16)
    noise: float = 0.004
    classes: tuple[str, ...] = field(default=CLASS_NAMES)
    seed: int = 0

    def __post_init__(self):
        if self.room <= 0 or self.density <= 0:
            raise ValueError("room and density must be positive")
        if self.clutter < 0 or self.noise < 0:
            raise ValueError("clutter and noise must be non-negative")
        lo, hi = self.objects
        if not 0 <= lo <= hi:
            raise ValueError(f"bad object count range {self.objects}")
        if tuple(self.classes[:2]) != ("floor", "wall") or not set(self.classes[2:]) <= set(PRIMITIVES):
            raise ValueError("class table must start with floor, wall and list known primitives")
        if len(self.classes) % 2:
            raise ValueError("class table needs an even number of classes for the two splits")


@dataclass
class Scene:
    points: np.ndarray  # (n, 3) float32
    colors: np.ndarray  # (n, 3) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64
    classes: tuple[str, ...]
    extent: float


# --- surface samplers --------------------------------------------------------
# Each returns (count, 3) points in a local frame: centred at the origin in
# x/y, resting on z = 0.


def _box_surface(dims, center, n, rng, skip_bottom=True):
    a, b, c = dims
    faces = [  # (area, axis fixed, sign)
        (a * b, 2, +1),
        (a * c, 1, -1),
        (a * c, 1, +1),
        (b * c, 0, -1),
        (b * c, 0, +1),
    ]
    if not skip_bottom:
        faces.append((a * b, 2, -1))
    areas = np.array([f[0] for f in faces])
    which = rng.choice(len(faces), size=n, p=areas / areas.sum())
    pts = (rng.random((n, 3)) - 0.5) * np.array(dims)
    half = np.array(dims) / 2
    for i, (_, axis, sign) in enumerate(faces):
        sel = which == i
        pts[sel, axis] = sign * half[axis]
    return pts + np.asarray(center)


def _boxes(parts, n, rng):
    """Union of boxes given as (dims, center) pairs, points split by area."""
    areas = np.array([2 * (d[0] * d[1] + d[0] * d[2] + d[1] * d[2]) for d, _ in parts])
    counts = rng.multinomial(n, areas / areas.sum())
    return np.concatenate([_box_surface(d, c, k, rng) for (d, c), k in zip(parts, counts)])


def _sphere(s, n, rng):
    r = s / 2
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * r + np.array([0.0, 0.0, r])


def _box(s, n, rng):
    dims = s * rng.uniform(0.6, 1.0, size=3)
    return _box_surface(dims, (0, 0, dims[2] / 2), n, rng)


def _cylinder(s, n, rng):
    r, h = s * 0.3, s * rng.uniform(0.9, 1.4)
    side, top = 2 * np.pi * r * h, np.pi * r * r
    n_side = rng.binomial(n, side / (side + top))
    th = rng.uniform(0, 2 * np.pi, n)
    z = np.where(np.arange(n) < n_side, rng.uniform(0, h, n), h)
    rad = np.where(np.arange(n) < n_side, r, r * np.sqrt(rng.random(n)))
    return np.stack([rad * np.cos(th), rad * np.sin(th), z], 1)


def _cone(s, n, rng):
    r, h = s / 2, s * rng.uniform(0.8, 1.2)
    u = np.sqrt(rng.random(n))  # area-uniform along the slant
    th = rng.uniform(0, 2 * np.pi, n)
    return np.stack([r * u * np.cos(th), r * u * np.sin(th), h * (1 - u)], 1)


def _ridge(s, n, rng):
    length, w, h = s, s / 2, s * 0.45
    x = rng.uniform(-length / 2, length / 2, n)
    v = rng.uniform(-w, w, n)
    return np.stack([x, v, h * (1 - np.abs(v) / w)], 1)


def _torus_band(s, n, rng):
    r = s / 8
    big = s / 2 - r
    th = rng.uniform(0, 2 * np.pi, n)
    ph = rng.uniform(0, 2 * np.pi, n)
    ring = big + r * np.cos(ph)
    return np.stack([ring * np.cos(th), ring * np.sin(th), r + r * np.sin(ph)], 1)


def _l_bracket(s, n, rng):
    t = s / 5
    return _boxes(
        [((s, t, t), (0, 0, t / 2)), ((t, t, s), (s / 2 - t / 2, 0, s / 2))], n, rng
    )


def _wedge(s, n, rng):
    base, h, depth = s, s * 0.6, s * 0.7
    areas = np.array([base * depth, h * depth, np.hypot(base, h) * depth, base * h / 2, base * h / 2])
    which = rng.choice(5, size=n, p=areas / areas.sum())
    u, v = rng.random(n), rng.random(n)
    y = (v - 0.5) * depth
    pts = np.zeros((n, 3))
    # bottom, vertical back face at x = -base/2, slope from (-base/2, h) to (base/2, 0)
    pts[which == 0] = np.stack([(u - 0.5) * base, y, np.zeros(n)], 1)[which == 0]
    pts[which == 1] = np.stack([np.full(n, -base / 2), y, u * h], 1)[which == 1]
    pts[which == 2] = np.stack([(u - 0.5) * base, y, h * (1 - u)], 1)[which == 2]
    # triangular end caps: fold the unit square into the triangle
    a, b = np.minimum(u, v), np.maximum(u, v)
    tri_x, tri_z = -base / 2 + base * a, h * (1 - b)
    for face, yy in ((3, -depth / 2), (4, depth / 2)):
        sel = which == face
        pts[sel] = np.stack([tri_x, np.full(n, yy), tri_z], 1)[sel]
    return pts


def _cross(s, n, rng):
    t = s / 6
    return _boxes(
        [((t, t, s), (0, 0, s / 2)), ((s * 0.7, t, t), (0, 0, s * 0.65))], n, rng
    )


def _stairs(s, n, rng):
    step = s / 3
    width = s * 0.7
    parts = [
        ((step, width, step * (i + 1)), (-s / 2 + step * (i + 0.5), 0, step * (i + 1) / 2))
        for i in range(3)
    ]
    return _boxes(parts, n, rng)


GENERATORS = {
    "sphere": (_sphere, lambda s: np.pi * s * s),
    "box": (_box, lambda s: 4 * s * s),
    "cylinder": (_cylinder, lambda s: 2.4 * s * s),
    "cone": (_cone, lambda s: 1.0 * s * s),
    "ridge": (_ridge, lambda s: 1.1 * s * s),
    "torus_band": (_torus_band, lambda s: 1.8 * s * s),
    "l_bracket": (_l_bracket, lambda s: 1.8 * s * s),
    "wedge": (_wedge, lambda s: 1.7 * s * s),
    "cross": (_cross, lambda s: 1.7 * s * s),
    "stairs": (_stairs, lambda s: 2.5 * s * s),
}


def primitive_points(name: str, size: float, density: float, rng: np.random.Generator) -> np.ndarray:
    gen, area = GENERATORS[name]
    n = max(8, int(round(area(size) * density)))
    return gen(size, n, rng)


def _place(local, angle, xy):
    c, s = np.cos(angle), np.sin(angle)
    out = local.copy()
    out[:, 0] = c * local[:, 0] - s * local[:, 1] + xy[0]
    out[:, 1] = s * local[:, 0] + c * local[:, 1] + xy[1]
    return out


def generate_scene(cfg: SceneConfig, rng: np.random.Generator | None = None) -> Scene:
    """Sample one labelled scene; deterministic given ``cfg.seed`` (or ``rng``)."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    L = cfg.room
    label_of = {name: i for i, name in enumerate(cfg.classes)}
    prims = [p for p in cfg.classes if p in GENERATORS]
    chunks, labels, colors = [], [], []

    def emit(pts, label, base_color):
        chunks.append(pts)
        labels.append(np.full(len(pts), label, dtype=np.int64))
        jitter = rng.normal(0, 0.03, size=(len(pts), 3))
        colors.append(np.clip(base_color + jitter, 0, 1))

    n_floor = int(round(cfg.density * L * L))
    floor = np.stack([rng.uniform(0, L, n_floor), rng.uniform(0, L, n_floor), np.zeros(n_floor)], 1)
    emit(floor, FLOOR, rng.uniform(0.3, 0.7, 3))

    if cfg.walls:
        # two walls meeting at a randomly chosen corner
        cx, cy = rng.integers(0, 2, size=2) * L
        n_wall = int(round(cfg.density * L * cfg.wall_height))
        along = rng.uniform(0, L, (2, n_wall))
        up = rng.uniform(0, cfg.wall_height, (2, n_wall))
        w1 = np.stack([np.full(n_wall, cx), along[0], up[0]], 1)
        w2 = np.stack([along[1], np.full(n_wall, cy), up[1]], 1)
        emit(np.concatenate([w1, w2]), WALL, rng.uniform(0.5, 0.9, 3))

    placed: list[tuple[float, float, float]] = []
    n_obj = int(rng.integers(cfg.objects[0], cfg.objects[1] + 1))
    for _ in range(n_obj):
        name = prims[int(rng.integers(len(prims)))]
        size = float(rng.uniform(*cfg.object_size))
        margin = size / 2 + 0.05
        for _try in range(50):
            xy = rng.uniform(margin, L - margin, 2)
            if all(np.hypot(xy[0] - px, xy[1] - py) > (size + ps) / 2 + 0.05 for px, py, ps in placed):
                break
        else:
            continue
        placed.append((xy[0], xy[1], size))
        pts = _place(primitive_points(name, size, cfg.density, rng), rng.uniform(0, 2 * np.pi), xy)
        emit(pts, label_of[name], rng.uniform(0, 1, 3))

    n_clutter = int(rng.poisson(cfg.clutter * L * L)) if cfg.clutter > 0 else 0
    for _ in range(n_clutter):
        name = prims[int(rng.integers(len(prims)))]
        size = float(rng.uniform(*cfg.clutter_size))
        xy = rng.uniform(size, L - size, 2)
        pts = _place(primitive_points(name, size, cfg.density, rng), rng.uniform(0, 2 * np.pi), xy)
        emit(pts, label_of[name], rng.uniform(0, 1, 3))

    points = np.concatenate(chunks)
    if cfg.noise > 0:
        points = points + rng.normal(0, cfg.noise, size=points.shape)
    return Scene(
        points=points.astype(np.float32),
        colors=np.concatenate(colors).astype(np.float32),
        labels=np.concatenate(labels),
        classes=tuple(cfg.classes),
        extent=L,
    )

"""Class splits, block pools and N-way K-shot episode sampling."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .blocks import PointBlock, blocks_from_scene, load_block_file, write_block_file
from .scene import CLASS_NAMES, SceneConfig, generate_scene

# Published test-class lists; index = split id.
S3DIS_CLASSES = (
    "ceiling", "floor", "wall", "beam", "column", "window",
    "door", "table", "chair", "sofa", "bookcase", "board",
)
S3DIS_TEST = (
    ("beam", "board", "bookcase", "ceiling", "chair", "column"),
    ("door", "floor", "sofa", "table", "wall", "window"),
)
SCANNET_CLASSES = (
    "wall", "floor", "cabinet", "bed", "chair", "sofa", "table", "door", "window",
    "bookshelf", "picture", "counter", "desk", "curtain", "refrigerator",
    "showercurtain", "toilet", "sink", "bathtub", "otherfurniture",
)
SCANNET_TEST = (
    ("otherfurniture", "picture", "refrigerator", "showercurtain", "sink", "sofa", "table", "toilet", "wall", "window"),
    ("bathtub", "bed", "bookshelf", "cabinet", "chair", "counter", "curtain", "desk", "door", "floor"),
)
_ALIASES = {"show curtain": "showercurtain", "shower curtain": "showercurtain"}


@dataclass(frozen=True)
class SplitSpec:
    split: int
    train_classes: tuple[int, ...]
    test_classes: tuple[int, ...]

    def classes(self, phase: str) -> tuple[int, ...]:
        if phase not in ("train", "test"):
            raise ValueError(f"phase must be 'train' or 'test', got {phase!r}")
        return self.train_classes if phase == "train" else self.test_classes


def _canon(name: str) -> str:
    name = name.strip().lower()
    return _ALIASES.get(name, name)


def split_classes(class_table: Sequence[str], split: int) -> SplitSpec:
    """Train/test class ids for ``split`` (0 or 1).

    Tables naming exactly the S3DIS or ScanNet classes use the published
    test lists; any other table alternates by index (even indices form the
    split-0 test set).
    """
    if split not in (0, 1):
        raise ValueError(f"split must be 0 or 1, got {split}")
    names = [_canon(c) for c in class_table]
    if len(names) % 2:
        raise ValueError(f"class table needs an even number of classes, got {len(names)}")
    if len(set(names)) != len(names):
        raise ValueError("class table has duplicate names")
    for known, tests in ((S3DIS_CLASSES, S3DIS_TEST), (SCANNET_CLASSES, SCANNET_TEST)):
        if set(names) == set(known):
            test = tuple(sorted(names.index(c) for c in tests[split]))
            break
    else:
        unknown = [c for c in names if c not in CLASS_NAMES]
        if unknown:
            raise ValueError(f"unknown class name(s): {unknown}")
        test = tuple(range(split, len(names), 2))
    train = tuple(i for i in range(len(names)) if i not in test)
    return SplitSpec(split, train, test)


@dataclass
class BlockPool:
    blocks: list[PointBlock]
    class_names: tuple[str, ...]
    min_points: int = 50
    _by_class: dict[int, list[int]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.min_points < 1:
            raise ValueError("min_points must be >= 1")
        self._by_class = {}
        for i, b in enumerate(self.blocks):
            for c, count in b.class_inventory.items():
                if not 0 <= c < len(self.class_names):
                    raise ValueError(f"block {b.block_id!r} has label {c} outside the class table")
                if count >= self.min_points:
                    self._by_class.setdefault(c, []).append(i)

    def __len__(self) -> int:
        return len(self.blocks)

    def containing(self, c: int) -> list[int]:
        """Indices of blocks holding at least ``min_points`` points of class ``c``."""
        return self._by_class.get(c, [])


@dataclass
class Episode:
    classes: tuple[int, ...]  # global class id of episode category n+1
    support: list[list[PointBlock]]  # N x K
    support_masks: list[list[np.ndarray]]  # binary, 1 = the class
    query: list[PointBlock]
    query_labels: list[np.ndarray]  # 0 = background, n+1 = classes[n]
    seed: int | None = None

    @property
    def n_way(self) -> int:
        return len(self.classes)

    @property
    def k_shot(self) -> int:
        return len(self.support[0])

    @property
    def n_queries(self) -> int:
        return len(self.query)


def episode_labels(labels: np.ndarray, classes: Sequence[int]) -> np.ndarray:
    out = np.zeros(labels.shape, dtype=np.int64)
    for n, c in enumerate(classes, start=1):
        out[labels == c] = n
    return out


def sample_episode(
    pool: BlockPool,
    split: SplitSpec,
    n_way: int,
    k_shot: int,
    n_queries: int,
    rng: np.random.Generator,
    phase: str = "train",
    seed: int | None = None,
) -> Episode:
    """Draw one episode from ``pool`` over the ``phase`` classes of ``split``.

    Query t is drawn from blocks containing episode class t mod N, so every
    class is present in at least one query when T >= N. Support and query
    blocks are all distinct.
    """
    candidates = split.classes(phase)
    if not 1 <= n_way <= len(candidates):
        raise ValueError(f"n_way={n_way} needs 1..{len(candidates)} classes")
    if k_shot < 1 or n_queries < 1:
        raise ValueError("k_shot and n_queries must be >= 1")
    classes = tuple(int(c) for c in rng.choice(candidates, size=n_way, replace=False))
    n_query_of = [len(range(n, n_queries, n_way)) for n in range(n_way)]
    for n, c in enumerate(classes):
        have = len(pool.containing(c))
        if have < k_shot + n_query_of[n]:
            raise ValueError(
                f"class {pool.class_names[c]!r} has {have} blocks with >= {pool.min_points} points; "
                f"need {k_shot + n_query_of[n]}"
            )
    used: set[int] = set()

    def draw(c: int, count: int) -> list[int]:
        free = [i for i in pool.containing(c) if i not in used]
        if len(free) < count:
            raise ValueError(f"class {pool.class_names[c]!r} ran out of unused blocks")
        picked = [free[int(j)] for j in rng.choice(len(free), size=count, replace=False)]
        used.update(picked)
        return picked

    support, masks = [], []
    for c in classes:
        shots = [pool.blocks[i] for i in draw(c, k_shot)]
        support.append(shots)
        masks.append([(b.labels == c).astype(np.int64) for b in shots])
    query = [pool.blocks[draw(classes[t % n_way], 1)[0]] for t in range(n_queries)]
    q_labels = [episode_labels(b.labels, classes) for b in query]
    return Episode(classes, support, masks, query, q_labels, seed=seed)


def episode_stream(pool: BlockPool, split: SplitSpec, n_way: int, k_shot: int, n_queries: int, seed: int, count: int, phase: str = "test"):
    """``count`` episodes, episode i drawn from its own seed ``(seed, i)``."""
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        yield sample_episode(pool, split, n_way, k_shot, n_queries, rng, phase=phase, seed=i)


# --- synthetic pools and manifests ------------------------------------------


def synthetic_pool(
    n_scenes: int = 40,
    seed: int = 1234,
    block_points: int = 512,
    block_size: float = 1.0,
    min_points: int = 50,
    scene: SceneConfig | None = None,
) -> BlockPool:
    """Generate ``n_scenes`` scenes (scene i seeded by ``(seed, i)``) and tile them into blocks."""
    base = scene or SceneConfig()
    blocks: list[PointBlock] = []
    for i in range(n_scenes):
        rng = np.random.default_rng([seed, i])
        sc = generate_scene(base, rng)
        blocks += blocks_from_scene(sc, block_size, block_points, rng, prefix=f"s{i:03d}")
    return BlockPool(blocks, tuple(base.classes), min_points=min_points)


MANIFEST_FORMAT = "pcfss-manifest v1"


def write_manifest(root, pool: BlockPool) -> Path:
    """Write ``root/blocks/*.txt`` and ``root/manifest.json`` for ``pool``."""
    root = Path(root)
    (root / "blocks").mkdir(parents=True, exist_ok=True)
    entries = []
    for b in pool.blocks:
        rel = f"blocks/{b.block_id}.txt"
        write_block_file(root / rel, b)
        entries.append({"path": rel, "classes": {str(k): v for k, v in b.class_inventory.items()}})
    doc = {
        "format": MANIFEST_FORMAT,
        "classes": list(pool.class_names),
        "min_points": pool.min_points,
        "blocks": entries,
    }
    path = root / "manifest.json"
    path.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    return path


def load_manifest(path, min_points: int | None = None) -> BlockPool:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{path}: not a {MANIFEST_FORMAT} document")
    blocks = [load_block_file(path.parent / e["path"]) for e in doc["blocks"]]
    for b, e in zip(blocks, doc["blocks"]):
        listed = {int(k): int(v) for k, v in e["classes"].items()}
        if listed != b.class_inventory:
            raise ValueError(f"{path}: class inventory of {e['path']} disagrees with its file")
    mp = doc.get("min_points", 50) if min_points is None else min_points
    return BlockPool(blocks, tuple(doc["classes"]), min_points=mp)

"""Evaluation: accumulated-confusion IoU, FG/BG error counts and timing."""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from ..data import BlockPool, Episode, episode_stream, split_classes
from .config import TrainConfig, copy_config
from .model import FewShotSegmenter, episode_tensors

PROTOTYPE_SOURCES = ("support", "teacher")


@dataclass
class Confusion:
    """Per-class TP/FP/FN counts keyed by class name."""

    counts: dict[str, list[int]] = field(default_factory=dict)

    def add(self, name: str, tp: int, fp: int, fn: int) -> None:
        c = self.counts.setdefault(name, [0, 0, 0])
        c[0] += tp
        c[1] += fp
        c[2] += fn

    def merge(self, other: "Confusion") -> "Confusion":
        for k, (tp, fp, fn) in other.counts.items():
            self.add(k, tp, fp, fn)
        return self

    def iou(self) -> dict[str, float | None]:
        """IoU per class; None when TP + FP + FN = 0 (class absent)."""
        return {k: (tp / (tp + fp + fn) if tp + fp + fn else None) for k, (tp, fp, fn) in self.counts.items()}

    def miou(self, classes: Iterable[str] | None = None) -> float | None:
        ious = self.iou()
        keys = ious.keys() if classes is None else classes
        vals = [ious[k] for k in keys if ious.get(k) is not None]
        return float(np.mean(vals)) if vals else None


def iou_from_counts(tp: int, fp: int, fn: int) -> float | None:
    return tp / (tp + fp + fn) if tp + fp + fn else None


def episode_confusion(pred: np.ndarray, gt: np.ndarray, names: list[str], include_bg: bool = False) -> Confusion:
    """``names[n]`` is the class of episode category n+1; category 0 is background."""
    conf = Confusion()
    cats = [(n + 1, name) for n, name in enumerate(names)]
    if include_bg:
        cats = [(0, "background")] + cats
    for cat, name in cats:
        p, g = pred == cat, gt == cat
        conf.add(name, int((p & g).sum()), int((p & ~g).sum()), int((~p & g).sum()))
    return conf


def error_breakdown(pred: np.ndarray, gt: np.ndarray) -> dict[str, int]:
    """Point counts: correct, fg predicted bg, bg predicted fg, fg predicted as another fg."""
    fg_err = int(((gt > 0) & (pred == 0)).sum())
    bg_err = int(((gt == 0) & (pred > 0)).sum())
    fg_conf = int(((gt > 0) & (pred > 0) & (pred != gt)).sum())
    correct = int((pred == gt).sum())
    return {"correct": correct, "fg_err": fg_err, "bg_err": bg_err, "fg_confusion": fg_conf, "points": int(gt.size)}


@dataclass
class EvalResult:
    records: list[dict]
    summary: dict
    confusions: list[Confusion]
    forward_ms: list[float]

    @property
    def miou(self) -> float | None:
        return self.summary["miou"]


def _predict(model: FewShotSegmenter, ep: Episode, source: str) -> np.ndarray:
    batch = episode_tensors(ep)
    with torch.no_grad():
        if source == "teacher":
            logits = model.teacher_scores(batch)
        else:
            logits = model(batch, compute_loss=False).logits
    return logits.argmax(1).numpy()


def evaluate(
    model: FewShotSegmenter,
    pool: BlockPool,
    episodes: int | None = None,
    seed: int | None = None,
    prototypes: str = "support",
    metrics_path=None,
    cfg: TrainConfig | None = None,
) -> EvalResult:
    """Evaluate on test-split episodes drawn deterministically from ``seed``.

    Writes one JSON line per episode plus a summary line when
    ``metrics_path`` is given. Wall-clock timings are returned separately so
    the metrics file stays reproducible byte for byte.
    """
    if prototypes not in PROTOTYPE_SOURCES:
        raise ValueError(f"prototypes must be one of {PROTOTYPE_SOURCES}")
    cfg = cfg or model.cfg
    episodes = cfg.eval.episodes if episodes is None else episodes
    seed = cfg.eval.seed if seed is None else seed
    split = split_classes(pool.class_names, cfg.split)
    total = Confusion()
    records, confusions, times = [], [], []
    errors = {"correct": 0, "fg_err": 0, "bg_err": 0, "fg_confusion": 0, "points": 0}
    model.eval()
    stream = episode_stream(pool, split, cfg.n_way, cfg.k_shot, cfg.n_queries, seed, episodes, phase="test")
    for i, ep in enumerate(stream):
        names = [pool.class_names[c] for c in ep.classes]
        t0 = time.perf_counter()
        pred = _predict(model, ep, prototypes)
        times.append((time.perf_counter() - t0) * 1e3)
        gt = np.concatenate(ep.query_labels)
        conf = episode_confusion(pred, gt, names, cfg.eval.include_bg)
        total.merge(conf)
        confusions.append(conf)
        err = error_breakdown(pred, gt)
        for k in errors:
            errors[k] += err[k]
        records.append({"episode": i, "classes": names, "iou": conf.iou(), "miou": conf.miou(), **err})
    test_names = [pool.class_names[c] for c in split.test_classes]
    if cfg.eval.include_bg:
        test_names = ["background"] + test_names
    ious = total.iou()
    summary = {
        "summary": True,
        "episodes": episodes,
        "prototypes": prototypes,
        "iou": {k: ious.get(k) for k in test_names},
        "miou": total.miou(test_names),
        **errors,
    }
    if metrics_path is not None:
        write_metrics(metrics_path, records, summary)
    return EvalResult(records, summary, confusions, times)


def write_metrics(path, records: list[dict], summary: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for r in records + [summary]:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    return path


def batch_mious(confusions: list[Confusion], batch: int) -> list[float | None]:
    """mIoU of consecutive groups of ``batch`` episodes."""
    out = []
    for s in range(0, len(confusions), batch):
        acc = Confusion()
        for c in confusions[s : s + batch]:
            acc.merge(c)
        out.append(acc.miou())
    return out


# --- timing ------------------------------------------------------------------


@dataclass
class TimingReport:
    baseline_ms: float
    bpa_ms: float
    n_forward: int
    n_points: int
    baseline_median_ms: float = 0.0
    bpa_median_ms: float = 0.0

    @property
    def ratio(self) -> float:
        return self.bpa_ms / self.baseline_ms

    @property
    def overhead(self) -> float:
        return self.ratio - 1.0

    @property
    def low_confidence(self) -> bool:
        return self.n_forward < 2

    def as_dict(self) -> dict:
        return {
            "baseline_ms": self.baseline_ms,
            "bpa_ms": self.bpa_ms,
            "baseline_median_ms": self.baseline_median_ms,
            "bpa_median_ms": self.bpa_median_ms,
            "ratio": self.ratio,
            "n_forward": self.n_forward,
            "n_points": self.n_points,
            "low_confidence": self.low_confidence,
        }


def timing_probe(
    model: FewShotSegmenter,
    pool: BlockPool,
    n_forward: int = 20,
    warmup: int = 3,
    seed: int = 0,
) -> TimingReport:
    """Mean wall-clock per single-episode forward, baseline vs +BPA.

    Both variants share the extractor weights of ``model``; the +BPA variant
    gets a freshly initialised BPA module if ``model`` has none. Runs are
    interleaved so drift affects both equally.
    """
    if n_forward < 1:
        raise ValueError("n_forward must be >= 1")
    cfg_base = copy_config(model.cfg)
    cfg_base.bpa.enabled = False
    cfg_bpa = copy_config(model.cfg)
    cfg_bpa.bpa.enabled = True
    base = FewShotSegmenter(cfg_base)
    plus = FewShotSegmenter(cfg_bpa)
    base.extractor.load_state_dict(model.extractor.state_dict())
    plus.extractor.load_state_dict(model.extractor.state_dict())
    if model.bpa is not None:
        plus.bpa.load_state_dict(model.bpa.state_dict())
    base.eval()
    plus.eval()
    split = split_classes(pool.class_names, model.cfg.split)
    c = model.cfg
    ep = next(episode_stream(pool, split, c.n_way, c.k_shot, c.n_queries, seed, 1, phase="test"))
    batch = episode_tensors(ep)
    runs = {"base": [], "plus": []}
    with torch.no_grad():
        for i in range(max(warmup, 3) + n_forward):
            order = (("base", base), ("plus", plus)) if i % 2 == 0 else (("plus", plus), ("base", base))
            for name, m in order:
                t0 = time.perf_counter()
                m(batch, compute_loss=False)
                dt = (time.perf_counter() - t0) * 1e3
                if i >= max(warmup, 3):
                    runs[name].append(dt)
    return TimingReport(
        baseline_ms=statistics.fmean(runs["base"]),
        bpa_ms=statistics.fmean(runs["plus"]),
        n_forward=n_forward,
        n_points=int(batch.query[0].shape[0]),
        baseline_median_ms=statistics.median(runs["base"]),
        bpa_median_ms=statistics.median(runs["plus"]),
    )

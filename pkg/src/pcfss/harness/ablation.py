"""Ablation runner: train and evaluate named configurations over shared seeds."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import statistics
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

from ..data import BlockPool
from .config import ConfigError, TrainConfig
from .evaluate import evaluate
from .train import episodic_train, make_pool, pretrain

log = logging.getLogger(__name__)

CSV_HEADER = ("config", "seed", "miou", "fg_err", "bg_err", "ms_forward")

# Eight rows over the BPA stage flags (C1, G, R).
BPA_COMPONENT_GRID = {
    f"c1={int(a)},g={int(b)},r={int(c)}": {
        "bpa.enabled": True, "bpa.use_c1": a, "bpa.use_g": b, "bpa.use_r": c,
    }
    for a, b, c in itertools.product([False, True], repeat=3)
}
LAMBDA_GRID = {f"lambda_kl={v}": {"hr.enabled": True, "hr.lambda_kl": v} for v in (0.1, 1, 10, 20)}


def expand_grid(spec: Mapping) -> dict[str, dict]:
    """Named override sets from ``{"configs": {...}, "grid": {key: [values]}}``.

    ``configs`` maps names to override dicts; ``grid`` is expanded as a
    cartesian product. A plain mapping of names to dicts is taken as
    ``configs``.
    """
    if not spec:
        return {}
    if "configs" not in spec and "grid" not in spec:
        spec = {"configs": spec}
    out = {str(k): dict(v) for k, v in spec.get("configs", {}).items()}
    grid = spec.get("grid", {})
    if grid:
        keys = list(grid)
        for values in itertools.product(*(grid[k] for k in keys)):
            name = ",".join(f"{k}={v}" for k, v in zip(keys, values))
            out[name] = dict(zip(keys, values))
    return out


@dataclass
class AblationResult:
    rows: list[dict] = field(default_factory=list)
    errors: list[dict] = field(default_factory=list)

    def by_config(self) -> dict[str, list[float]]:
        out: dict[str, list[float]] = {}
        for r in self.rows:
            if r["miou"] is not None:
                out.setdefault(r["config"], []).append(r["miou"])
        return out

    def medians(self) -> dict[str, float]:
        return {k: statistics.median(v) for k, v in self.by_config().items()}


def _fmt(v) -> str:
    if v is None:
        return "nan"
    return repr(round(v, 6)) if isinstance(v, float) else str(v)


def write_csv(path, result: AblationResult) -> Path:
    """Per-seed rows, then ``mean`` and ``sd`` rows per configuration."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in result.rows:
            w.writerow([r["config"], r["seed"]] + [_fmt(r[k]) for k in CSV_HEADER[2:]])
        names = list(dict.fromkeys(r["config"] for r in result.rows))
        for name in names:
            rows = [r for r in result.rows if r["config"] == name and r["miou"] is not None]
            for stat in ("mean", "sd"):
                vals = []
                for k in CSV_HEADER[2:]:
                    xs = [float(r[k]) for r in rows]
                    if not xs:
                        vals.append("nan")
                    elif stat == "mean":
                        vals.append(_fmt(statistics.fmean(xs)))
                    else:
                        vals.append(_fmt(statistics.stdev(xs) if len(xs) > 1 else 0.0))
                w.writerow([name, stat] + vals)
    return path


def ablation_run(
    base: TrainConfig,
    grid: Mapping,
    seeds: Sequence[int] = (0,),
    pool: BlockPool | None = None,
    out_csv=None,
    pretrained: dict | None = None,
    on_row: Callable[[dict], None] | None = None,
) -> AblationResult:
    """Train/evaluate every configuration for every seed.

    Pretraining is shared: one checkpoint per seed, reused by every
    configuration (pass ``pretrained`` to reuse across calls). A failing cell
    is logged and recorded; the grid continues.
    """
    configs = expand_grid(grid)
    pool = make_pool(base) if pool is None else pool
    cache = {} if pretrained is None else pretrained
    result = AblationResult()
    for name, overrides in configs.items():
        for seed in seeds:
            row = {"config": name, "seed": seed, "miou": None, "fg_err": None, "bg_err": None, "ms_forward": None}
            try:
                cfg = base.updated({**overrides, "seed": seed})
                init = None
                if cfg.pretrain.epochs > 0:
                    if seed not in cache:
                        cache[seed] = pretrain(base.updated({"seed": seed}), pool)
                    init = cache[seed]
                _, model = episodic_train(cfg, init=init, pool=pool)
                ev = evaluate(model, pool)
                row.update(
                    miou=ev.miou,
                    fg_err=ev.summary["fg_err"],
                    bg_err=ev.summary["bg_err"],
                    ms_forward=statistics.fmean(ev.forward_ms),
                )
            except (ConfigError, ValueError, RuntimeError, FloatingPointError) as exc:
                log.error("ablation cell %s seed %s failed: %s", name, seed, exc)
                result.errors.append({"config": name, "seed": seed, "error": repr(exc), "trace": traceback.format_exc()})
            result.rows.append(row)
            if on_row is not None:
                on_row(row)
    if out_csv is not None:
        write_csv(out_csv, result)
        if result.errors:
            err_path = Path(out_csv).with_suffix(".errors.jsonl")
            err_path.write_text("".join(json.dumps(e) + "\n" for e in result.errors))
    return result


def load_grid(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


__all__ = ["BPA_COMPONENT_GRID", "CSV_HEADER", "LAMBDA_GRID", "AblationResult", "ablation_run", "expand_grid", "load_grid", "write_csv"]

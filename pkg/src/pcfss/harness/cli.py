"""Command-line entry point (``pcfss`` / ``python -m pcfss``)."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..data import episode_stream, split_classes, write_manifest
from .ablation import BPA_COMPONENT_GRID, LAMBDA_GRID, ablation_run, load_grid
from .config import ConfigError, dump_config, load_config
from .evaluate import evaluate, timing_probe
from .export import export_features
from .model import FewShotSegmenter
from .train import Checkpoint, episodic_train, load_model, make_pool, pretrain, run_root

PRESET_GRIDS = {"bpa-components": BPA_COMPONENT_GRID, "lambda-kl": LAMBDA_GRID}


def _config(args):
    return load_config(args.config, args.set or [])


def _add_config_args(p):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")


def _run_dir(args) -> Path:
    return Path(args.run_dir) if getattr(args, "run_dir", None) else run_root()


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    pool = make_pool(cfg)
    path = write_manifest(args.out, pool)
    print(f"wrote {len(pool)} blocks and {path}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    ckpt = pretrain(cfg)
    out = Path(args.out) if args.out else _run_dir(args) / "pretrain.pt"
    ckpt.save(out)
    print(f"pretrained {ckpt.iteration} steps, final loss {ckpt.history[-1]['loss']:.4f} -> {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    init = Checkpoint.load(args.init) if args.init else None
    run_dir = _run_dir(args)
    ckpt, _ = episodic_train(cfg, init=init, run_dir=run_dir)
    out = Path(args.out) if args.out else run_dir / "model.pt"
    ckpt.save(out)
    (run_dir / "config.txt").write_text(dump_config(cfg))
    print(f"trained {ckpt.iteration} iterations -> {out}")
    return 0


def _load(args):
    ckpt = Checkpoint.load(args.checkpoint)
    overrides = dict(s.split("=", 1) for s in args.set or [])
    model = load_model(ckpt, overrides)
    return model, make_pool(model.cfg)


def cmd_eval(args) -> int:
    model, pool = _load(args)
    out = Path(args.out) if args.out else _run_dir(args) / "metrics.jsonl"
    res = evaluate(model, pool, episodes=args.episodes, prototypes=args.prototypes, metrics_path=out)
    print(json.dumps({k: res.summary[k] for k in ("miou", "fg_err", "bg_err", "points")}))
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    grid = PRESET_GRIDS[args.grid] if args.grid in PRESET_GRIDS else load_grid(args.grid)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    out = Path(args.out) if args.out else _run_dir(args) / "ablation.csv"
    res = ablation_run(cfg, grid, seeds=seeds, out_csv=out, on_row=lambda r: print(json.dumps(r), flush=True))
    print(f"{len(res.rows)} rows, {len(res.errors)} failures -> {out}")
    return 1 if res.errors and len(res.errors) == len(res.rows) else 0


def cmd_time(args) -> int:
    if args.checkpoint:
        model, _ = _load(args)
    else:
        model = FewShotSegmenter(_config(args))
    pool = make_pool(model.cfg, block_points=args.points)
    rep = timing_probe(model, pool, n_forward=args.n_forward)
    d = rep.as_dict()
    print(json.dumps(d))
    if rep.low_confidence:
        print("warning: a single measurement is low confidence", file=sys.stderr)
    return 0


def cmd_export(args) -> int:
    model, pool = _load(args)
    c = model.cfg
    split = split_classes(pool.class_names, c.split)
    ep = list(episode_stream(pool, split, c.n_way, c.k_shot, c.n_queries, c.eval.seed, args.episode + 1))[-1]
    dump = export_features(model, ep, args.out)
    print(f"wrote {len(dump.roles)} rows -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pcfss", description="Few-shot point cloud segmentation")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic blocks and a manifest")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="pretrain the backbone with a segmentation head")
    _add_config_args(p)
    p.add_argument("--out")
    p.add_argument("--run-dir")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="episodic training")
    _add_config_args(p)
    p.add_argument("--init", help="pretrain checkpoint")
    p.add_argument("--out")
    p.add_argument("--run-dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--episodes", type=int)
    p.add_argument("--prototypes", choices=("support", "teacher"), default="support")
    p.add_argument("--out")
    p.add_argument("--run-dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation grid")
    _add_config_args(p)
    p.add_argument("--grid", required=True, help=f"JSON grid file or preset: {', '.join(PRESET_GRIDS)}")
    p.add_argument("--seeds", default="0")
    p.add_argument("--out")
    p.add_argument("--run-dir")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("time", help="baseline vs +BPA inference timing")
    _add_config_args(p)
    p.add_argument("--checkpoint")
    p.add_argument("--points", type=int, default=2048)
    p.add_argument("--n-forward", type=int, default=20)
    p.set_defaults(func=cmd_time)

    p = sub.add_parser("export-features", help="dump query features and prototypes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--episode", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

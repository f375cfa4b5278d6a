"""Backbone pretraining, episodic training and checkpoints."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..data import BlockPool, SceneConfig, load_manifest, sample_episode, split_classes, synthetic_pool
from ..data.scene import CLASS_NAMES
from .config import TrainConfig
from .model import EpisodeTensors, FewShotSegmenter, PretrainNet, augment_points, episode_tensors

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "pcfss-checkpoint v1"
_EPISODE_STREAM, _PRETRAIN_STREAM = 1, 2


def run_root() -> Path:
    return Path(os.environ.get("PCFSS_RUN_DIR", "runs"))


def make_pool(cfg: TrainConfig, block_points: int | None = None) -> BlockPool:
    d = cfg.data
    if d.dir:
        return load_manifest(d.dir, min_points=d.min_points)
    scene = SceneConfig(room=d.room, walls=d.walls, clutter=d.clutter, noise=d.noise, classes=CLASS_NAMES)
    return synthetic_pool(
        n_scenes=d.scenes,
        seed=d.seed,
        block_points=block_points or d.block_points,
        block_size=d.block_size,
        min_points=d.min_points,
        scene=scene,
    )


def lr_at(base: float, iteration: int, step: int, gamma: float) -> float:
    """Step schedule: ``base * gamma ** (iteration // step)``."""
    return base * gamma ** (iteration // step)


# --- checkpoints -------------------------------------------------------------


@dataclass
class Checkpoint:
    kind: str  # "pretrain" or "episodic"
    config: dict
    state: dict[str, torch.Tensor]
    iteration: int = 0
    rng_state: dict | None = None
    history: list[dict] = field(default_factory=list)

    def train_config(self) -> TrainConfig:
        return TrainConfig().updated(self.config)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "format": CHECKPOINT_FORMAT,
                "kind": self.kind,
                "config": self.config,
                "state": self.state,
                "iteration": self.iteration,
                "rng_state": json.dumps(self.rng_state) if self.rng_state is not None else None,
                "history": json.dumps(self.history),
            },
            path,
        )
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        doc = torch.load(Path(path), map_location="cpu", weights_only=True)
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        rng = json.loads(doc["rng_state"]) if doc["rng_state"] is not None else None
        return cls(doc["kind"], doc["config"], doc["state"], doc["iteration"], rng, json.loads(doc["history"]))


def load_model(ckpt: Checkpoint, overrides: dict | None = None) -> FewShotSegmenter:
    if ckpt.kind != "episodic":
        raise ValueError("expected an episodic checkpoint")
    cfg = ckpt.train_config()
    if overrides:
        cfg = cfg.updated(overrides)
    model = FewShotSegmenter(cfg)
    model.load_state_dict(ckpt.state)
    model.eval()
    return model


# --- pretraining -------------------------------------------------------------


def pretrain(cfg: TrainConfig, pool: BlockPool | None = None) -> Checkpoint:
    """Train backbone + segmentation head on the training classes.

    Labels are remapped to 1..|C_tr| with every other class as 0.
    """
    pool = make_pool(cfg) if pool is None else pool
    split = split_classes(pool.class_names, cfg.split)
    remap = np.zeros(len(pool.class_names), dtype=np.int64)
    for j, c in enumerate(split.train_classes, start=1):
        remap[c] = j
    blocks = [b for b in pool.blocks if any(remap[c] > 0 for c in b.class_inventory)]
    if not blocks:
        raise ValueError("no training blocks contain a training class")
    net = PretrainNet(cfg, len(split.train_classes) + 1)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.pretrain.lr)
    rng = np.random.default_rng([cfg.seed, _PRETRAIN_STREAM])
    history = []
    step = 0
    for epoch in range(cfg.pretrain.epochs):
        order = rng.permutation(len(blocks))
        for s in range(0, len(order), cfg.pretrain.batch):
            batch = [blocks[i] for i in order[s : s + cfg.pretrain.batch]]
            losses = []
            for b in batch:
                pts = torch.as_tensor(augment_points(b.coords, cfg, rng), dtype=torch.float32)
                y = torch.as_tensor(remap[b.labels])
                losses.append(torch.nn.functional.cross_entropy(net(pts), y))
            loss = torch.stack(losses).mean()
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite pretraining loss at epoch {epoch} step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.append({"step": step, "epoch": epoch, "loss": loss.item()})
            step += 1
        log.info("pretrain epoch %d loss %.4f", epoch, history[-1]["loss"] if history else float("nan"))
    state = {k: v.detach().clone() for k, v in net.state_dict().items()}
    return Checkpoint("pretrain", cfg.flat(), state, iteration=step, history=history)


def backbone_state(ckpt: Checkpoint) -> dict[str, torch.Tensor]:
    prefix = "extractor.convs."
    return {k[len("extractor."):]: v for k, v in ckpt.state.items() if k.startswith(prefix)}


# --- episodic training -------------------------------------------------------


class DegenerateEpisodes(RuntimeError):
    pass


def draw_training_episode(pool, split, cfg: TrainConfig, rng, tries: int = 100) -> EpisodeTensors:
    """Sample and augment a training episode, redrawing degenerate supports."""
    for _ in range(tries):
        ep = sample_episode(pool, split, cfg.n_way, cfg.k_shot, cfg.n_queries, rng, phase="train")
        batch = episode_tensors(ep, cfg=cfg, rng=rng)
        if not batch.support_degenerate():
            return batch
    raise DegenerateEpisodes(f"{tries} consecutive training episodes had degenerate supports")


def _dump_diagnostics(run_dir: Path | None, payload: dict) -> Path | None:
    if run_dir is None:
        return None
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "nan_dump.json"
    path.write_text(json.dumps(payload, indent=1))
    return path


def episodic_train(
    cfg: TrainConfig,
    init: Checkpoint | None = None,
    pool: BlockPool | None = None,
    run_dir: Path | None = None,
) -> tuple[Checkpoint, FewShotSegmenter]:
    """Episodic meta-training; returns the final checkpoint and the live model."""
    pool = make_pool(cfg) if pool is None else pool
    split = split_classes(pool.class_names, cfg.split)
    model = FewShotSegmenter(cfg)
    if init is not None:
        if init.kind != "pretrain":
            raise ValueError("episodic training starts from a pretrain checkpoint")
        if tuple(init.config["extractor.widths"]) != tuple(cfg.extractor.widths) or init.config["extractor.k"] != cfg.extractor.k:
            raise ValueError("pretrain checkpoint extractor shape does not match the config")
        model.extractor.load_state_dict(backbone_state(init), strict=False)
    t = cfg.train
    opt = torch.optim.Adam(
        [
            {"params": model.extractor_parameters(), "lr": t.lr_extractor},
            {"params": model.other_parameters(), "lr": t.lr},
        ],
        betas=(0.9, 0.999),
        eps=1e-8,
    )
    bases = [t.lr_extractor, t.lr]
    rng = np.random.default_rng([cfg.seed, _EPISODE_STREAM])
    history = []
    running = 0.0
    model.train()
    for it in range(t.iterations):
        for group, base in zip(opt.param_groups, bases):
            group["lr"] = lr_at(base, it, t.lr_step, t.lr_gamma)
        batch = draw_training_episode(pool, split, cfg, rng)
        try:
            out = model(batch)
        except FloatingPointError as exc:
            path = _dump_diagnostics(run_dir, {"iteration": it, "error": str(exc)})
            raise FloatingPointError(f"iteration {it}: {exc} (dump: {path})") from exc
        loss = out.loss.total
        opt.zero_grad()
        loss.backward()
        bad = [n for n, p in model.named_parameters() if p.grad is not None and not torch.isfinite(p.grad).all()]
        if bad:
            path = _dump_diagnostics(run_dir, {"iteration": it, "loss": out.loss.as_floats(), "bad_grads": bad})
            raise FloatingPointError(f"iteration {it}: non-finite gradients in {bad[:3]} (dump: {path})")
        opt.step()
        running += loss.item()
        if (it + 1) % t.log_every == 0:
            history.append({"iteration": it + 1, "loss": running / t.log_every, **{k: v for k, v in out.loss.as_floats().items() if k != "total"}})
            log.info("iter %d loss %.4f", it + 1, running / t.log_every)
            running = 0.0
    model.eval()
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    ckpt = Checkpoint("episodic", cfg.flat(), state, iteration=t.iterations, rng_state=rng.bit_generator.state, history=history)
    return ckpt, model


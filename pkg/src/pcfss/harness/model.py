"""Episode-level model: extractor -> prototypes -> (BPA) -> predictor (+ HR loss)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from ..blocks import DGCNN, ExtractorConfig, SegmentationHead, seeded_init
from ..bpa import BPA, BpaFlags
from ..geometry import jitter, rotate_z
from ..hr import LossReport, TeacherBundle, hr_forward, teacher_logits, teacher_prototypes, total_objective
from ..predictor import cross_entropy, predict
from ..prototypes import PrototypeSet, multi_prototypes, single_prototypes
from ..data import Episode
from .config import TrainConfig

# Offsets that give every trainable module its own init stream.
_EXTRACTOR_SEED, _BPA_SEED, _SEG_HEAD_SEED = 1, 2, 3


def module_seed(cfg_seed: int, which: int) -> int:
    return cfg_seed * 16 + which


@dataclass
class EpisodeTensors:
    support: list[list[torch.Tensor]]  # N x K point matrices
    support_masks: list[list[torch.Tensor]]
    query: list[torch.Tensor]
    query_labels: torch.Tensor  # concatenated over the T query blocks

    @property
    def n_way(self) -> int:
        return len(self.support)

    def support_degenerate(self) -> bool:
        """True if some class has no foreground or the shots have no background."""
        if any(int(sum(int(m.sum()) for m in ms)) == 0 for ms in self.support_masks):
            return True
        bg = sum(int((m == 0).sum()) for ms in self.support_masks for m in ms)
        return bg == 0


def augment_points(points: np.ndarray, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    out = points
    if cfg.aug.rotate:
        out = rotate_z(out, float(rng.uniform(0, 2 * np.pi)))
    return jitter(out, cfg.aug.jitter_sigma, cfg.aug.jitter_clip, rng)


def episode_tensors(
    ep: Episode,
    dtype=torch.float32,
    cfg: TrainConfig | None = None,
    rng: np.random.Generator | None = None,
) -> EpisodeTensors:
    """Convert an episode to tensors; augments every block when ``cfg`` and ``rng`` are given."""

    def pts(block):
        p = block.coords
        if cfg is not None and rng is not None:
            p = augment_points(p, cfg, rng)
        return torch.as_tensor(np.asarray(p, dtype=np.float64), dtype=dtype)

    support = [[pts(b) for b in shots] for shots in ep.support]
    masks = [[torch.as_tensor(m, dtype=torch.long) for m in ms] for ms in ep.support_masks]
    query = [pts(b) for b in ep.query]
    labels = torch.as_tensor(np.concatenate(ep.query_labels), dtype=torch.long)
    return EpisodeTensors(support, masks, query, labels)


@dataclass
class EpisodeOutput:
    logits: torch.Tensor
    prototypes: PrototypeSet  # what the predictor saw (adapted if BPA is on)
    support_prototypes: PrototypeSet
    f_q: torch.Tensor
    loss: LossReport | None = None
    teacher: TeacherBundle | None = None


class FewShotSegmenter(nn.Module):
    def __init__(self, cfg: TrainConfig):
        super().__init__()
        self.cfg = cfg
        ex = cfg.extractor
        self.extractor = DGCNN(ExtractorConfig(in_dim=3, widths=list(ex.widths), k=ex.k, dim=ex.dim, head=cfg.head()))
        seeded_init(self.extractor, module_seed(cfg.seed, _EXTRACTOR_SEED))
        self.bpa = None
        if cfg.bpa.enabled:
            b = cfg.bpa
            flags = BpaFlags(b.use_c1, b.use_g, b.use_r, b.filter, b.corr, b.adapt_fg)
            self.bpa = BPA(ex.dim, flags, seed=module_seed(cfg.seed, _BPA_SEED))

    # -- parameter groups ----------------------------------------------------

    def extractor_parameters(self):
        return list(self.extractor.backbone_parameters())

    def other_parameters(self):
        ids = {id(p) for p in self.extractor_parameters()}
        return [p for p in self.parameters() if id(p) not in ids]

    # -- pieces --------------------------------------------------------------

    def features(self, points: torch.Tensor) -> torch.Tensor:
        return self.extractor(points)

    def support_prototypes(self, feats, masks) -> PrototypeSet:
        if self.cfg.predictor == "mpti":
            return multi_prototypes(feats, masks, self.cfg.mpti.n_s)
        return single_prototypes(feats, masks)

    def teacher_size(self) -> int | None:
        return self.cfg.mpti.n_q if self.cfg.predictor == "mpti" else None

    def scores(self, f_q: torch.Tensor, ps: PrototypeSet) -> torch.Tensor:
        c = self.cfg
        return predict(f_q, ps, c.predictor, t=c.proto.t, alpha=c.mpti.alpha, k=c.mpti.graph_k)

    # -- episode forward -----------------------------------------------------

    def forward(
        self,
        batch: EpisodeTensors,
        compute_loss: bool = True,
        teacher_override: torch.Tensor | None = None,
    ) -> EpisodeOutput:
        c = self.cfg
        feats = [[self.features(p) for p in shots] for shots in batch.support]
        f_q = torch.cat([self.features(q) for q in batch.query], dim=0)
        ps = self.support_prototypes(feats, batch.support_masks)
        adapted = self.bpa(ps, f_q) if self.bpa is not None else ps
        logits = self.scores(f_q, adapted)
        out = EpisodeOutput(logits, adapted, ps, f_q)
        if not compute_loss:
            return out
        y = batch.query_labels
        ce = cross_entropy(logits, y)
        zero = ce.new_zeros(())
        if not c.hr.enabled:
            out.loss = total_objective(ce, zero, zero, 0.0, c.hr.t_kl)
            return out
        kl, teacher = hr_forward(
            f_q, y, logits, adapted,
            predictor=c.predictor, t=c.proto.t, t_kl=c.hr.t_kl, mode=c.hr.mode,
            n_teacher=self.teacher_size(), alpha=c.mpti.alpha, graph_k=c.mpti.graph_k,
            teacher_override=teacher_override,
        )
        out.teacher = teacher
        ce_t = zero if teacher.degenerate else cross_entropy(teacher.logits, y)
        out.loss = total_objective(ce, ce_t, kl, c.hr.lambda_kl, c.hr.t_kl)
        return out

    @torch.no_grad()
    def teacher_scores(self, batch: EpisodeTensors) -> torch.Tensor:
        """Scores from prototypes pooled on the query's own labels (no BPA)."""
        f_q = torch.cat([self.features(q) for q in batch.query], dim=0)
        tp = teacher_prototypes(f_q, batch.query_labels, batch.n_way + 1, m=self.teacher_size())
        c = self.cfg
        return teacher_logits(f_q, tp, c.predictor, t=c.proto.t, alpha=c.mpti.alpha, graph_k=c.mpti.graph_k)


class PretrainNet(nn.Module):
    """Backbone plus a segmentation head over the training classes."""

    def __init__(self, cfg: TrainConfig, n_classes: int):
        super().__init__()
        ex = cfg.extractor
        self.extractor = DGCNN(ExtractorConfig(in_dim=3, widths=list(ex.widths), k=ex.k, dim=ex.dim, head="linear_projector"))
        seeded_init(self.extractor, module_seed(cfg.seed, _EXTRACTOR_SEED))
        self.head = SegmentationHead(self.extractor.skip_dim, ex.dim, n_classes)
        seeded_init(self.head, module_seed(cfg.seed, _SEG_HEAD_SEED))

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        return self.head(self.extractor.backbone(points))

"""Holistic rectification: query-derived teacher prototypes and distillation.

Teacher prototypes pool the query's own features under its ground-truth
mask. Their predictions supervise the student (support-prototype)
predictions through a KL term in which the teacher side is constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .predictor import cosine_predict, propagate_predict
from .prototypes import PrototypeSet, masked_mean, multi_prototype_generate

KD_MODES = ("kl", "l1", "l2")


@dataclass
class TeacherBundle:
    prototypes: PrototypeSet
    logits: torch.Tensor  # live; CE on the teacher path backpropagates through it
    logits_const: torch.Tensor  # detached copy used by the distillation term

    @property
    def degenerate(self) -> bool:
        return self.prototypes.any_degenerate


@dataclass
class LossReport:
    ce: torch.Tensor
    ce_teacher: torch.Tensor
    kl: torch.Tensor
    lambda_kl: float
    t_kl: float = 1.0

    @property
    def total(self) -> torch.Tensor:
        return self.ce + self.ce_teacher + self.lambda_kl * self.kl

    def as_floats(self) -> dict[str, float]:
        return {
            "ce": self.ce.detach().item(),
            "ce_teacher": self.ce_teacher.detach().item(),
            "kl": self.kl.detach().item(),
            "total": self.total.detach().item(),
            "lambda_kl": self.lambda_kl,
            "t_kl": self.t_kl,
        }


def teacher_prototypes(
    f_q: torch.Tensor,
    y_q: torch.Tensor,
    n_classes: int,
    m: int | None = None,
    start: int = 0,
) -> PrototypeSet:
    """Prototypes of categories 0..n_classes-1 from the query's own labels.

    ``m=None`` gives one masked-mean prototype per category, otherwise up to
    ``m`` FPS multi-prototypes. A category absent from the query is marked
    degenerate and gets a zero prototype.
    """
    y_q = torch.as_tensor(y_q)
    protos, flags = [], []
    for c in range(n_classes):
        mask = y_q == c
        if not bool(mask.any()):
            protos.append(f_q.new_zeros(1, f_q.shape[1]))
            flags.append(True)
        elif m is None:
            p, _ = masked_mean(f_q, mask)
            protos.append(p[None])
            flags.append(False)
        else:
            p, _ = multi_prototype_generate(f_q, mask.to(torch.long), m, start=start, category=f"query class {c}")
            protos.append(p)
            flags.append(False)
    return PrototypeSet(protos, source="query", degenerate=flags)


def kd_kl_loss(o_s: torch.Tensor, o_q: torch.Tensor, t_kl: float = 1.0) -> torch.Tensor:
    """Mean over points of KL(softmax(o_s / t) || softmax(o_q / t)); o_q is constant."""
    if t_kl <= 0:
        raise ValueError(f"t_KL must be positive, got {t_kl}")
    if o_s.shape != o_q.shape:
        raise ValueError(f"logit shapes differ: {tuple(o_s.shape)} vs {tuple(o_q.shape)}")
    log_p = F.log_softmax(o_s / t_kl, dim=1)
    log_q = F.log_softmax(o_q.detach() / t_kl, dim=1)
    return (log_p.exp() * (log_p - log_q)).sum(1).mean()


def prototype_alignment_loss(ps: PrototypeSet, pq: PrototypeSet, mode: str) -> torch.Tensor:
    """L1 / L2 distance between student and constant teacher prototypes.

    Categories are compared through their mean prototype so that sets with
    different prototype counts remain comparable; degenerate teacher
    categories are skipped.
    """
    terms = []
    for s, q, bad in zip(ps.protos, pq.protos, pq.degenerate):
        if bad:
            continue
        diff = s.mean(0) - q.detach().mean(0)
        terms.append(diff.abs().mean() if mode == "l1" else (diff * diff).mean())
    if not terms:
        return ps.bg.new_zeros(())
    return torch.stack(terms).mean()


def kd_loss(
    o_s: torch.Tensor,
    o_q: torch.Tensor,
    t_kl: float = 1.0,
    mode: str = "kl",
    student: PrototypeSet | None = None,
    teacher: PrototypeSet | None = None,
) -> torch.Tensor:
    """Distillation term for the configured mode (kl on logits, l1/l2 on prototypes)."""
    if mode == "kl":
        return kd_kl_loss(o_s, o_q, t_kl)
    if mode in ("l1", "l2"):
        if t_kl <= 0:
            raise ValueError(f"t_KL must be positive, got {t_kl}")
        if student is None or teacher is None:
            raise ValueError(f"mode {mode!r} compares prototypes; pass student and teacher sets")
        return prototype_alignment_loss(student, teacher, mode)
    raise ValueError(f"unknown distillation mode {mode!r}; expected one of {KD_MODES}")


def total_objective(ce_student, ce_teacher, kl, lambda_kl: float = 1.0, t_kl: float = 1.0) -> LossReport:
    report = LossReport(_t(ce_student), _t(ce_teacher), _t(kl), float(lambda_kl), float(t_kl))
    if not math.isfinite(report.total.detach().item()):
        raise FloatingPointError(f"non-finite loss: {report.as_floats()}")
    return report


def _t(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.tensor(float(x), dtype=torch.float64)


def teacher_logits(
    f_q: torch.Tensor,
    teacher: PrototypeSet,
    predictor: str,
    t: float = 15.0,
    alpha: float = 0.99,
    graph_k: int = 20,
) -> torch.Tensor:
    if predictor == "proto":
        return cosine_predict(f_q, teacher, t)
    return propagate_predict(f_q, teacher, alpha=alpha, k=graph_k)


def hr_forward(
    f_q: torch.Tensor,
    y_q: torch.Tensor,
    o_s: torch.Tensor,
    ps_student: PrototypeSet,
    predictor: str = "proto",
    t: float = 15.0,
    t_kl: float = 1.0,
    mode: str = "kl",
    n_teacher: int | None = None,
    alpha: float = 0.99,
    graph_k: int = 20,
    teacher_override: torch.Tensor | None = None,
) -> tuple[torch.Tensor, TeacherBundle]:
    """Teacher path and distillation loss for one episode.

    ``o_s`` are the student logits already produced by the main path through
    the same predictor. ``teacher_override`` replaces the constant teacher
    logits inside the distillation term only (used to verify that no gradient
    reaches the teacher through it).
    """
    teacher = teacher_prototypes(f_q, y_q, ps_student.n_categories, m=n_teacher)
    o_q = teacher_logits(f_q, teacher, predictor, t=t, alpha=alpha, graph_k=graph_k)
    const = o_q.detach() if teacher_override is None else teacher_override.detach()
    bundle = TeacherBundle(teacher, o_q, const)
    if teacher.any_degenerate:
        return o_s.new_zeros(()), bundle
    return kd_loss(o_s, const, t_kl, mode, student=ps_student, teacher=teacher), bundle

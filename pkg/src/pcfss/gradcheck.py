"""Central finite-difference verification of autograd gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import torch


@dataclass
class GradCheckReport:
    max_rel_err: float
    tolerance: float
    n_entries: int
    worst: str = ""
    finite: bool = True
    per_tensor: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.finite and self.max_rel_err <= self.tolerance

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} max_rel_err={self.max_rel_err:.3e} (tol {self.tolerance:.0e}) "
            f"over {self.n_entries} entries, worst at {self.worst}"
        )


def _scalar(out) -> torch.Tensor:
    return out if out.dim() == 0 else out.sum()


def grad_check(
    fn: Callable[[], torch.Tensor],
    tensors: Mapping[str, torch.Tensor],
    eps: float = 1e-6,
    tolerance: float = 1e-4,
    floor: float = 1e-5,
) -> GradCheckReport:
    """Compare autograd gradients of ``sum(fn())`` with central differences.

    ``tensors`` maps names to the leaf tensors (inputs and parameters) whose
    every entry is perturbed in place. The relative error of one entry is
    ``|g_auto - g_fd| / max(|g_auto|, |g_fd|, floor)``; ``floor`` keeps
    entries whose true gradient is ~0 from dividing round-off by round-off.
    Run in double precision.
    """
    leaves = dict(tensors)
    for name, t in leaves.items():
        if t.dtype != torch.float64:
            raise TypeError(f"{name}: grad_check needs float64 tensors, got {t.dtype}")
    saved = {n: t.requires_grad for n, t in leaves.items()}
    for t in leaves.values():
        t.requires_grad_(True)
        t.grad = None

    loss = _scalar(fn())
    autos = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)

    report = GradCheckReport(max_rel_err=0.0, tolerance=tolerance, n_entries=0)
    with torch.no_grad():
        for (name, t), g in zip(leaves.items(), autos):
            g = torch.zeros_like(t) if g is None else g
            if not torch.isfinite(g).all():
                report.finite = False
                report.max_rel_err = math.inf
                report.worst = f"{name} (non-finite autograd gradient)"
                continue
            flat = t.view(-1)
            g_flat = g.reshape(-1)
            worst_here = 0.0
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = _scalar(fn()).item()
                flat[i] = orig - eps
                down = _scalar(fn()).item()
                flat[i] = orig
                num = (up - down) / (2.0 * eps)
                if not math.isfinite(num):
                    report.finite = False
                    report.max_rel_err = math.inf
                    report.worst = f"{name}[{i}] (non-finite finite difference)"
                    continue
                a = g_flat[i].item()
                err = abs(a - num) / max(abs(a), abs(num), floor)
                worst_here = max(worst_here, err)
                if err > report.max_rel_err:
                    report.max_rel_err = err
                    report.worst = f"{name}[{i}] auto={a:.6e} fd={num:.6e}"
            report.per_tensor[name] = worst_here
            report.n_entries += flat.numel()

    for n, t in leaves.items():
        t.requires_grad_(saved[n])
    return report


def module_tensors(module: torch.nn.Module, prefix: str = "") -> dict[str, torch.Tensor]:
    """Named parameters of ``module`` in the mapping form grad_check takes."""
    return {f"{prefix}{n}": p for n, p in module.named_parameters()}

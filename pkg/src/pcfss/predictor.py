"""Per-point class scores from prototypes: scaled cosine matching and
k-NN graph label propagation.

Column c of every score matrix is category c of the prototype set
(0 = background).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .geometry import k_smallest, pairwise_sq_dist
from .prototypes import PrototypeSet

PREDICTORS = ("proto", "mpti")
_NORM_EPS = 1e-12


def _unit_rows(x: torch.Tensor) -> torch.Tensor:
    # zero rows stay zero, so their cosine with anything is 0
    return x / x.norm(dim=-1, keepdim=True).clamp_min(_NORM_EPS)


def cosine_predict(f_q: torch.Tensor, ps: PrototypeSet, t: float = 15.0) -> torch.Tensor:
    """``t`` times the best cosine between each point and each category's prototypes.

    Degenerate categories (no source points) score 0 everywhere.
    """
    if all(ps.degenerate):
        raise ValueError("every prototype category is degenerate")
    fu = _unit_rows(f_q)
    cols = []
    for proto, bad in zip(ps.protos, ps.degenerate):
        if proto.shape[-1] != f_q.shape[-1]:
            raise ValueError(f"prototype width {proto.shape[-1]} != feature width {f_q.shape[-1]}")
        if bad:
            cols.append(f_q.new_zeros(f_q.shape[0]))
        else:
            cols.append((fu @ _unit_rows(proto).T).amax(dim=1))
    return t * torch.stack(cols, dim=1)


@dataclass
class PropagationGraph:
    """Normalised affinity over [query points; prototypes] and the seed labels."""

    S: torch.Tensor
    Y: torch.Tensor | None = None
    alpha: float = 0.99
    bandwidth: torch.Tensor | float | None = None
    k: int = 20
    n_query: int = 0


def median_bandwidth(nodes: torch.Tensor) -> torch.Tensor:
    """Median pairwise distance of the node set (differentiable a.e.)."""
    n = nodes.shape[0]
    iu = torch.triu_indices(n, n, offset=1)
    d2 = pairwise_sq_dist(nodes)[iu[0], iu[1]]
    return d2.clamp_min(1e-24).sqrt().median()


def build_knn_graph(nodes: torch.Tensor, k: int = 20, bandwidth=None) -> PropagationGraph:
    """Gaussian-weighted k-NN graph, symmetrised by max and normalised D^-1/2 W D^-1/2.

    ``bandwidth=None`` uses the median pairwise distance of ``nodes``.
    """
    n = nodes.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"graph k={k} must be in [1, {n})")
    if bandwidth is None:
        bandwidth = median_bandwidth(nodes)
    bw = torch.as_tensor(bandwidth, dtype=nodes.dtype)
    if not torch.all(bw > 0):
        raise ValueError(f"bandwidth must be positive, got {float(bw)}")
    d2 = pairwise_sq_dist(nodes)
    with torch.no_grad():
        masked = d2.detach().clone()
        masked.fill_diagonal_(float("inf"))
        nbr = k_smallest(masked, k)
        keep = torch.zeros(n, n, dtype=torch.bool)
        keep.scatter_(1, nbr, True)
        keep = keep | keep.T
        keep.fill_diagonal_(False)
    w = torch.exp(-d2 / (2.0 * bw * bw)) * keep.to(nodes.dtype)
    w = torch.maximum(w, w.T)
    deg = w.sum(1)
    has_edges = deg > 0
    # both where-branches must have finite gradients
    safe = torch.where(has_edges, deg, torch.ones_like(deg))
    inv_sqrt = torch.where(has_edges, safe.rsqrt(), torch.zeros_like(deg))
    S = inv_sqrt[:, None] * w * inv_sqrt[None, :]
    return PropagationGraph(S=S, bandwidth=bw, k=k)


def label_matrix(n_query: int, proto_labels: torch.Tensor, n_classes: int, dtype=torch.float64) -> torch.Tensor:
    """Zero rows for query points, one-hot rows for prototypes."""
    Y = torch.zeros(n_query + proto_labels.shape[0], n_classes, dtype=dtype)
    Y[n_query + torch.arange(proto_labels.shape[0]), proto_labels] = 1.0
    return Y


def propagate_closed_form(g: PropagationGraph) -> torch.Tensor:
    """Solve (I - alpha S) Z = Y."""
    if not 0.0 <= g.alpha < 1.0:
        raise ValueError(f"alpha must lie in [0, 1), got {g.alpha}")
    n = g.S.shape[0]
    A = torch.eye(n, dtype=g.S.dtype) - g.alpha * g.S
    try:
        Z = torch.linalg.solve(A, g.Y)
    except RuntimeError as exc:  # torch raises on exactly singular systems
        cond = torch.linalg.cond(A.detach()).item()
        raise ValueError(f"propagation system is singular (cond={cond:.3e})") from exc
    if not torch.isfinite(Z).all():
        cond = torch.linalg.cond(A.detach()).item()
        raise ValueError(f"propagation solve produced non-finite values (cond={cond:.3e})")
    return Z


def propagate_iterative(g: PropagationGraph, steps: int) -> torch.Tensor:
    """Z_{t+1} = alpha S Z_t + (1 - alpha) Y from Z_0 = Y.

    The fixed point is (1 - alpha) times the closed-form solution.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    Z = g.Y
    for _ in range(steps):
        Z = g.alpha * (g.S @ Z) + (1.0 - g.alpha) * g.Y
    return Z


def logits_from_propagation(Z: torch.Tensor, n_query_points: int) -> torch.Tensor:
    if Z.shape[0] < n_query_points:
        raise ValueError("fewer propagated rows than query points")
    return Z[:n_query_points]


def propagate_predict(
    f_q: torch.Tensor,
    ps: PrototypeSet,
    alpha: float = 0.99,
    k: int = 20,
    bandwidth=None,
) -> torch.Tensor:
    """Label propagation from the prototypes of ``ps`` to the query points."""
    keep = [c for c, bad in enumerate(ps.degenerate) if not bad]
    if not keep:
        raise ValueError("every prototype category is degenerate")
    protos = torch.cat([ps.protos[c] for c in keep], 0)
    labels = torch.cat(
        [torch.full((ps.protos[c].shape[0],), c, dtype=torch.long) for c in keep]
    )
    nodes = torch.cat([f_q, protos], 0)
    g = build_knn_graph(nodes, k=min(k, nodes.shape[0] - 1), bandwidth=bandwidth)
    g.alpha = alpha
    g.n_query = f_q.shape[0]
    g.Y = label_matrix(f_q.shape[0], labels, ps.n_categories, dtype=f_q.dtype)
    return logits_from_propagation(propagate_closed_form(g), f_q.shape[0])


def predict(f_q: torch.Tensor, ps: PrototypeSet, predictor: str, t: float = 15.0, alpha: float = 0.99, k: int = 20) -> torch.Tensor:
    if predictor == "proto":
        return cosine_predict(f_q, ps, t)
    if predictor == "mpti":
        return propagate_predict(f_q, ps, alpha=alpha, k=k)
    raise ValueError(f"unknown predictor {predictor!r}; expected one of {PREDICTORS}")


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Unweighted softmax cross-entropy averaged over points."""
    return F.cross_entropy(logits, labels)

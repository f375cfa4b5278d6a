"""Numerical kernels on point coordinates and feature matrices.

Distance, neighbour and sampling kernels work on torch tensors (numpy
arrays are accepted and converted) because they run inside the network's
forward pass. The augmentation helpers operate on numpy coordinate arrays,
which is how :class:`pcfss.data.PointBlock` stores points.

Ties in every distance ranking break toward the lower index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class NeighborIndex:
    """k nearest neighbours of every point, nearest first."""

    indices: torch.Tensor  # (n, k) int64
    sq_dists: torch.Tensor  # (n, k)

    @property
    def k(self) -> int:
        return self.indices.shape[1]


@dataclass(frozen=True)
class SeedIndex:
    """Seeds picked by farthest-point sampling, in selection order."""

    indices: torch.Tensor  # (m,) int64
    start: int

    def __len__(self) -> int:
        return self.indices.shape[0]


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def pairwise_sq_dist(a, b=None) -> torch.Tensor:
    """Squared Euclidean distances between the rows of ``a`` and ``b``.

    Passing ``b=None`` (or ``b is a``) computes the self-distance matrix,
    which is returned exactly symmetric with a zero diagonal.
    """
    a = _as_tensor(a)
    same = b is None or b is a
    b = a if same else _as_tensor(b)
    if a.dim() != 2 or b.dim() != 2:
        raise ValueError(f"expected 2-D matrices, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    sq_a = (a * a).sum(1)
    sq_b = sq_a if same else (b * b).sum(1)
    d = (sq_a[:, None] + sq_b[None, :] - 2.0 * (a @ b.T)).clamp_min(0.0)
    if same:
        d = 0.5 * (d + d.T)
        d = d - torch.diag_embed(torch.diagonal(d))
    return d


def sq_dist_exact(a, b, max_elements: int = 1 << 22) -> torch.Tensor:
    """Squared distances from explicit differences, chunked over rows of ``a``.

    Slower than :func:`pairwise_sq_dist` but free of cancellation, so equal
    distances compare equal; used where assignments must tie-break exactly.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    rows = max(1, max_elements // max(1, b.shape[0] * b.shape[1]))
    parts = [((a[i : i + rows, None, :] - b[None, :, :]) ** 2).sum(-1) for i in range(0, a.shape[0], rows)]
    return torch.cat(parts, 0) if parts else a.new_zeros(0, b.shape[0])


def _kth_value(d: torch.Tensor, k: int) -> torch.Tensor:
    """k-th smallest entry of every row, as an (n, 1) column."""
    # numpy's introselect is several times faster than topk on CPU
    part = np.partition(d.detach().cpu().numpy(), k - 1, axis=1)[:, k - 1 : k]
    return torch.from_numpy(np.ascontiguousarray(part)).to(d.device)


def k_smallest(d: torch.Tensor, k: int) -> torch.Tensor:
    """Column indices of the k smallest entries per row, ties to lower index,
    ordered by (distance, index)."""
    n, n_cols = d.shape
    if k == 0:
        return torch.empty(n, 0, dtype=torch.long)
    kth = _kth_value(d, k)
    chosen = d <= kth
    crowded = (chosen.sum(1) > k).nonzero()[:, 0]
    if crowded.numel():
        # trim ties at the k-th value, keeping the lowest columns
        sub, kr = d[crowded], kth[crowded]
        below, tied = sub < kr, sub == kr
        need = k - below.sum(1, keepdim=True)
        chosen[crowded] = below | (tied & (torch.cumsum(tied.to(torch.int64), 1) <= need))
    idx = chosen.nonzero()[:, 1].view(n, k)  # ascending column order per row
    order = torch.sort(torch.gather(d, 1, idx), dim=1, stable=True).indices
    return torch.gather(idx, 1, order)


def knn_indices(points, k: int, include_self: bool = False) -> NeighborIndex:
    """Exact k-nearest-neighbour graph by brute force.

    The Gram-expansion distances are only used to shortlist: every column
    within their rounding bound of the k-th value is kept, and the shortlist is
    ranked by explicit differences, so equal distances compare equal.
    """
    x = _as_tensor(points)
    n = x.shape[0]
    limit = n if include_self else n - 1
    if k < 0 or k > limit:
        raise ValueError(f"k={k} too large for {n} points (include_self={include_self})")
    with torch.no_grad():
        if k == 0:
            return NeighborIndex(torch.empty(n, 0, dtype=torch.long), x.new_zeros(n, 0))
        d = pairwise_sq_dist(x)
        if not include_self:
            d.fill_diagonal_(float("inf"))
        sq = (x * x).sum(1)
        margin = 4 * (x.shape[1] + 4) * torch.finfo(x.dtype).eps * (sq + sq.max())
        kth = _kth_value(d, k)
        rows, cols = (d <= kth + 2 * margin[:, None]).nonzero(as_tuple=True)
        counts = torch.bincount(rows, minlength=n)
        pos = torch.arange(rows.numel()) - (torch.cumsum(counts, 0) - counts)[rows]
        cand = torch.full((n, int(counts.max())), -1, dtype=torch.long)
        cand[rows, pos] = cols  # ascending column order per row
        exact = ((x[:, None, :] - x[cand.clamp_min(0)]) ** 2).sum(-1).masked_fill(cand < 0, float("inf"))
        sel = k_smallest(exact, k)
        return NeighborIndex(torch.gather(cand, 1, sel), torch.gather(exact, 1, sel))


def fps(features, m: int, start: int = 0) -> SeedIndex:
    """Greedy farthest-point sampling.

    Each new seed maximises its minimum squared distance to the seeds chosen
    so far. Distances are accumulated incrementally with direct differences,
    so exact ties (duplicate points) resolve to the lowest index.
    """
    f = _as_tensor(features)
    if f.dim() == 1:
        f = f[:, None]
    n = f.shape[0]
    if n == 0:
        raise ValueError("fps on empty input")
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if not 0 <= start < n:
        raise ValueError(f"start index {start} outside [0, {n})")
    m = min(m, n)
    with torch.no_grad():
        f = f.detach()
        chosen = torch.empty(m, dtype=torch.long)
        chosen[0] = start
        min_d = ((f - f[start]) ** 2).sum(1)
        taken = torch.zeros(n, dtype=torch.bool)
        taken[start] = True
        for t in range(1, m):
            cand = min_d.masked_fill(taken, -1.0)
            # argmax returns the first maximal index
            nxt = int(torch.argmax(cand))
            chosen[t] = nxt
            taken[nxt] = True
            min_d = torch.minimum(min_d, ((f - f[nxt]) ** 2).sum(1))
    return SeedIndex(chosen, start)


def jitter(points: np.ndarray, sigma: float, clip: float, rng: np.random.Generator) -> np.ndarray:
    """Add clipped Gaussian noise to every coordinate."""
    if sigma < 0 or clip < 0:
        raise ValueError("sigma and clip must be non-negative")
    points = np.asarray(points)
    if sigma == 0 or clip == 0:
        return points.copy()
    noise = np.clip(rng.normal(0.0, sigma, size=points.shape), -clip, clip)
    return (points + noise).astype(points.dtype, copy=False)


def rotate_z(points: np.ndarray, angle: float) -> np.ndarray:
    """Rotate points about the z axis by ``angle`` radians."""
    points = np.asarray(points)
    c, s = np.cos(angle), np.sin(angle)
    out = points.copy()
    x, y = points[:, 0].astype(np.float64), points[:, 1].astype(np.float64)
    out[:, 0] = c * x - s * y
    out[:, 1] = s * x + c * y
    return out

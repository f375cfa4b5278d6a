"""Trainable building blocks: MLPs, EdgeConv, a reduced DGCNN extractor and
single-head attention.

Every module stores its parameters as ordinary ``nn.Parameter`` objects, so
``module.named_parameters()`` doubles as the parameter store and ``.grad`` as
the gradient slot. Initialisation is explicit and seeded through
:func:`seeded_init`; nothing here touches the global torch RNG.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn as nn

from .geometry import NeighborIndex, knn_indices

HEADS = ("linear_projector", "self_attention")

_ACTIVATIONS = {
    "relu": torch.relu,
    "identity": lambda x: x,
    "tanh": torch.tanh,
}


def seeded_init(module: nn.Module, seed: int) -> nn.Module:
    """Re-initialise every parameter of ``module`` from ``seed``.

    Weights and biases are drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
    walking parameters in registration order.
    """
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for sub in module.modules():
            for name, p in sub.named_parameters(recurse=False):
                fan_in = _fan_in(sub, name, p)
                bound = 1.0 / math.sqrt(fan_in)
                u = torch.rand(p.shape, generator=gen, dtype=torch.float64)
                p.copy_((2.0 * u - 1.0) * bound)
    return module


def _fan_in(sub: nn.Module, name: str, p: torch.Tensor) -> int:
    if isinstance(sub, nn.Linear):
        return sub.in_features
    if p.dim() >= 2:
        return p.shape[0]  # row-vector convention: x @ W with W (d_in, d_out)
    return max(1, p.shape[0])


class MLP(nn.Module):
    """Alternating affine maps and activations; the last layer is affine only."""

    def __init__(self, widths: Sequence[int], activation: str = "relu"):
        super().__init__()
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.widths = tuple(int(w) for w in widths)
        self.activation = activation
        self.layers = nn.ModuleList(
            nn.Linear(a, b) for a, b in zip(self.widths[:-1], self.widths[1:])
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.widths[0]:
            raise ValueError(f"expected input width {self.widths[0]}, got {x.shape[-1]}")
        act = _ACTIVATIONS[self.activation]
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = act(x)
        return x


def mlp_forward(x: torch.Tensor, mlp: MLP) -> torch.Tensor:
    return mlp(x)


class EdgeConv(nn.Module):
    """EdgeConv over a k-NN graph: out_i = max_j h([f_i ; f_j - f_i]).

    ``h`` is ``Linear(2*in_dim -> widths[0]) -> ReLU -> ... -> ReLU`` (every
    layer followed by ReLU). When ``h`` has a single layer the edge features
    are never materialised: W [f_i; f_j - f_i] = (W1 - W2) f_i + W2 f_j and
    ReLU commutes with the max.
    """

    def __init__(self, in_dim: int, widths: Sequence[int], k: int, include_self: bool = False):
        super().__init__()
        widths = [int(w) for w in widths]
        if not widths:
            raise ValueError("EdgeConv needs at least one layer width")
        self.in_dim = in_dim
        self.k = k
        self.include_self = include_self
        self.out_dim = widths[-1]
        dims = [2 * in_dim] + widths
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def neighbors(self, f: torch.Tensor) -> NeighborIndex:
        return knn_indices(f.detach(), self.k, include_self=self.include_self)

    def forward(self, f: torch.Tensor, neighbors: NeighborIndex | None = None) -> torch.Tensor:
        if neighbors is None:
            neighbors = self.neighbors(f)
        idx = neighbors.indices
        if idx.shape[0] != f.shape[0]:
            raise ValueError("neighbour rows do not match the feature rows")
        if idx.shape[1] == 0:
            raise ValueError("EdgeConv needs at least one neighbour per point")
        if len(self.layers) == 1:
            w = self.layers[0].weight
            w_center, w_edge = w[:, : self.in_dim], w[:, self.in_dim :]
            a = f @ (w_center - w_edge).T + self.layers[0].bias
            b = f @ w_edge.T
            return torch.relu(a + b[idx].amax(1))
        center = f[:, None, :].expand(-1, idx.shape[1], -1)
        h = torch.cat([center, f[idx] - center], dim=-1)
        for layer in self.layers:
            h = torch.relu(layer(h))
        return h.amax(1)


def edgeconv_forward(features: torch.Tensor, neighbors: NeighborIndex, conv: EdgeConv) -> torch.Tensor:
    return conv(features, neighbors)


def _attention_weights(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    return torch.softmax(q @ k.T / math.sqrt(q.shape[-1]), dim=-1)


class CrossAttention(nn.Module):
    """Single-head cross-attention without residual, output projection or norm.

    The same instance may be called from several places; sharing the module
    shares the weights.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.w_q = nn.Parameter(torch.empty(dim, dim))
        self.w_k = nn.Parameter(torch.empty(dim, dim))
        self.w_v = nn.Parameter(torch.empty(dim, dim))
        seeded_init(self, 0)

    def weights(self, q_in: torch.Tensor, kv_in: torch.Tensor) -> torch.Tensor:
        return _attention_weights(q_in @ self.w_q, kv_in @ self.w_k)

    def forward(self, q_in: torch.Tensor, kv_in: torch.Tensor) -> torch.Tensor:
        if kv_in.shape[0] == 0:
            raise ValueError("cross-attention needs at least one key/value row")
        if q_in.shape[-1] != self.dim or kv_in.shape[-1] != self.dim:
            raise ValueError(
                f"expected width {self.dim}, got {q_in.shape[-1]} and {kv_in.shape[-1]}"
            )
        return self.weights(q_in, kv_in) @ (kv_in @ self.w_v)


def cross_attention_forward(q_in: torch.Tensor, kv_in: torch.Tensor, attn: CrossAttention) -> torch.Tensor:
    return attn(q_in, kv_in)


class SelfAttention(nn.Module):
    """Scaled dot-product self-attention with a residual: f + softmax(QK^T/sqrt(d)) V."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.w_q = nn.Parameter(torch.empty(dim, dim))
        self.w_k = nn.Parameter(torch.empty(dim, dim))
        self.w_v = nn.Parameter(torch.empty(dim, dim))
        seeded_init(self, 0)

    def weights(self, f: torch.Tensor) -> torch.Tensor:
        return _attention_weights(f @ self.w_q, f @ self.w_k)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        if f.shape[-1] != self.dim:
            raise ValueError(f"expected width {self.dim}, got {f.shape[-1]}")
        return f + self.weights(f) @ (f @ self.w_v)


@dataclass
class ExtractorConfig:
    """Shape of the reduced DGCNN extractor."""

    in_dim: int = 3
    widths: list[int] = field(default_factory=lambda: [32, 32, 64])
    k: int = 10
    dim: int = 64
    head: str = "linear_projector"

    def __post_init__(self):
        self.widths = [int(w) for w in self.widths]
        if not self.widths or min(self.widths) < 1:
            raise ValueError("extractor widths must be a non-empty list of positive ints")
        if self.k < 1:
            raise ValueError("extractor k must be >= 1")
        if self.dim < 2:
            raise ValueError("extractor dim must be >= 2")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}; expected one of {HEADS}")


class DGCNN(nn.Module):
    """Stacked dynamic-graph EdgeConv layers with concatenated skip features.

    ``backbone`` returns the concatenated EdgeConv outputs (what pretraining
    attaches its segmentation head to); ``forward`` adds the configured head
    and returns the (n, dim) feature map.
    """

    def __init__(self, config: ExtractorConfig):
        super().__init__()
        self.config = config
        dims = [config.in_dim] + config.widths
        self.convs = nn.ModuleList(EdgeConv(a, [b], config.k) for a, b in zip(dims[:-1], dims[1:]))
        self.skip_dim = sum(config.widths)
        self.projector = nn.Linear(self.skip_dim, config.dim)
        self.attention = SelfAttention(config.dim) if config.head == "self_attention" else None

    def backbone_parameters(self):
        return self.convs.parameters()

    def head_parameters(self):
        yield from self.projector.parameters()
        if self.attention is not None:
            yield from self.attention.parameters()

    def backbone(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[0] < self.config.k + 1:
            raise ValueError(
                f"block has {x.shape[0]} points; need at least k+1={self.config.k + 1}"
            )
        feats = []
        f = x
        for conv in self.convs:
            f = conv(f)  # neighbours recomputed in the current feature space
            feats.append(f)
        return torch.cat(feats, dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        f = self.projector(self.backbone(x))
        if self.attention is not None:
            f = self.attention(f)
        return f


def dgcnn_extract(points: torch.Tensor, extractor: DGCNN) -> torch.Tensor:
    return extractor(points)


def self_attention_forward(f: torch.Tensor, attn: SelfAttention) -> torch.Tensor:
    return attn(f)


class SegmentationHead(nn.Module):
    """Three-layer MLP used only for pretraining the backbone."""

    def __init__(self, in_dim: int, hidden: int, n_classes: int):
        super().__init__()
        self.mlp = MLP([in_dim, hidden, hidden, n_classes])

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return self.mlp(f)


__all__ = [
    "CrossAttention",
    "DGCNN",
    "EdgeConv",
    "ExtractorConfig",
    "MLP",
    "SegmentationHead",
    "SelfAttention",
    "cross_attention_forward",
    "dgcnn_extract",
    "edgeconv_forward",
    "mlp_forward",
    "seeded_init",
    "self_attention_forward",
]

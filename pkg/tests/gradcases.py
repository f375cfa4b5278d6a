"""Finite-difference cases shared by the unit and acceptance suites.

Each case builds fresh float64 leaves and returns ``(fn, tensors, tol)``.
"""

import numpy as np
import torch

from pcfss.blocks import MLP, CrossAttention, EdgeConv, SelfAttention, seeded_init
from pcfss.bpa import BPA, BpaFlags, fg_filter_gate
from pcfss.geometry import knn_indices
from pcfss.gradcheck import module_tensors
from pcfss.harness.config import TrainConfig
from pcfss.harness.model import EpisodeTensors, FewShotSegmenter
from pcfss.hr import kd_kl_loss
from pcfss.predictor import (
    build_knn_graph,
    cosine_predict,
    label_matrix,
    propagate_closed_form,
)
from pcfss.prototypes import PrototypeSet

TOL = 1e-4
COMPOSED_TOL = 1e-3


def rnd(*shape, seed=0):
    return torch.as_tensor(np.random.default_rng(seed).normal(size=shape))


def linear():
    lin = torch.nn.Linear(5, 3).double()
    seeded_init(lin, 1)
    x = rnd(4, 5)
    return (lambda: lin(x)), {"x": x, **module_tensors(lin)}, 1e-6


def mlp():
    m = MLP([5, 7, 3]).double()
    seeded_init(m, 2)
    x = rnd(6, 5, seed=1)
    return (lambda: m(x) ** 2), {"x": x, **module_tensors(m)}, TOL


def edgeconv():
    conv = EdgeConv(3, [6], k=4).double()
    seeded_init(conv, 3)
    x = rnd(12, 3, seed=2)
    nbrs = knn_indices(x, 4)  # fixed graph; the discrete choice has no gradient
    return (lambda: conv(x, nbrs) ** 2), {"x": x, **module_tensors(conv)}, TOL


def edgeconv_two_layer():
    conv = EdgeConv(3, [5, 4], k=3).double()
    seeded_init(conv, 4)
    x = rnd(10, 3, seed=3)
    nbrs = knn_indices(x, 3)
    return (lambda: conv(x, nbrs) ** 2), {"x": x, **module_tensors(conv)}, TOL


def self_attention():
    a = SelfAttention(4).double()
    seeded_init(a, 5)
    x = rnd(6, 4, seed=4)
    return (lambda: a(x) ** 2), {"x": x, **module_tensors(a)}, TOL


def cross_attention():
    a = CrossAttention(4).double()
    seeded_init(a, 6)
    q, kv = rnd(3, 4, seed=5), rnd(7, 4, seed=6)
    return (lambda: a(q, kv) ** 2), {"q": q, "kv": kv, **module_tensors(a)}, TOL


def gate():
    b = BPA(4, BpaFlags(), seed=7).double()
    r_q, r_s = rnd(3, 4, seed=7), rnd(3, 4, seed=8)
    return (lambda: fg_filter_gate(r_q, r_s, b) ** 2), {"r_q": r_q, "r_s": r_s, **module_tensors(b.gate, "gate.")}, TOL


def cosine():
    f, pb, pf = rnd(8, 4, seed=9), rnd(1, 4, seed=10), rnd(1, 4, seed=11)
    return (lambda: cosine_predict(f, PrototypeSet([pb, pf])) ** 2), {"f": f, "p_bg": pb, "p_fg": pf}, TOL


def propagation():
    nodes = rnd(6, 3, seed=12)
    Y = label_matrix(4, torch.tensor([0, 1]), 2)
    w = rnd(6, 2, seed=13)

    def fn():
        g = build_knn_graph(nodes, k=2, bandwidth=1.5)
        g.alpha, g.Y = 0.7, Y
        return propagate_closed_form(g) * w

    return fn, {"nodes": nodes}, TOL


def kl():
    o_s, o_q = rnd(10, 3, seed=14), rnd(10, 3, seed=15)
    return (lambda: kd_kl_loss(o_s, o_q, t_kl=2.0)), {"o_s": o_s}, TOL


def tiny_config(**overrides) -> TrainConfig:
    base = {
        "extractor.widths": [4, 4],
        "extractor.k": 4,
        "extractor.dim": 4,
        "bpa.enabled": True,
        "hr.enabled": True,
        "hr.lambda_kl": 1.0,
        "proto.t": 5.0,
    }
    base.update(overrides)
    return TrainConfig().updated(base)


def tiny_episode(n=32, seed=0) -> EpisodeTensors:
    gen = np.random.default_rng(seed)
    s = torch.as_tensor(gen.normal(size=(n, 3)))
    q = torch.as_tensor(gen.normal(size=(n, 3)))
    ms = torch.as_tensor((s[:, 0] > 0.3).long())
    yq = torch.as_tensor((q[:, 0] > 0.3).long())
    return EpisodeTensors([[s]], [[ms]], [q], yq)


def composed():
    """The full training objective (CE + teacher CE + lambda KL) on a 32-point episode.

    The distillation target is constant by construction, so the finite
    differences hold it at its unperturbed value.
    """
    model = FewShotSegmenter(tiny_config()).double()
    batch = tiny_episode()
    with torch.no_grad():
        frozen = model(batch).teacher.logits_const.clone()
    tensors = {k: v for k, v in module_tensors(model).items() if not k.startswith(("bpa.projector", "bpa.correlator"))}
    return (lambda: model(batch, teacher_override=frozen).loss.total), tensors, COMPOSED_TOL


CASES = {
    "linear": linear,
    "mlp": mlp,
    "edgeconv": edgeconv,
    "edgeconv_two_layer": edgeconv_two_layer,
    "self_attention": self_attention,
    "cross_attention": cross_attention,
    "gate": gate,
    "cosine": cosine,
    "propagation": propagation,
    "kl": kl,
    "composed": composed,
}

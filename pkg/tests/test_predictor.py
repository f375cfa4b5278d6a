"""Cosine matching and k-NN label propagation."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pcfss.predictor import (
    PropagationGraph,
    build_knn_graph,
    cosine_predict,
    label_matrix,
    logits_from_propagation,
    predict,
    propagate_closed_form,
    propagate_iterative,
    propagate_predict,
)
from pcfss.prototypes import PrototypeSet

D = torch.float64


def rnd(*shape, seed=0):
    return torch.as_tensor(np.random.default_rng(seed).normal(size=shape))


def _graph(S, Y, alpha):
    return PropagationGraph(S=torch.as_tensor(S, dtype=D), Y=torch.as_tensor(Y, dtype=D), alpha=alpha)


# --- cosine -------------------------------------------------------------------


def test_cosine_parallel_and_orthogonal():
    ps = PrototypeSet([torch.tensor([[0.0, 1.0]], dtype=D), torch.tensor([[2.0, 0.0]], dtype=D)])
    out = cosine_predict(torch.tensor([[1.0, 0.0]], dtype=D), ps, t=15)
    assert torch.equal(out, torch.tensor([[0.0, 15.0]], dtype=D))


def test_cosine_bounds():
    ps = PrototypeSet([rnd(4, 8, seed=1), rnd(3, 8, seed=2)])
    out = cosine_predict(rnd(200, 8), ps, t=15)
    assert out.abs().max() <= 15 + 1e-12


def test_cosine_loop_oracle():
    f, pb, pf = rnd(6, 5), rnd(1, 5, seed=1), rnd(1, 5, seed=2)
    out = cosine_predict(f, PrototypeSet([pb, pf]), t=7.0)
    for i in range(6):
        for c, p in enumerate((pb, pf)):
            a, b = f[i].tolist(), p[0].tolist()
            cos = sum(x * y for x, y in zip(a, b)) / math.sqrt(sum(x * x for x in a) * sum(y * y for y in b))
            assert abs(out[i, c].item() - 7.0 * cos) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 100.0), st.floats(0.1, 100.0), st.floats(0.01, 50.0))
def test_temperature_and_scale_preserve_argmax(seed, t1, t2, scale):
    f = rnd(30, 6, seed=seed)
    ps = PrototypeSet([rnd(3, 6, seed=seed + 1), rnd(2, 6, seed=seed + 2)])
    a = cosine_predict(f, ps, t=t1)
    b = cosine_predict(f * scale, ps, t=t2)
    margin = (a.max(1).values - a.min(1).values) / t1
    ok = margin > 1e-9
    assert torch.equal(a.argmax(1)[ok], b.argmax(1)[ok])


def test_cosine_degenerate_column_and_errors():
    ps = PrototypeSet([rnd(1, 4), torch.zeros(1, 4, dtype=D)], degenerate=[False, True])
    out = cosine_predict(rnd(5, 4), ps)
    assert torch.equal(out[:, 1], torch.zeros(5, dtype=D))
    with pytest.raises(ValueError, match="degenerate"):
        cosine_predict(rnd(5, 4), PrototypeSet([rnd(1, 4), rnd(1, 4)], degenerate=[True, True]))
    with pytest.raises(ValueError, match="width"):
        cosine_predict(rnd(5, 3), PrototypeSet([rnd(1, 4), rnd(1, 4)]))
    with pytest.raises(ValueError, match="unknown predictor"):
        predict(rnd(5, 4), PrototypeSet([rnd(1, 4), rnd(1, 4)]), "knn")


# --- graph --------------------------------------------------------------------


def test_two_identical_nodes():
    g = build_knn_graph(torch.ones(2, 3, dtype=D), k=1, bandwidth=1.0)
    assert torch.equal(g.S, torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=D))


def test_isolated_far_node():
    nodes = torch.tensor([[0.0, 0.0], [0.1, 0.0], [0.0, 0.1], [1e3, 1e3]], dtype=D)
    g = build_knn_graph(nodes, k=1, bandwidth=0.1)
    assert g.S[3].abs().max() < 1e-12
    assert g.S[:, 3].abs().max() < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_graph_symmetric_and_row_sums(seed):
    g = build_knn_graph(rnd(5, 4, seed=seed), k=2)
    assert (g.S - g.S.T).abs().max() <= 1e-15
    # symmetric normalisation bounds the spectrum, not each row sum
    assert torch.linalg.eigvalsh(g.S).abs().max() <= 1 + 1e-9
    assert torch.all(g.S >= 0) and torch.all(g.S.diagonal() == 0)


def test_row_sums_can_exceed_one():
    # hub-and-spokes: the hub's row sums to sqrt(#spokes)
    nodes = torch.tensor([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]], dtype=D)
    g = build_knn_graph(nodes, k=1, bandwidth=1.0)
    assert abs(g.S[0].sum().item() - 2.0) < 1e-12
    assert abs(torch.linalg.eigvalsh(g.S).abs().max().item() - 1.0) < 1e-12


def test_graph_errors():
    with pytest.raises(ValueError, match="bandwidth"):
        build_knn_graph(rnd(4, 2), k=1, bandwidth=0.0)
    with pytest.raises(ValueError, match="bandwidth"):
        build_knn_graph(rnd(4, 2), k=1, bandwidth=-1.0)
    with pytest.raises(ValueError, match="graph k"):
        build_knn_graph(rnd(4, 2), k=4)


# --- propagation --------------------------------------------------------------


def test_alpha_zero_is_identity():
    Y = label_matrix(3, torch.tensor([0, 1]), 2)
    g = PropagationGraph(S=build_knn_graph(rnd(5, 3), k=2).S, Y=Y, alpha=0.0)
    assert torch.equal(propagate_closed_form(g), Y)


def test_two_node_closed_form_exact():
    Z = propagate_closed_form(_graph([[0, 1], [1, 0]], [[1, 0], [0, 0]], 0.5))
    expected = torch.tensor([[4 / 3, 0.0], [2 / 3, 0.0]], dtype=D)
    assert (Z - expected).abs().max() <= 1e-12


def test_two_node_iterative_matches():
    g = _graph([[0, 1], [1, 0]], [[1, 0], [0, 0]], 0.5)
    Zi = propagate_iterative(g, 1000) / (1 - g.alpha)
    assert (Zi - propagate_closed_form(g)).abs().max() <= 1e-6


def test_iterative_zero_labels():
    g = _graph([[0, 1], [1, 0]], [[0, 0], [0, 0]], 0.5)
    assert torch.equal(propagate_iterative(g, 1), torch.zeros(2, 2, dtype=D))
    with pytest.raises(ValueError):
        propagate_iterative(g, 0)


def _random_graph(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 41))
    n_proto = int(rng.integers(2, min(10, n - 2) + 1))
    g = build_knn_graph(rnd(n, 6, seed=seed + 1000), k=int(rng.integers(1, min(8, n - 1) + 1)))
    g.alpha = float(rng.uniform(0.1, 0.9))
    g.Y = label_matrix(n - n_proto, torch.as_tensor(rng.integers(0, 3, n_proto)), 3)
    return g


@pytest.mark.parametrize("seed", range(20))
def test_closed_form_vs_iteration_random(seed):
    g = _random_graph(seed)
    Z = propagate_closed_form(g)
    Zi = propagate_iterative(g, 1000) / (1 - g.alpha)
    assert (Z - Zi).abs().max() <= 1e-6
    A = torch.eye(g.S.shape[0], dtype=D) - g.alpha * g.S
    assert (A @ Z - g.Y).abs().max() <= 1e-8
    n = g.Y.shape[0]
    q = g.Y.sum(1) == 0
    reach = Z[q].max(1).values > 1e-9
    assert torch.equal(Z[q].argmax(1)[reach], Zi[q].argmax(1)[reach])
    assert n == Z.shape[0]


def test_alpha_out_of_range_and_singular():
    with pytest.raises(ValueError, match="alpha"):
        propagate_closed_form(_graph([[0, 1], [1, 0]], [[1, 0], [0, 0]], 1.0))
    # alpha S with an eigenvalue of exactly 1 makes I - alpha S singular
    with pytest.raises(ValueError, match="cond"):
        propagate_closed_form(_graph([[0, 2], [2, 0]], [[1, 0], [0, 0]], 0.5))


def test_logits_shape_and_disconnected_queries():
    Z = torch.arange(12, dtype=D).reshape(6, 2)
    assert logits_from_propagation(Z, 4).shape == (4, 2)
    with pytest.raises(ValueError):
        logits_from_propagation(Z, 7)
    # disconnected graph: query rows never receive label mass
    g = _graph(torch.zeros(3, 3), label_matrix(2, torch.tensor([1]), 2), 0.9)
    assert torch.equal(logits_from_propagation(propagate_closed_form(g), 2), torch.zeros(2, 2, dtype=D))


def test_small_alpha_gives_nearest_prototype():
    centers = torch.tensor([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]], dtype=D)
    gen = np.random.default_rng(3)
    q = torch.cat([c + 0.3 * torch.as_tensor(gen.normal(size=(4, 2))) for c in centers])
    ps = PrototypeSet([centers[i : i + 1] for i in range(3)])
    logits = propagate_predict(q, ps, alpha=1e-3, k=3)
    nearest = torch.cdist(q, centers).argmin(1)
    assert torch.equal(logits.argmax(1), nearest)
    assert torch.equal(predict(q, ps, "mpti", alpha=1e-3, k=3), logits)

"""Autograd versus central differences for every differentiable stage."""

import pytest
import torch

from gradcases import CASES, rnd
from pcfss.gradcheck import grad_check


@pytest.mark.parametrize("name", list(CASES))
def test_grad_check(name):
    fn, tensors, tol = CASES[name]()
    rep = grad_check(fn, tensors, tolerance=tol)
    assert rep.passed, f"{name}: {rep}"
    assert rep.n_entries == sum(t.numel() for t in tensors.values())


def test_rejects_float32():
    x = torch.ones(3)
    with pytest.raises(TypeError, match="float64"):
        grad_check(lambda: x * 2, {"x": x})


def test_detects_wrong_gradient():
    x = rnd(4)

    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, a):
            return a * a

        @staticmethod
        def backward(ctx, g):
            return g  # should be 2a g

    rep = grad_check(lambda: Bad.apply(x), {"x": x})
    assert not rep.passed and "x[" in rep.worst


def test_restores_values_and_flags():
    x = rnd(5)
    before = x.clone()
    grad_check(lambda: (x**3).sum(), {"x": x})
    assert torch.equal(x, before) and not x.requires_grad


def test_flags_non_finite():
    x = torch.tensor([0.0, 1.0], dtype=torch.float64)
    rep = grad_check(lambda: torch.sqrt(x), {"x": x})
    assert not rep.finite and not rep.passed

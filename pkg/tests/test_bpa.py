"""Background prototype adaptation: correlations, gate, rectification, flags."""

import math

import numpy as np
import pytest
import torch

from pcfss.blocks import seeded_init
from pcfss.bpa import (
    BPA,
    BpaFlags,
    bpa_adapt,
    correlate,
    exclusive_correlation,
    fg_filter_gate,
    inclusive_correlation,
    rectify,
)
from pcfss.gradcheck import grad_check, module_tensors
from pcfss.prototypes import PrototypeSet

D = torch.float64


def _bpa(dim=6, seed=0, **flags):
    return BPA(dim, BpaFlags(**flags), seed=seed).double()


def rnd(*shape, seed=0):
    return torch.as_tensor(np.random.default_rng(seed).normal(size=shape))


def _loop_attention(q, kv, attn):
    Wq, Wk, Wv = (w.detach().numpy() for w in (attn.w_q, attn.w_k, attn.w_v))
    q, kv = q.numpy(), kv.numpy()
    d = q.shape[1]
    out = np.zeros_like(q)
    for i in range(q.shape[0]):
        s = [float((q[i] @ Wq) @ (kv[j] @ Wk)) / math.sqrt(d) for j in range(kv.shape[0])]
        e = np.exp(np.array(s) - max(s))
        for j in range(kv.shape[0]):
            out[i] += e[j] / e.sum() * (kv[j] @ Wv)
    return out


def test_inclusive_correlation_single_row_and_shape():
    b = _bpa()
    p_bg, f_q = rnd(3, 6), rnd(1, 6, seed=1)
    r_q = inclusive_correlation(p_bg, f_q, b)
    torch.testing.assert_close(r_q, (f_q @ b.attention.w_v).expand(3, 6), atol=1e-14, rtol=0)
    assert inclusive_correlation(rnd(4, 6), rnd(9, 6), b).shape == (4, 6)


@pytest.mark.parametrize("which", ["c1", "c2", "rect"])
def test_correlations_match_loop_oracle(which):
    b = _bpa(seed=3)
    q, kv = rnd(2, 6, seed=4), rnd(3, 6, seed=5)
    fn = {"c1": inclusive_correlation, "c2": exclusive_correlation, "rect": rectify}[which]
    np.testing.assert_allclose(fn(q, kv, b).detach().numpy(), _loop_attention(q, kv, b.attention), atol=1e-10)


def test_exclusive_single_fg_row_constant():
    b = _bpa()
    r_s = exclusive_correlation(rnd(4, 6), rnd(1, 6, seed=2), b)
    assert torch.allclose(r_s, r_s[:1].expand(4, 6), atol=1e-14)


def test_shared_weights_by_identity():
    b = _bpa()
    assert b.c1 is b.c2 is b.rect
    x, y = rnd(2, 6), rnd(5, 6, seed=1)
    assert torch.equal(inclusive_correlation(x, y, b), exclusive_correlation(x, y, b))
    before = [f(x, y, b).clone() for f in (inclusive_correlation, exclusive_correlation, rectify)]
    with torch.no_grad():
        b.c2.w_k.add_(0.5)  # mutate through one role
    after = [f(x, y, b) for f in (inclusive_correlation, exclusive_correlation, rectify)]
    assert all(not torch.allclose(a, c) for a, c in zip(before, after))
    assert sum(1 for n, _ in b.named_parameters() if n.startswith("attention.")) == 3


def test_gate_zero_mlp_halves():
    b = _bpa()
    for p in b.gate.parameters():
        p.data.zero_()
    r_q, r_s = rnd(3, 6), rnd(3, 6, seed=1)
    assert torch.equal(fg_filter_gate(r_q, r_s, b), 0.5 * r_q)


def test_subtract_mode_with_zero_rs():
    r_q = rnd(3, 6)
    assert torch.equal(fg_filter_gate(r_q, torch.zeros(3, 6, dtype=D), _bpa(), mode="subtract"), r_q)


@pytest.mark.parametrize("seed", range(10))
def test_gate_attenuates(seed):
    b = _bpa(seed=seed)
    r_q, r_s = rnd(5, 6, seed=seed) * 5, rnd(5, 6, seed=seed + 100) * 5
    r = fg_filter_gate(r_q, r_s, b)
    assert torch.all(r.abs() <= r_q.abs())
    nz = r_q != 0
    assert torch.all(r.abs()[nz] < r_q.abs()[nz])


def test_filter_errors():
    with pytest.raises(ValueError, match="unknown FG filter"):
        fg_filter_gate(rnd(2, 6), rnd(2, 6), _bpa(), mode="concat")
    with pytest.raises(ValueError, match="shape"):
        fg_filter_gate(rnd(2, 6), rnd(3, 6), _bpa())
    with pytest.raises(ValueError):
        BpaFlags(filter="nope")
    with pytest.raises(ValueError):
        BpaFlags(corr="nope")


def test_projector_mode_shape():
    assert fg_filter_gate(rnd(4, 6), rnd(4, 6, seed=1), _bpa(), mode="projector").shape == (4, 6)


def _ps(m_bg=10, m_fg=10, n_way=1, d=6, seed=0):
    return PrototypeSet([rnd(m_bg, d, seed=seed)] + [rnd(m_fg, d, seed=seed + 1 + i) for i in range(n_way)])


def test_all_flags_off_is_identity():
    ps = _ps()
    out = bpa_adapt(ps, rnd(50, 6, seed=9), _bpa(use_c1=False, use_g=False, use_r=False))
    assert out.bg is ps.bg


def test_c1_only_equals_inclusive_correlation():
    ps, f_q = _ps(), rnd(50, 6, seed=9)
    b = _bpa(use_g=False, use_r=False)
    torch.testing.assert_close(bpa_adapt(ps, f_q, b).bg, inclusive_correlation(ps.bg, f_q, b), rtol=0, atol=0)


def test_full_pipeline_composition_and_shape():
    d = 64
    ps, f_q = _ps(d=d), rnd(512, d, seed=9)
    b = _bpa(dim=d, seed=1)
    out = bpa_adapt(ps, f_q, b)
    assert out.bg.shape == (10, d)
    r_q = inclusive_correlation(ps.bg, f_q, b)
    r = fg_filter_gate(r_q, exclusive_correlation(ps.bg, ps.fg[0], b), b)
    torch.testing.assert_close(out.bg, rectify(ps.bg, r, b), rtol=0, atol=0)


@pytest.mark.parametrize("flags", [{}, {"filter": "subtract"}, {"filter": "projector"}, {"corr": "no_fg"}, {"corr": "mlp"}])
def test_fg_prototypes_bitwise_untouched(flags):
    ps = _ps(n_way=2)
    fg_before = [p.clone() for p in ps.fg]
    out = bpa_adapt(ps, rnd(40, 6, seed=3), _bpa(**flags))
    assert all(torch.equal(a, b) for a, b in zip(out.fg, fg_before))
    assert all(a is b for a, b in zip(out.fg, ps.fg))
    assert out.source == "adapted"


def test_adapt_fg_ablation_changes_fg():
    ps = _ps(n_way=2, m_fg=3)
    out = bpa_adapt(ps, rnd(40, 6, seed=3), _bpa(adapt_fg=True))
    assert out.counts == ps.counts
    assert not torch.allclose(out.fg[0], ps.fg[0])


def test_corr_modes():
    ps, f_q = _ps(), rnd(30, 6, seed=2)
    b = _bpa(corr="no_fg")
    c = correlate(ps.bg, f_q, ps.fg[0], b)
    assert c.r_s is None and torch.equal(c.r, c.r_q)
    c = correlate(ps.bg, f_q, ps.fg[0], _bpa(corr="mlp"))
    assert c.r.shape == ps.bg.shape


def test_width_mismatch():
    with pytest.raises(ValueError, match="widths"):
        bpa_adapt(_ps(d=6), rnd(10, 5), _bpa())


@pytest.mark.parametrize("flags", [{}, {"filter": "projector"}, {"corr": "mlp"}])
def test_bpa_grad_check(flags):
    b = _bpa(dim=4, seed=2, **flags)
    p_bg, p_fg, f_q = rnd(3, 4, seed=1), rnd(2, 4, seed=2), rnd(7, 4, seed=3)
    tensors = {"p_bg": p_bg, "p_fg": p_fg, "f_q": f_q, **module_tensors(b)}

    def fn():
        return bpa_adapt(PrototypeSet([p_bg, p_fg]), f_q, b).bg

    rep = grad_check(fn, {k: v for k, v in tensors.items() if _used(k, flags)})
    assert rep.passed, str(rep)


def _used(name, flags):
    if name.startswith("projector."):
        return flags.get("filter") == "projector"
    if name.startswith("correlator."):
        return flags.get("corr") == "mlp"
    if name.startswith("gate."):
        return not flags
    return True

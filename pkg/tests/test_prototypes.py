"""Mask pooling, shot merging, FPS multi-prototypes and flattening."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from pcfss.prototypes import (
    PrototypeSet,
    flatten_for_bpa,
    mask_pool,
    merge_shots,
    multi_prototype_generate,
    multi_prototypes,
    single_prototypes,
    unflatten,
)

D = torch.float64


def t(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def test_mask_pool_singletons():
    p_fg, p_bg, flags = mask_pool(t([[1, 1], [3, 3]]), torch.tensor([1, 0]))
    assert p_fg.tolist() == [1.0, 1.0] and p_bg.tolist() == [3.0, 3.0]
    assert flags == (False, False)


def test_mask_pool_all_foreground_flags_background():
    f = t([[1, 2], [3, 4], [5, 9]])
    p_fg, p_bg, flags = mask_pool(f, torch.ones(3, dtype=torch.long))
    torch.testing.assert_close(p_fg, f.mean(0))
    assert p_bg.tolist() == [0.0, 0.0] and flags == (False, True)


def test_mask_pool_loop_oracle():
    rng = np.random.default_rng(0)
    f, y = rng.normal(size=(6, 3)), np.array([1, 0, 0, 1, 1, 0])
    fg = sum(f[i] for i in range(6) if y[i]) / 3
    bg = sum(f[i] for i in range(6) if not y[i]) / 3
    p_fg, p_bg, _ = mask_pool(t(f), torch.as_tensor(y))
    np.testing.assert_allclose(p_fg.numpy(), fg, atol=1e-14)
    np.testing.assert_allclose(p_bg.numpy(), bg, atol=1e-14)


def test_mask_pool_rejects_non_binary_and_bad_shape():
    with pytest.raises(ValueError, match="binary"):
        mask_pool(t([[1.0], [2.0]]), torch.tensor([2, 0]))
    with pytest.raises(ValueError, match="shape"):
        mask_pool(t([[1.0], [2.0]]), torch.tensor([1, 0, 1]))


def test_merge_shots_identity_and_order():
    a, b = torch.randn(4, 3, dtype=D), torch.randn(4, 3, dtype=D)
    ya, yb = torch.tensor([1, 0, 0, 1]), torch.tensor([0, 1, 1, 1])
    f, y = merge_shots([a], [ya])
    assert torch.equal(f, a) and torch.equal(y, ya)
    f, y = merge_shots([a, b], [ya, yb])
    assert f.shape == (8, 3) and torch.equal(f[4:], b) and y.tolist() == [1, 0, 0, 1, 0, 1, 1, 1]


def test_merge_shots_pool_is_count_weighted():
    rng = np.random.default_rng(1)
    a, b = t(rng.normal(size=(5, 2))), t(rng.normal(size=(7, 2)))
    ya, yb = torch.tensor([1, 1, 0, 0, 0]), torch.tensor([1, 0, 1, 1, 0, 1, 0])
    p_fg, _, _ = mask_pool(*merge_shots([a, b], [ya, yb]))
    sums = a[ya.bool()].sum(0) + b[yb.bool()].sum(0)
    torch.testing.assert_close(p_fg, sums / (2 + 4), atol=1e-14, rtol=0)


def test_merge_shots_width_mismatch():
    with pytest.raises(ValueError, match="width"):
        merge_shots([torch.zeros(2, 3), torch.zeros(2, 4)], [torch.zeros(2), torch.zeros(2)])


def test_multi_prototypes_hand_example():
    f = t([[0.0], [0.1], [0.2], [5.0], [5.1], [5.2]])
    protos, sa = multi_prototype_generate(f, torch.ones(6, dtype=torch.long), 2, start=0)
    assert sa.seeds.indices.tolist() == [0, 5]
    torch.testing.assert_close(protos, t([[0.1], [5.1]]), atol=1e-12, rtol=0)
    assert sa.member_counts.tolist() == [3, 3]


def test_multi_prototypes_m1_equals_mask_pool():
    rng = np.random.default_rng(2)
    f, y = t(rng.normal(size=(20, 4))), torch.as_tensor(rng.integers(0, 2, 20))
    protos, _ = multi_prototype_generate(f, y, 1)
    p_fg, _, _ = mask_pool(f, y)
    torch.testing.assert_close(protos[0], p_fg, atol=1e-12, rtol=0)


def test_multi_prototypes_m_ge_count_each_point_own():
    f = t(np.random.default_rng(3).normal(size=(5, 3)))
    protos, sa = multi_prototype_generate(f, torch.ones(5, dtype=torch.long), 9)
    assert protos.shape == (5, 3)
    torch.testing.assert_close(protos, f[sa.seeds.indices])


def test_multi_prototypes_empty_category_named():
    with pytest.raises(ValueError, match="background"):
        multi_prototype_generate(torch.zeros(3, 2, dtype=D), torch.zeros(3, dtype=torch.long), 2, category="background")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8))
def test_assignment_optimal_counts_and_hull(seed, m):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 40))
    f = t(np.round(rng.normal(size=(n, 3)), 1))
    y = torch.as_tensor(rng.integers(0, 2, n))
    if int(y.sum()) == 0:
        y[0] = 1
    protos, sa = multi_prototype_generate(f, y, m)
    members = f[y.bool()]
    centers = members[sa.seeds.indices]
    d = ((members[:, None] - centers[None]) ** 2).sum(-1)
    # nearest seed, ties to lower ordinal
    for i in range(members.shape[0]):
        best = d[i].min()
        assert sa.assignment[i] == int(torch.nonzero(d[i] == best)[0])
    assert int(sa.member_counts.sum()) == members.shape[0]
    for s in range(len(sa.seeds)):
        grp = members[sa.assignment == s]
        assert torch.all(protos[s] >= grp.min(0).values - 1e-12)
        assert torch.all(protos[s] <= grp.max(0).values + 1e-12)


def test_single_prototypes_background_pools_all_shots():
    rng = np.random.default_rng(4)
    feats = [[t(rng.normal(size=(6, 2))) for _ in range(2)] for _ in range(2)]
    masks = [[torch.as_tensor(rng.integers(0, 2, 6)) for _ in range(2)] for _ in range(2)]
    ps = single_prototypes(feats, masks)
    all_f = torch.cat([f for shots in feats for f in shots])
    all_bg = torch.cat([1 - m for ms in masks for m in ms])
    torch.testing.assert_close(ps.bg[0], all_f[all_bg.bool()].mean(0))
    assert ps.n_categories == 3 and ps.counts == [1, 1, 1]


def test_multi_prototypes_shapes():
    rng = np.random.default_rng(5)
    feats = [[t(rng.normal(size=(30, 4)))] for _ in range(2)]
    masks = [[torch.as_tensor((np.arange(30) < 15).astype(int))] for _ in range(2)]
    ps = multi_prototypes(feats, masks, 4)
    assert ps.counts == [4, 4, 4]


def test_flatten_two_way_paper_counts():
    d = 8
    ps = PrototypeSet([torch.randn(100, d), torch.randn(100, d), torch.randn(100, d)])
    bg, fg, index = flatten_for_bpa(ps)
    assert bg.shape == (100, d) and fg.shape == (200, d)
    back = unflatten(bg, fg, index)
    assert all(torch.equal(a, b) for a, b in zip(back.protos, ps.protos))


def test_flatten_one_way_single():
    ps = PrototypeSet([torch.randn(1, 3), torch.randn(1, 3)])
    bg, fg, index = flatten_for_bpa(ps)
    assert bg.shape == (1, 3) and fg.shape == (1, 3)
    assert unflatten(bg, fg, index).counts == ps.counts


def test_prototype_set_validation():
    with pytest.raises(ValueError):
        PrototypeSet([torch.zeros(1, 2)])
    with pytest.raises(ValueError):
        PrototypeSet([torch.zeros(1, 2)] * 2, source="teacher")

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import llama_toy_store
from spectraprune.allocation import BudgetPlan, SparsityPlan, allocate_sparsity
from spectraprune.compression import (
    apply_plan,
    lra_truncate,
    magnitude_prune,
    nm_prune,
    rtn_quantize,
    zero_count,
)
from spectraprune.errors import PlanError
from spectraprune.metrics import analyze_model
from spectraprune.tensorio import WeightStore, group_blocks


def sort_oracle(W, s):
    """Pure-python: sort (|w|, index) pairs and zero the first round(s·d)."""
    flat = [float(x) for x in np.asarray(W).reshape(-1)]
    z = int(math.floor(s * len(flat) + 0.5))
    order = sorted(range(len(flat)), key=lambda i: (abs(flat[i]), i))
    out = list(flat)
    for i in order[:z]:
        out[i] = 0.0
    return np.array(out).reshape(np.shape(W))


def test_magnitude_example():
    out, mask = magnitude_prune(np.array([[1.0, -2.0], [3.0, -4.0]]), 0.5)
    assert out.tolist() == [[0.0, 0.0], [3.0, -4.0]]
    assert mask.sparsity == 0.5 and mask.kept_count == 2


def test_zero_count_rounds_half_up():
    assert zero_count(0.5, 3) == 2
    assert zero_count(0.25, 2) == 1
    assert zero_count(0.0, 9) == 0 and zero_count(1.0, 9) == 9


def test_magnitude_ties_prefer_earlier_index():
    out, _ = magnitude_prune(np.array([[1.0, 1.0, 1.0, 1.0]]), 0.5)
    assert out.tolist() == [[0.0, 0.0, 1.0, 1.0]]


def test_magnitude_matches_sort_oracle():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        W = rng.normal(size=(8, 8))
        if rng.random() < 0.3:
            W = np.round(W, 1)  # force ties
        s = float(rng.random())
        out, _ = magnitude_prune(W, s)
        np.testing.assert_array_equal(out, sort_oracle(W, s))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (6, 7), elements=st.floats(-1e3, 1e3)), st.floats(0, 1), st.floats(0, 1))
def test_masks_are_nested(W, s1, s2):
    lo, hi = sorted((s1, s2))
    _, m_lo = magnitude_prune(W, lo)
    _, m_hi = magnitude_prune(W, hi)
    assert np.all(m_lo.keep | ~m_hi.keep)  # keep(hi) ⊆ keep(lo)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (5, 5), elements=st.floats(-1e3, 1e3)), st.floats(0, 1), st.sampled_from([0.5, 2.0, -4.0, 1024.0]))
def test_scale_equivariance(W, s, c):
    out, mask = magnitude_prune(W, s)
    out_c, mask_c = magnitude_prune(c * W, s)
    np.testing.assert_array_equal(mask.keep, mask_c.keep)
    np.testing.assert_array_equal(out_c, c * out)


def test_magnitude_rejects_bad_sparsity():
    with pytest.raises(ValueError):
        magnitude_prune(np.ones((2, 2)), 1.5)


def nm_oracle(W, N, M):
    out = np.array(W, dtype=float)
    for r in range(out.shape[0]):
        for g in range(0, out.shape[1], M):
            idx = sorted(range(g, g + M), key=lambda j: (-abs(out[r, j]), j))
            for j in idx[N:]:
                out[r, j] = 0.0
    return out


def test_nm_24_example():
    W = np.array([[1.0, -3.0, 2.0, 0.5, 4.0, 4.0, -1.0, 0.0]])
    out, _ = nm_prune(W, 2, 4)
    assert out.tolist() == [[0.0, -3.0, 2.0, 0.0, 4.0, 4.0, 0.0, 0.0]]


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 5), st.sampled_from([2, 4, 8]), st.integers(1, 4), st.data())
def test_nm_matches_oracle(rows, M, groups, data):
    N = data.draw(st.integers(1, M))
    W = data.draw(arrays(np.float64, (rows, M * groups), elements=st.floats(-10, 10).map(lambda x: round(x, 1))))
    out, mask = nm_prune(W, N, M)
    np.testing.assert_array_equal(out, nm_oracle(W, N, M))
    assert np.all(mask.keep.reshape(rows, groups, M).sum(-1) == N)


def test_nm_errors():
    with pytest.raises(ValueError):
        nm_prune(np.ones((2, 6)), 2, 4)
    with pytest.raises(ValueError):
        nm_prune(np.ones((2, 4)), 5, 4)


def test_rtn_example():
    # 2 bits: qmax = 1, scale = 1
    np.testing.assert_array_equal(rtn_quantize(np.array([[0.0, -1.0]]), 2), [[0.0, -1.0]])
    out = rtn_quantize(np.array([[0.5, 1.5, -2.0]]), 2)
    # codes round(x/2): 0.25 -> 0, 0.75 -> 1, -1 -> -1; scale 2
    np.testing.assert_array_equal(out, [[0.0, 2.0, -2.0]])


def test_rtn_error_decreases_with_bits():
    W = np.random.default_rng(0).normal(size=(64, 64)).astype(np.float32)
    errs = [np.linalg.norm(W - rtn_quantize(W, b)) for b in range(2, 9)]
    assert all(a > b for a, b in zip(errs, errs[1:]))


def test_rtn_levels_and_zero():
    W = np.random.default_rng(1).normal(size=(16, 16))
    out = rtn_quantize(W, 3)
    assert len(np.unique(out)) <= 2 * 3 + 1
    np.testing.assert_array_equal(rtn_quantize(np.zeros((3, 3)), 4), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        rtn_quantize(W, 1)


def test_lra_diagonal():
    approx, err = lra_truncate(np.diag([3.0, 2.0, 1.0]), 2)
    assert err == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(approx, np.diag([3.0, 2.0, 0.0]), atol=1e-12)


def test_lra_random_oracle():
    rng = np.random.default_rng(3)
    W = rng.normal(size=(30, 20))
    sv = np.linalg.svd(W, compute_uv=False)
    for r in (1, 5, 19, 20):
        approx, err = lra_truncate(W, r)
        assert err == pytest.approx(float(np.sqrt(np.sum(sv[r:] ** 2))), abs=1e-10)
        assert np.linalg.matrix_rank(approx) == r
    with pytest.raises(ValueError):
        lra_truncate(W, 0)


# --------------------------------------------------------------------------
# apply_plan


def plan_for(store, value):
    return SparsityPlan({n: value for n in group_blocks(store, "llama").grouped_names}, value, 1, 1, value)


def test_zero_sparsity_is_identity():
    store = llama_toy_store()
    pruned, report = apply_plan(store, plan_for(store, 0.0))
    assert pruned.equal_bits(store)
    assert report.global_sparsity == 0.0


def test_uniform_half():
    store = llama_toy_store()
    pruned, report = apply_plan(store, plan_for(store, 0.5))
    assert report.global_sparsity == pytest.approx(0.5, abs=1e-12)
    for m in report.matrices:
        assert m.achieved_sparsity * m.d == zero_count(0.5, m.d)
    # untouched tensors keep their bits
    assert np.array_equal(pruned["model.norm.weight"].data, store["model.norm.weight"].data)


def test_achieved_counts_follow_plan():
    store = llama_toy_store(blocks=4)
    grouping = group_blocks(store, "llama")
    analysis = analyze_model(store, grouping)
    from spectraprune.allocation import plan_from_analysis

    plan = plan_from_analysis(analysis, 0.7, tau=0.2)
    _, report = apply_plan(store, plan)
    for m in report.matrices:
        assert round(m.achieved_sparsity * m.d) == zero_count(plan.per_matrix[m.name], m.d)
    total = sum(m.d for m in report.matrices)
    assert abs(report.global_sparsity - 0.7) <= len(report.matrices) / total


def test_all_or_nothing():
    store = llama_toy_store()
    plan = plan_for(store, 0.5)
    plan.per_matrix["model.layers.9.mlp.up_proj.weight"] = 0.5
    before = {n: store[n].data.copy() for n in store}
    with pytest.raises(PlanError):
        apply_plan(store, plan)
    assert all(np.array_equal(store[n].data, before[n]) for n in store)
    with pytest.raises(PlanError):
        apply_plan(store, SparsityPlan({"model.norm.weight": 0.5}, 0.5, 1, 1, 0.5))


def test_prune_is_idempotent():
    store = llama_toy_store()
    plan = plan_for(store, 0.6)
    once, _ = apply_plan(store, plan)
    twice, _ = apply_plan(once, plan)
    assert twice.equal_bits(once)


def test_half_precision_zeros_are_counted():
    store = llama_toy_store(dtype="bf16")
    pruned, report = apply_plan(store, plan_for(store, 0.5))
    assert report.global_sparsity == pytest.approx(0.5, abs=1e-12)
    assert pruned[report.matrices[0].name].dtype == "bf16"


def test_post_prune_alphas_finite():
    store = llama_toy_store(blocks=3)
    pruned, _ = apply_plan(store, plan_for(store, 0.7))
    analysis = analyze_model(pruned, group_blocks(pruned, "llama"))
    assert all(m.alpha_hill is not None and np.isfinite(m.alpha_hill) for m in analysis.matrices)


def test_budget_plans():
    store = llama_toy_store(blocks=2)
    names = group_blocks(store, "llama").grouped_names
    nm = BudgetPlan("nm", {n: 2 for n in names}, 0.5, [], group_size=4)
    pruned, report = apply_plan(store, nm)
    assert report.global_sparsity == pytest.approx(0.5)
    bits = BudgetPlan("bits", {n: 4 for n in names}, 4.0, [2, 3, 4])
    _, report = apply_plan(store, bits)
    assert all(m.bits == 4 and m.reconstruction_error > 0 for m in report.matrices)
    ranks = BudgetPlan("ranks", {n: 3 for n in names}, 3 * len(names), [])
    pruned, report = apply_plan(store, ranks)
    for m in report.matrices:
        assert np.linalg.matrix_rank(pruned.matrix(m.name).astype(np.float64), tol=1e-4) == 3
    with pytest.raises(PlanError):
        apply_plan(store, BudgetPlan("ranks", {names[0]: 10**6}, 1, []))
    with pytest.raises(PlanError):
        apply_plan(store, BudgetPlan("nm", {names[0]: 2}, 0.5, [], group_size=7))

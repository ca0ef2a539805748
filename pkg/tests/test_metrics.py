import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import llama_toy_store
from spectraprune.errors import SpectrumError
from spectraprune.metrics import (
    Analysis,
    alpha_hat,
    analyze_model,
    entropy,
    matrix_metrics,
    scale_norms,
    stable_rank,
)
from spectraprune.spectral import ESD, PLFit, compute_esd, pl_alpha_hill
from spectraprune.tensorio import Block, BlockGrouping, WeightStore, group_blocks


def fit(alpha, lambda_max):
    return PLFit(alpha=alpha, k=2, lambda_min=0.5, lambda_max=lambda_max, n=10)


def test_alpha_hat_values():
    assert alpha_hat(fit(2.5, 1.0)) == 0.0
    assert alpha_hat(fit(2.0, math.e**2)) == pytest.approx(4.0, rel=1e-15)
    with pytest.raises(SpectrumError):
        alpha_hat(fit(2.0, 0.0))


def test_alpha_hat_on_pareto_fit():
    lam = np.sort((1.0 - np.random.default_rng(4).random(5000)) ** (-1 / 2.0))
    f = pl_alpha_hill(ESD(lam))
    assert alpha_hat(f) == pytest.approx(f.alpha * math.log(lam[-1]), rel=1e-9)


def test_stable_rank_values():
    assert stable_rank(compute_esd(np.eye(5))) == pytest.approx(5.0)
    assert stable_rank(compute_esd(np.diag([2.0, 1.0]))) == pytest.approx(1.25)
    u, v = np.arange(1.0, 5.0), np.arange(1.0, 4.0)
    assert stable_rank(compute_esd(np.outer(u, v))) == pytest.approx(1.0)
    with pytest.raises(SpectrumError):
        stable_rank(ESD(np.zeros(3)))


def test_entropy_values():
    assert entropy(compute_esd(np.eye(6))) == pytest.approx(1.0)
    assert entropy(compute_esd(np.outer([1.0, 2.0, 3.0], [1.0, -1.0]))) == 0.0
    expected = (-1 / math.log(2)) * (0.25 * math.log(0.25) + 0.75 * math.log(0.75))
    assert entropy(ESD.from_values([1, 3])) == pytest.approx(expected, rel=1e-12)
    assert entropy(ESD.from_values([1, 3])) == pytest.approx(0.8113, abs=1e-4)
    with pytest.raises(SpectrumError):
        entropy(ESD(np.zeros(4)))


def test_entropy_uses_numerical_rank():
    # a zero eigenvalue does not count toward R
    assert entropy(ESD.from_values([0.0, 1.0, 1.0])) == pytest.approx(1.0)


def test_scale_norms():
    assert scale_norms(ESD.from_values([1, 4])) == (5.0, 4.0)
    assert scale_norms(compute_esd(np.eye(3))) == pytest.approx((3.0, 1.0))
    W = np.random.default_rng(9).standard_normal((7, 5))
    fro, spec = scale_norms(compute_esd(W))
    assert fro == pytest.approx(np.sum(W * W), rel=1e-6)
    smax = scipy.linalg.svd(W, compute_uv=False, lapack_driver="gesvd")[0]
    assert spec == pytest.approx(smax**2, rel=1e-6)


matrices = arrays(
    np.float64, st.tuples(st.integers(2, 9), st.integers(2, 9)), elements=st.floats(-10, 10, allow_subnormal=False)
).filter(lambda W: np.abs(W).max() > 1e-3)


@settings(max_examples=60, deadline=None)
@given(matrices, st.floats(0.01, 100), st.booleans())
def test_shape_metrics_scale_free(W, c, negate):
    c = -c if negate else c
    e1, e2 = compute_esd(W), compute_esd(c * W)
    assert stable_rank(e2) == pytest.approx(stable_rank(e1), rel=1e-9)
    assert entropy(e2) == pytest.approx(entropy(e1), rel=1e-7, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(matrices)
def test_metric_invariants(W):
    e = compute_esd(W)
    fro, spec = scale_norms(e)
    assert spec <= fro * (1 + 1e-12)
    assert fro <= len(e) * spec * (1 + 1e-12)
    assert stable_rank(e) == fro / spec
    assert 0.0 <= entropy(e) <= 1.0
    assert fro == pytest.approx(np.sum(W * W), rel=1e-6)


def test_alpha_hill_transpose_invariant():
    W = np.random.default_rng(2).standard_normal((40, 90))
    assert pl_alpha_hill(compute_esd(W)).alpha == pytest.approx(pl_alpha_hill(compute_esd(W.T)).alpha, rel=1e-9)


def test_matrix_metrics_records_errors():
    mm = matrix_metrics(np.eye(12), "eye")
    assert mm.stable_rank == pytest.approx(12)
    assert mm.alpha_hill is None and "fit failed" in mm.error
    z = matrix_metrics(np.zeros((4, 4)), "z")
    assert z.error and z.stable_rank is None


# --------------------------------------------------------------------------
# analyze_model


def two_block_store(W0, W1):
    return WeightStore.from_arrays({"model.layers.0.a": W0, "model.layers.1.a": W1})


def test_identical_blocks_equal_quality():
    W = np.random.default_rng(0).standard_normal((30, 20))
    store = two_block_store(W, W)
    res = analyze_model(store, group_blocks(store, "llama"))
    assert res.blocks[0].q == res.blocks[1].q


def test_block_mean(monkeypatch):
    store = WeightStore.from_arrays({"b.0.x": np.ones((2, 2)), "b.0.y": np.ones((2, 2))})
    grouping = BlockGrouping((Block(0, ("b.0.x", "b.0.y")),), ())
    from spectraprune import metrics as mod

    values = {"b.0.x": 2.0, "b.0.y": 4.0}

    def fake(W, name="", d=None, block=None):
        return mod.MatrixMetrics(name=name, d=W.size, block=block, alpha_hill=values[name])

    monkeypatch.setattr(mod, "matrix_metrics", fake)
    res = analyze_model(store, grouping, "alpha_hill")
    assert res.blocks[0].q == 3.0
    assert res.blocks[0].d == 8


def test_failed_members_skipped_and_reported():
    rng = np.random.default_rng(1)
    store = WeightStore.from_arrays(
        {"model.layers.0.good": rng.standard_normal((40, 30)), "model.layers.0.eye": np.eye(30)}
    )
    res = analyze_model(store, group_blocks(store, "llama"))
    good = res.by_name()["model.layers.0.good"].alpha_hill
    assert res.blocks[0].q == good
    assert res.blocks[0].failures == ["model.layers.0.eye"]
    assert res.blocks[0].d == 40 * 30 + 30 * 30
    # stable rank is defined for both
    res_sr = analyze_model(store, group_blocks(store, "llama"), "stable_rank")
    assert res_sr.blocks[0].failures == []


def test_block_without_usable_member_is_error():
    store = WeightStore.from_arrays({"model.layers.0.eye": np.eye(20)})
    with pytest.raises(SpectrumError, match="block 0"):
        analyze_model(store, group_blocks(store, "llama"))


def test_unknown_metric():
    store = llama_toy_store()
    with pytest.raises(ValueError):
        analyze_model(store, group_blocks(store, "llama"), "bogus")


def reference_block_q(store, metric_fn):
    """End-to-end reference: straight-line recomputation of block means."""
    out = {}
    for name in store:
        if not name.startswith("model.layers.") or store[name].ndim != 2:
            continue
        idx = int(name.split(".")[2])
        W = store[name].values().astype(np.float64)
        s = scipy.linalg.svd(W, compute_uv=False, lapack_driver="gesvd") ** 2
        out.setdefault(idx, []).append(metric_fn(np.sort(s)))
    return [float(np.mean(out[i])) for i in sorted(out)]


def test_toy_llama_block_qualities_match_reference():
    store = llama_toy_store(blocks=4)
    grouping = group_blocks(store, "llama")
    sr = analyze_model(store, grouping, "stable_rank")
    np.testing.assert_allclose([b.q for b in sr.blocks], reference_block_q(store, lambda s: s.sum() / s[-1]), rtol=1e-9)
    fro = analyze_model(store, grouping, "frobenius")
    np.testing.assert_allclose([b.q for b in fro.blocks], reference_block_q(store, np.sum), rtol=1e-9)
    al = analyze_model(store, grouping, "alpha_hill")
    np.testing.assert_allclose(
        [b.q for b in al.blocks], reference_block_q(store, lambda s: pl_alpha_hill(ESD(s)).alpha), rtol=1e-9
    )
    # heavier tails were planted in later blocks
    assert al.blocks[0].q > al.blocks[-1].q


def test_threads_do_not_change_results():
    store = llama_toy_store(blocks=4)
    grouping = group_blocks(store, "llama")
    a = analyze_model(store, grouping, threads=1).to_dict()
    b = analyze_model(store, grouping, threads=4).to_dict()
    assert a == b


def test_report_round_trip():
    store = llama_toy_store()
    res = analyze_model(store, group_blocks(store, "llama"))
    again = Analysis.from_dict(res.to_dict())
    assert [m.row() for m in again.matrices] == [m.row() for m in res.matrices]
    assert again.blocks == res.blocks


def test_alpha_and_stable_rank_move_together_on_pareto_grid():
    from spectraprune.synthlab import sample_pareto_esd

    grid = (1.5, 2.0, 2.5, 3.0, 3.5, 4.0)
    mean_sr = []
    for a in grid:
        mean_sr.append(np.mean([stable_rank(sample_pareto_esd(a, 10_000, s).esd) for s in range(5)]))
    assert all(x < y for x, y in zip(mean_sr, mean_sr[1:]))

from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp
import numpy as np
import pytest

from oracles import jacobi_eig, taylor_expm
from shadowfl import robust as R
from shadowfl.numerics import NumericsError


def _contaminated(rng, n=1000, k=5, alpha=0.1, shift=6.0):
    x = rng.standard_normal((n, k))
    bad = rng.random(n) < alpha
    x[bad, 0] += shift
    return x, np.flatnonzero(bad)


@pytest.mark.parametrize("alpha,n,expected", [
    (0.1, 50, 8), (0.14, 50, 11), (0.2, 50, 15), (0.001, 10, 1), (0.45, 4, 3), (0.49, 2, 2),
])
def test_threshold_rank(alpha, n, expected):
    assert R.threshold_rank(alpha, n) == expected


def _que_oracle(h, beta):
    n, k = h.shape
    s = h.T @ h / n
    top = jacobi_eig(s)[0][0]
    q = taylor_expm(beta * (s - np.eye(k)) / (top - 1.0))
    return np.array([row @ q @ row for row in h]) / np.trace(q)


def test_que_matches_taylor_oracle(rng):
    h = rng.standard_normal((80, 4)) * [2.0, 1.2, 1.0, 0.8]
    got = R.que_score(h, 4.0)
    assert not got.degenerate
    np.testing.assert_allclose(got.scores, _que_oracle(h, 4.0), rtol=1e-8)


def test_que_degenerate_falls_back_to_identity(rng):
    # orthonormal columns scaled so the second moment is exactly the identity
    q, _ = np.linalg.qr(rng.standard_normal((40, 3)))
    h = q * np.sqrt(40)
    res = R.que_score(h, 4.0)
    assert res.degenerate
    np.testing.assert_allclose(res.scores, np.sum(h ** 2, axis=1) / 3)


def test_que_beta_zero_is_squared_norm(rng):
    h = rng.standard_normal((30, 4)) * 2
    np.testing.assert_allclose(R.que_score(h, 0.0).scores, np.sum(h ** 2, axis=1) / 4)


def test_que_large_beta_approaches_top_projection():
    rng = np.random.default_rng(3)
    h = rng.standard_normal((300, 4)) * [3.0, 1.5, 1.0, 0.5]
    v = jacobi_eig(h.T @ h / 300)[1][:, 0]
    proj = (h @ v) ** 2
    s = R.que_score(h, 100.0).scores
    mask = proj > 1e-2
    np.testing.assert_allclose(s[mask] / s.mean(), proj[mask] / proj.mean(), rtol=0.02)


def test_que_shift_avoids_overflow(rng):
    h = rng.standard_normal((50, 3)) * [30.0, 1.0, 1.0]
    s = R.que_score(h, 500.0).scores
    assert np.all(np.isfinite(s))


@given(hnp.arrays(np.float64, (12, 3), elements=st.floats(-5, 5, allow_nan=False)), st.integers(0, 10_000))
def test_que_rotation_invariant_and_nonnegative(h, seed):
    if np.linalg.matrix_rank(h) < 3:
        return
    rot, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((3, 3)))
    a = R.que_score(h, 4.0).scores
    b = R.que_score(h @ rot, 4.0).scores
    assert np.all(a >= 0)
    np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-9)


@given(st.permutations(list(range(10))))
def test_que_permutation_equivariant(perm):
    h = np.random.default_rng(0).standard_normal((10, 2)) * [2, 1]
    a = R.que_score(h, 4.0).scores
    b = R.que_score(h[perm], 4.0).scores
    np.testing.assert_allclose(a[perm], b)


def test_que_errors():
    with pytest.raises(R.RobustError):
        R.que_score(np.zeros((1, 3)))
    with pytest.raises(R.RobustError):
        R.que_score(np.ones((4, 2)), -1.0)


def test_robust_est_on_clean_data_is_close(rng):
    x = rng.standard_normal((2000, 4)) @ np.diag([2.0, 1.0, 1.0, 0.5])
    est = R.robust_est(x, 0.05)
    target = np.diag([4.0, 1.0, 1.0, 0.25])
    assert np.abs(est.cov - target).max() < 0.25
    assert len(est.kept) > 1900


def test_robust_est_ignores_shifted_cluster(rng):
    x, bad = _contaminated(rng, 2000, 5, 0.1, 8.0)
    est = R.robust_est(x, 0.1)
    assert abs(est.mean[0]) < 0.15
    assert est.cov[0, 0] < 1.3
    assert np.isin(bad, est.kept).mean() < 0.05
    naive = np.cov(x, rowvar=False)
    assert naive[0, 0] > 5


@given(st.integers(0, 500), st.floats(0.02, 0.3))
def test_robust_est_removal_budget(seed, alpha):
    rng = np.random.default_rng(seed)
    x, _ = _contaminated(rng, 300, 3, alpha, 5.0)
    est = R.robust_est(x, alpha, reweight=False)
    assert 300 - len(est.kept) <= int(np.floor(2 * alpha * 300))
    assert est.iterations <= 10


def test_robust_est_errors(rng):
    with pytest.raises(R.RobustError):
        R.robust_est(rng.standard_normal((100, 2)), 0.5)
    with pytest.raises(R.InsufficientSamples):
        R.robust_est(rng.standard_normal((50, 3)), 0.1)
    R.robust_est(rng.standard_normal((50, 3)), 0.1, strict=False)
    flat = np.zeros((200, 4))
    flat[:, 0] = rng.standard_normal(200)
    with pytest.raises(R.DegenerateInput):
        R.robust_est(flat, 0.1)
    with pytest.raises(R.RobustError):
        R.robust_est(np.zeros(10), 0.1)


def test_effective_k():
    assert R.effective_k(32, 50, 128) == 2
    assert R.effective_k(32, 5, 128) == 1
    assert R.effective_k(32, 5000, 10) == 10
    assert R.effective_k(32, 5000, 128) == 32


def test_get_threshold_and_filter(rng):
    x = rng.standard_normal((800, 10))
    bad = np.arange(80)
    x[bad, :2] += 6.0
    fp = R.get_threshold(x, 0.1, 4, 4.0, strict=False)
    scores = R.filter_scores(x, fp)
    m = R.threshold_rank(0.1, 800)
    assert np.sum(scores >= fp.threshold) == m
    kept = R.filter_clients(x, fp)
    assert len(kept) == 800 - m
    assert not np.isin(bad, kept).any()
    assert fp.k == 4 and fp.dim == 10


def test_filter_keeps_strictly_below_threshold(rng):
    x = rng.standard_normal((400, 3))
    fp = R.get_threshold(x, 0.1, 3, 4.0, strict=False)
    s = R.filter_scores(x, fp)
    kept = R.filter_clients(x, fp)
    assert np.all(s[kept] < fp.threshold)
    assert np.all(s[np.setdiff1d(np.arange(400), kept)] >= fp.threshold)


def test_get_threshold_errors(rng):
    with pytest.raises(R.InsufficientSamples):
        R.get_threshold(rng.standard_normal((100, 10)), 0.1, 32)
    with pytest.raises(R.DegenerateInput):
        R.get_threshold(np.ones((400, 3)), 0.1, 2, strict=False)
    fp = R.get_threshold(rng.standard_normal((400, 3)), 0.1, 2, strict=False)
    with pytest.raises(NumericsError):
        R.filter_scores(np.zeros((4, 5)), fp)


def test_filter_params_roundtrip(rng):
    fp = R.get_threshold(rng.standard_normal((400, 6)), 0.1, 3, strict=False)
    back = R.FilterParams.from_vector(*fp.to_vector())
    np.testing.assert_array_equal(back.cov, fp.cov)
    np.testing.assert_array_equal(back.mean, fp.mean)
    np.testing.assert_array_equal(back.basis, fp.basis)
    assert back.threshold == fp.threshold
    with pytest.raises(R.RobustError):
        R.FilterParams(fp.cov, fp.mean, 0.0, fp.basis)

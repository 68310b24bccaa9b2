import math

from hypothesis import given, settings, strategies as st
import numpy as np
import pytest

from shadowfl import verification as V


@settings(max_examples=20)
@given(st.integers(0, 10_000), st.sampled_from([0.05, 0.1, 0.2, 0.3]))
def test_poison_fraction_in_binomial_band(seed, alpha):
    spec = V.planted(4, 2000, alpha, 5.0, seed=seed)
    _, poison = V.sample_huber(spec)
    band = 3 * math.sqrt(alpha * (1 - alpha) / 2000)
    assert abs(poison.size / 2000 - alpha) <= band


@settings(max_examples=20)
@given(st.integers(0, 10_000))
def test_clean_mean_concentrates(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((6, 6))
    sigma = a @ a.T + np.eye(6)
    mu = rng.standard_normal(6)
    spec = V.HuberSpec(6, 2000, 0.1, mu, sigma, mu + 10.0, 0.1 * np.eye(6), seed)
    x, poison = V.sample_huber(spec)
    clean = np.setdiff1d(np.arange(2000), poison)
    err = np.linalg.norm(x[clean].mean(axis=0) - mu)
    assert err <= 4 * math.sqrt(np.trace(sigma) / clean.size)


def test_alpha_zero_is_all_clean():
    x, poison = V.sample_huber(V.planted(3, 500, 0.0, 4.0))
    assert poison.size == 0 and x.shape == (500, 3)


def test_sampling_is_deterministic():
    a = V.sample_huber(V.planted(3, 100, 0.2, 4.0, seed=3))
    b = V.sample_huber(V.planted(3, 100, 0.2, 4.0, seed=3))
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_huber_spec_validation():
    eye = np.eye(3)
    with pytest.raises(V.VerificationError, match="xi"):
        V.HuberSpec(3, 10, 0.1, np.zeros(3), eye, np.ones(3), 2 * eye)
    with pytest.raises(V.VerificationError, match="alpha"):
        V.HuberSpec(3, 10, 0.5, np.zeros(3), eye, np.ones(3), 0.5 * eye)
    with pytest.raises(V.VerificationError, match="length"):
        V.HuberSpec(3, 10, 0.1, np.zeros(2), eye, np.ones(3), 0.5 * eye)
    with pytest.raises(V.VerificationError, match="positive definite"):
        V.HuberSpec(3, 10, 0.1, np.zeros(3), np.zeros((3, 3)), np.ones(3), 0.5 * eye)
    spec = V.HuberSpec(3, 10, 0.1, np.zeros(3), 4 * eye, np.array([2.0, 0, 0]), eye)
    assert spec.xi == pytest.approx(0.25)
    assert spec.rho == pytest.approx(1.0)


def test_no_separation_is_only_logged():
    res = V.verify_filter_reduction(V.planted(8, 400, 0.1, 0.0), k=4, trials=2)
    assert res.passed is None and res.status == "LOGGED"
    assert not res.summary["hypothesis_met"]
    assert len(res.rows) == 2


def test_alignment_degenerate_grid_is_flagged():
    res = V.verify_alignment(d=8, n=400, alpha=0.0, norms=(4.0, 8.0))
    assert res.passed is None
    assert all(r["skipped"] for r in res.rows)


def test_whitening_delta_matches_construction():
    spec, delta = V.whitening_instance()
    assert delta == pytest.approx(10.0 / (15.0 ** 2 * math.log(10.0)))
    assert spec.sigma_c[0, 0] == pytest.approx(100.0 * delta)
    with pytest.raises(V.VerificationError):
        V.whitening_instance(a=1000.0, c=1.0)


def test_clusterable_config_bounds():
    with pytest.raises(V.VerificationError, match="1 / \\(4"):
        V.ClusterableConfig(alpha=0.07, L=5)
    with pytest.raises(V.VerificationError):
        V.ClusterableConfig(taus=(5, 3))
    assert V.ClusterableConfig().target_label == 4


def test_clean_clusterable_run_converges():
    cfg = V.ClusterableConfig(alpha=0.0, n=200, n_test=200, hidden=100, taus=(10, 100, 300), mc_draws=2000)
    res = V.verify_early_stop_clusterable(cfg)
    assert res.passed, res.rows


def test_ntk_lambda_is_positive_for_separated_centers():
    centers = np.eye(4)
    lam = V.ntk_lambda(centers, 4000)
    # C C' = I zeroes the off-diagonal, leaving P(g_i > 0) = 1/2 on the diagonal
    assert lam == pytest.approx(0.5, abs=0.03)
    skew = np.vstack([np.eye(4)[:3], np.eye(4)[0] + 1e-3])
    assert V.ntk_lambda(skew, 4000) < 1e-3


def test_check_result_csv_format():
    res = V.CheckResult("demo", False, [{"a": 1, "b": 0.5}, {"a": 2, "c": True}], {"z": 1.25, "y": "q"})
    lines = res.to_csv().splitlines()
    assert lines[0] == "a,b,c"
    assert lines[1] == "1,0.5,"
    assert lines[2] == "2,,1"
    assert lines[-1] == "#summary,demo,FAIL,y=q;z=1.25"


def test_hygiene_components():
    assert V.weiszfeld_grid_gap() <= 5e-3
    res = V.verify_numerical_hygiene()
    assert res.passed, res.rows


def test_quick_suite_writes_reports(tmp_path, monkeypatch):
    calls = []

    def fake(name):
        def run():
            calls.append(name)
            return V.CheckResult(name, name != "b", [{"x": 1}])
        return run

    monkeypatch.setattr(V, "suite", lambda quick=False: [(n, fake(n)) for n in ("a", "b")])
    out = V.run_suite(tmp_path)
    assert calls == ["a", "b"] and [r.status for r in out] == ["PASS", "FAIL"]
    assert (tmp_path / "summary.csv").read_text().splitlines()[1:] == ["a,PASS,0.00", "b,FAIL,0.00"]
    assert (tmp_path / "b.csv").read_text().endswith("#summary,b,FAIL,\n")


def test_quick_suite_drops_federated_checks():
    names = [n for n, _ in V.suite(quick=True)]
    assert "leakage" not in names and "label_detection" not in names
    assert {"filter_reduction", "alignment", "que_limit", "numerical_hygiene"} <= set(names)
    assert len(V.suite(quick=False)) == len(names) + 4

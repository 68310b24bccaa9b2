"""Acceptance criteria 1-10, each reported as one PASS/FAIL line.

The federated criteria train full desk-scale runs (500 clients, 300 rounds)
and take most of the suite's wall time; runs shared between criteria are
cached for the session.
"""

import time

import pytest

from shadowfl import verification as V


@pytest.fixture(scope="module")
def runs():
    return V.RunCache()


def report(log, n, name, ok, detail, seconds=None):
    extra = f" [{seconds:.0f}s]" if seconds is not None else ""
    line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'} {name}: {detail}{extra}"
    log.append(line)
    print(line)
    assert ok, line


def test_c01_backdoor_leakage(runs, acceptance_log):
    t0 = time.perf_counter()
    res = V.verify_leakage(alpha=0.15, rounds=300, defenses=("none", "norm_clip"), cache=runs)
    secs = time.perf_counter() - t0
    detail = ", ".join(f"{r['defense']} asr={r['final_asr']:.3f}" for r in res.rows)
    report(acceptance_log, 1, "leakage", res.passed and secs <= 20 * 60, detail, secs)


def test_c02_shadow_efficacy(runs, acceptance_log):
    t0 = time.perf_counter()
    res = V.verify_shadow_efficacy(alphas=(0.15, 0.25), rounds=300, cache=runs)
    secs = time.perf_counter() - t0
    detail = "; ".join(f"alpha={r['alpha']} asr={r['shadow_asr']:.3f} mta_gap={r['mta_gap']:+.4f}"
                       for r in res.rows)
    report(acceptance_log, 2, "shadow efficacy", res.passed and secs <= 2 * 30 * 60, detail, secs)


def test_c03_early_stop_crossover(acceptance_log):
    res = V.verify_early_stop_crossover(low=0.03, high=0.25)
    lo, hi = res.rows
    detail = (f"alpha=0.03 stop@{lo['early_stop_round']} asr<={lo['max_asr_window']:.3f} over next 10 rounds; "
              f"alpha=0.25 asr>0.5@{hi['first_asr_above']} stop@{hi['early_stop_round']}")
    report(acceptance_log, 3, "early-stop crossover", res.passed, detail, res.seconds)


def test_c04_filter_reduction(acceptance_log):
    res = V.verify_filter_reduction(V.planted(64, 2000, 0.1, 8.0), trials=10, max_fraction=0.025, min_passing=9)
    worst = max(r["post_fraction"] for r in res.rows)
    detail = f"{res.summary['passing_trials']}/10 trials <= 0.025 (worst {worst:.4f})"
    report(acceptance_log, 4, "filter reduction", res.passed is True and res.seconds <= 120, detail, res.seconds)


def test_c05_alignment(acceptance_log):
    res = V.verify_alignment(d=64, n=2000, alpha=0.1, norms=(4.0, 8.0, 16.0))
    detail = "sin2 " + " > ".join(f"{r['sin2']:.2e}" for r in res.rows)
    report(acceptance_log, 5, "alignment", res.passed is True and res.seconds <= 60, detail, res.seconds)


def test_c06_whitening_counterexample(acceptance_log):
    res = V.whitening_counterexample()
    post = {r["method"]: r["post_fraction"] for r in res.rows}
    detail = (f"pre={res.summary['pre_fraction']:.3f} naive_pca={post['naive_pca']:.3f} "
              f"nonrobust={post['nonrobust_whitening']:.3f} full={post['full_filter']:.3f}")
    report(acceptance_log, 6, "whitening counterexample", res.passed and res.seconds <= 60, detail, res.seconds)


def test_c07_que_limit(acceptance_log):
    res = V.verify_que_limit(beta=100.0, tol=0.02)
    report(acceptance_log, 7, "QUE large-beta limit", res.passed,
           f"max relative error {res.summary['max_relative_error']:.2e}")


def test_c08_robust_covariance(acceptance_log):
    res = V.verify_robust_covariance(trials=10)
    worst_r = max(r["robust_error"] for r in res.rows)
    best_n = min(r["naive_error"] for r in res.rows)
    report(acceptance_log, 8, "robust covariance", res.passed,
           f"robust error <= {worst_r:.3f}, naive error >= {best_n:.3f}", res.seconds)


def test_c09_label_detection(acceptance_log):
    res = V.verify_label_detection(trials=10, candidates=(0, 1, 2, 3, 4), target=1, R=50, kappa=0.2)
    picked = " ".join(str(r["selected"]) for r in res.rows)
    report(acceptance_log, 9, "unknown-label detection", res.passed,
           f"{res.summary['hits']}/10 hits, selections {picked}", res.seconds)


def test_c10_numerical_hygiene(acceptance_log):
    res = V.verify_numerical_hygiene(determinism_fn=V.simulation_determinism)
    detail = ", ".join(f"{r['item']}={r['value']:.2g}" for r in res.rows)
    report(acceptance_log, 10, "numerical hygiene", res.passed and res.seconds <= 120, detail, res.seconds)

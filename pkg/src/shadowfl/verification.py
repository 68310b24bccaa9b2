"""Empirical checks of the filtering and early-stopping guarantees.

Each check returns a :class:`CheckResult` holding trial-level rows and a
pass flag (``None`` when the hypothesis of a check is not met and the run is
only logged). ``run_suite`` executes all of them and writes one CSV each.

Ground truth flows one way: poison identities come from
:func:`sample_huber` and are never read back from the robust module.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
import io as _io
import math
from pathlib import Path
import time
from typing import Callable, Sequence

import numpy as np

from . import data as D
from . import defenses as F
from . import nn
from .io import atomic_write_text
from .numerics import sym_eig
from .robust import effective_k, filter_clients, get_threshold, que_score, threshold_rank


class VerificationError(ValueError):
    pass


@dataclass
class CheckResult:
    name: str
    passed: bool | None
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def status(self) -> str:
        return {True: "PASS", False: "FAIL", None: "LOGGED"}[self.passed]

    def to_csv(self) -> str:
        buf = _io.StringIO()
        cols: list = []
        for row in self.rows:
            cols += [c for c in row if c not in cols]
        w = csv.writer(buf, lineterminator="\n")
        if cols:
            w.writerow(cols)
            for row in self.rows:
                w.writerow([_fmt(row.get(c, "")) for c in cols])
        detail = ";".join(f"{k}={_fmt(v)}" for k, v in sorted(self.summary.items()))
        w.writerow(["#summary", self.name, self.status, detail])
        return buf.getvalue()


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return "nan" if not math.isfinite(v) else f"{float(v):.6g}"
    if isinstance(v, (list, tuple)):
        return " ".join(str(_fmt(x)) for x in v)
    return v


def _trial_seed(seed: int, trial: int) -> int:
    return int(np.random.SeedSequence([seed, 4_242, trial]).generate_state(1)[0])


def _sqrt_psd(s: np.ndarray) -> np.ndarray:
    eig = sym_eig(s)
    v = eig.eigenvectors
    return (v * np.sqrt(np.maximum(eig.eigenvalues, 0.0))) @ v.T


def _inv_sqrt_pd(s: np.ndarray) -> np.ndarray:
    eig = sym_eig(s)
    if eig.eigenvalues[-1] <= 0:
        raise VerificationError("clean covariance must be positive definite")
    v = eig.eigenvectors
    return (v / np.sqrt(eig.eigenvalues)) @ v.T


# -- contamination model ------------------------------------------------------------

@dataclass(frozen=True)
class HuberSpec:
    """Mixture ``(1 - alpha) N(mu_c, sigma_c) + alpha N(mu_p, sigma_p)``."""

    d: int
    n: int
    alpha: float
    mu_c: np.ndarray
    sigma_c: np.ndarray
    mu_p: np.ndarray
    sigma_p: np.ndarray
    seed: int = 0

    def __post_init__(self):
        for name in ("mu_c", "mu_p"):
            v = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            if v.shape != (self.d,):
                raise VerificationError(f"{name} must have length d={self.d}")
            object.__setattr__(self, name, v)
        for name in ("sigma_c", "sigma_p"):
            m = np.asarray(getattr(self, name), dtype=np.float64)
            if m.shape != (self.d, self.d):
                raise VerificationError(f"{name} must be {self.d}x{self.d}")
            object.__setattr__(self, name, m)
        if self.n < 1 or self.d < 1:
            raise VerificationError("d and n must be positive")
        if not 0.0 <= self.alpha < 0.5:
            raise VerificationError("alpha must lie in [0, 0.5)")
        if self.xi >= 1.0:
            raise VerificationError(f"poison covariance too large relative to clean: xi={self.xi:.3g} >= 1")

    @property
    def whitener(self) -> np.ndarray:
        return _inv_sqrt_pd(self.sigma_c)

    @property
    def xi(self) -> float:
        w = self.whitener
        return float(np.max(np.abs(sym_eig(w @ self.sigma_p @ w).eigenvalues)))

    @property
    def delta(self) -> np.ndarray:
        return self.mu_p - self.mu_c

    @property
    def delta_white(self) -> np.ndarray:
        return self.whitener @ self.delta

    @property
    def rho(self) -> float:
        return float(np.linalg.norm(self.delta_white))


def planted(d: int, n: int, alpha: float, rho: float, sigma_p_scale: float = 0.5, seed: int = 0) -> HuberSpec:
    """Identity clean covariance with the poison mean planted at ``rho * e_1``."""
    mu_p = np.zeros(d)
    mu_p[0] = rho
    return HuberSpec(d, n, alpha, np.zeros(d), np.eye(d), mu_p, sigma_p_scale * np.eye(d), seed)


def sample_huber(spec: HuberSpec) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` points; returns them with the sorted indices of the poisoned ones."""
    rng = np.random.default_rng([spec.seed, 1])
    poisoned = rng.random(spec.n) < spec.alpha
    z = rng.standard_normal((spec.n, spec.d))
    x = spec.mu_c + z @ _sqrt_psd(spec.sigma_c)
    if poisoned.any():
        zp = rng.standard_normal((int(poisoned.sum()), spec.d))
        x[poisoned] = spec.mu_p + zp @ _sqrt_psd(spec.sigma_p)
    return x, np.flatnonzero(poisoned)


def _poison_fraction(kept: np.ndarray, poison: np.ndarray) -> float:
    if kept.size == 0:
        return math.nan
    return float(np.isin(kept, poison).sum() / kept.size)


# -- filtering guarantees -----------------------------------------------------------------

def verify_filter_reduction(spec: HuberSpec, k: int = 32, beta: float = 4.0, trials: int = 10,
                            c: float = 1.0, max_fraction: float = 0.025, min_passing: int = 9) -> CheckResult:
    """Post-filter poison fraction over seeded trials of the full filter."""
    t0 = time.perf_counter()
    rows = []
    for t in range(trials):
        s = replace(spec, seed=_trial_seed(spec.seed, t))
        x, poison = sample_huber(s)
        kk = effective_k(k, s.n, s.d)
        params = get_threshold(x, s.alpha, kk, beta)
        kept = filter_clients(x, params, beta)
        post = _poison_fraction(kept, poison)
        survive = float(np.isin(poison, kept).mean()) if poison.size else math.nan
        rows.append({"trial": t, "seed": s.seed, "rho": s.rho, "pre_fraction": poison.size / s.n,
                     "post_fraction": post, "survival": survive, "kept": int(kept.size),
                     "ok": bool(post <= max_fraction)})
    hypothesis = spec.alpha > 0 and spec.rho >= c * math.sqrt(math.log(1.0 / spec.alpha) + spec.xi)
    n_ok = sum(r["ok"] for r in rows)
    passed = (n_ok >= min_passing) if hypothesis else None
    summary = {"trials": trials, "passing_trials": n_ok, "max_fraction": max_fraction,
               "hypothesis_met": hypothesis, "rho": spec.rho, "xi": spec.xi}
    return CheckResult("filter_reduction", passed, rows, summary, time.perf_counter() - t0)


def reduction_grid(d: int = 64, n: int = 2000, alpha: float = 0.1, rhos: Sequence[float] = (2.0, 4.0, 8.0),
                   sigma_p_scale: float = 0.5, trials: int = 5, k: int = 32, beta: float = 4.0,
                   seed: int = 0) -> CheckResult:
    """Poison survival of the filter must not grow as the separation increases."""
    t0 = time.perf_counter()
    rows = []
    for rho in rhos:
        res = verify_filter_reduction(planted(d, n, alpha, rho, sigma_p_scale, seed), k, beta, trials, c=0.0)
        post = [r["post_fraction"] for r in res.rows]
        surv = [r["survival"] for r in res.rows]
        rows.append({"rho": rho, "mean_post_fraction": float(np.nanmean(post)),
                     "mean_survival": float(np.nanmean(surv))})
    surv = [r["mean_survival"] for r in rows]
    monotone = all(b <= a + 1e-12 for a, b in zip(surv, surv[1:]))
    return CheckResult("reduction_grid", monotone, rows, {"monotone": monotone}, time.perf_counter() - t0)


def verify_alignment(d: int = 64, n: int = 2000, alpha: float = 0.1, norms: Sequence[float] = (4.0, 8.0, 16.0),
                     sigma_p_scale: float = 0.0, seed: int = 0, bound: float = 0.05) -> CheckResult:
    """Angle between the top eigenvector of whitened data and the whitened mean shift.

    Whitening uses the true clean covariance so the check is independent of
    the robust estimator. The same seed is reused across norms.
    """
    t0 = time.perf_counter()
    rows = []
    for r in norms:
        spec = planted(d, n, alpha, r, sigma_p_scale, seed)
        dt = spec.delta_white
        if spec.alpha == 0 or np.linalg.norm(dt) == 0:
            rows.append({"norm": r, "sin2": math.nan, "skipped": "no planted direction"})
            continue
        x, _ = sample_huber(spec)
        h = (x - spec.mu_c) @ spec.whitener
        h = h - h.mean(axis=0)
        v = sym_eig(h.T @ h / n).eigenvectors[:, 0]
        cos = float(v @ dt / np.linalg.norm(dt))
        shape = (math.log(1.0 / alpha) + spec.xi) ** 2 / np.linalg.norm(dt) ** 4
        rows.append({"norm": r, "sin2": 1.0 - cos ** 2, "rate_shape": shape, "skipped": ""})
    vals = [row["sin2"] for row in rows if math.isfinite(row["sin2"])]
    if len(vals) < 2:
        return CheckResult("alignment", None, rows, {"reason": "degenerate grid"}, time.perf_counter() - t0)
    decreasing = all(b < a for a, b in zip(vals, vals[1:]))
    final_ok = vals[-1] <= bound
    summary = {"strictly_decreasing": decreasing, "final_sin2": vals[-1], "bound": bound}
    return CheckResult("alignment", decreasing and final_ok, rows, summary, time.perf_counter() - t0)


def _drop_top(scores: np.ndarray, alpha: float) -> np.ndarray:
    # keep scores strictly below the m-th largest, matching the filter rule
    m = threshold_rank(alpha, len(scores))
    t = np.sort(scores)[::-1][m - 1]
    return np.flatnonzero(scores < t)


def whitening_instance(d: int = 10, n: int = 2000, alpha: float = 0.1, sigma2: float = 100.0, a: float = 10.0,
                c: float = 15.0, seed: int = 0) -> tuple[HuberSpec, float]:
    """Clean covariance squeezed along ``e_1`` by ``delta``, poisons at ``a e_1``."""
    delta = a / (c ** 2 * math.log(1.0 / alpha))
    if not 0.0 < delta < 1.0:
        raise VerificationError(f"construction needs 0 < delta < 1, got {delta:.3g}")
    u = np.zeros(d)
    u[0] = 1.0
    sigma_c = sigma2 * (np.eye(d) - (1.0 - delta) * np.outer(u, u))
    return HuberSpec(d, n, alpha, np.zeros(d), sigma_c, a * u, np.zeros((d, d)), seed), delta


def whitening_counterexample(d: int = 10, n: int = 2000, alpha: float = 0.1, sigma2: float = 100.0, a: float = 10.0,
                      c: float = 15.0, k: int = 32, beta: float = 4.0, seed: int = 0) -> CheckResult:
    """Compare naive PCA, non-robust whitening and the full filter on one instance."""
    t0 = time.perf_counter()
    spec, delta = whitening_instance(d, n, alpha, sigma2, a, c, seed)
    x, poison = sample_huber(spec)
    pre = poison.size / n
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / n

    v = sym_eig(cov).eigenvectors[:, 0]
    naive = _drop_top((xc @ v) ** 2, alpha)
    white = xc @ _inv_sqrt_pd(cov)
    nonrobust = _drop_top(que_score(white, beta).scores, alpha)
    params = get_threshold(x, alpha, effective_k(k, n, d), beta)
    full = filter_clients(x, params, beta)

    rows = []
    for name, kept in (("naive_pca", naive), ("nonrobust_whitening", nonrobust), ("full_filter", full)):
        rows.append({"method": name, "pre_fraction": pre, "post_fraction": _poison_fraction(kept, poison),
                     "kept": int(kept.size)})
    post = {r["method"]: r["post_fraction"] for r in rows}
    ok = post["naive_pca"] >= pre and post["full_filter"] < alpha / 2
    summary = {"delta": delta, "rho": spec.rho, "pre_fraction": pre}
    return CheckResult("whitening_counterexample", ok, rows, summary, time.perf_counter() - t0)


def que_limit_fixture(n: int = 500, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng([seed, 77])
    return rng.standard_normal((n, 5)) * np.sqrt([4.0, 2.0, 1.0, 1.0, 0.5])


def verify_que_limit(points: np.ndarray | None = None, beta: float = 100.0, tol: float = 0.02) -> CheckResult:
    """At large beta, scores become squared projections on the top eigenvector."""
    t0 = time.perf_counter()
    h = que_limit_fixture() if points is None else np.asarray(points, dtype=np.float64)
    scores = que_score(h, beta).scores
    v = sym_eig(h.T @ h / len(h)).eigenvectors[:, 0]
    proj = (h @ v) ** 2
    r_s = scores / scores.mean()
    r_p = proj / proj.mean()
    mask = r_p > 1e-3
    err = np.abs(r_s[mask] - r_p[mask]) / r_p[mask]
    rows = [{"i": int(i), "score_ratio": r_s[i], "projection_ratio": r_p[i]} for i in np.flatnonzero(mask)[:50]]
    worst = float(err.max())
    return CheckResult("que_limit", worst <= tol, rows, {"max_relative_error": worst, "beta": beta},
                       time.perf_counter() - t0)


def verify_robust_covariance(d: int = 10, n: int = 2000, alpha: float = 0.1, trials: int = 5, seed: int = 0,
                             robust_bound: float = 0.5, naive_bound: float = 2.0) -> CheckResult:
    """Whitened Frobenius error of robust versus naive covariance on contaminated draws.

    Poisons are a wide cloud ``N(3 * 1, 64 I)``, deliberately outside the
    ``xi < 1`` regime of :class:`HuberSpec`, so they are drawn here directly.
    """
    from .robust import robust_est

    t0 = time.perf_counter()
    rows = []
    for t in range(trials):
        rng = np.random.default_rng([seed, 55, t])
        a = rng.standard_normal((d, d))
        sigma_c = a @ a.T / d + np.eye(d)
        w = _sqrt_psd(sigma_c)
        x = rng.standard_normal((n, d)) @ w
        poison = np.flatnonzero(rng.random(n) < alpha)
        x[poison] = 3.0 + 8.0 * rng.standard_normal((poison.size, d))
        est = robust_est(x, alpha)
        err_r = _whitened_error(est.cov, w)
        err_n = _whitened_error(np.cov(x, rowvar=False, bias=True), w)
        rows.append({"trial": t, "robust_error": err_r, "naive_error": err_n,
                     "ok": bool(err_r <= robust_bound and err_n > naive_bound)})
    ok = all(r["ok"] for r in rows)
    return CheckResult("robust_covariance", ok, rows, {"robust_bound": robust_bound, "naive_bound": naive_bound},
                       time.perf_counter() - t0)


def _whitened_error(est_cov: np.ndarray, clean_sqrt: np.ndarray) -> float:
    w = _inv_sqrt_pd(est_cov)
    m = w @ clean_sqrt @ clean_sqrt @ w
    return float(np.linalg.norm(m - np.eye(len(m)), "fro"))


# -- early stopping on clusterable data -------------------------------------------------

@dataclass(frozen=True)
class ClusterableConfig:
    M: int = 10
    L: int = 5
    alpha: float = 0.05
    dim: int = 20
    n: int = 500
    n_test: int = 1000
    noise_radius: float = 0.1
    trigger_norm: float = 0.1
    hidden: int = 400
    lr: float = 2.0
    taus: tuple = tuple(sorted({int(round(t)) for t in np.logspace(0.0, 3.5, 22)}))
    target: int = -1
    mc_draws: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.alpha > 1.0 / (4 * (self.L - 1)):
            raise VerificationError("alpha exceeds 1 / (4 (L - 1))")
        if list(self.taus) != sorted(set(self.taus)) or self.taus[0] < 1:
            raise VerificationError("taus must be positive and strictly increasing")

    @property
    def target_label(self) -> int:
        return self.L - 1 if self.target < 0 else self.target


def _ball_points(centers, which, radius, rng):
    dirs = rng.standard_normal((len(which), centers.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return centers[which] + dirs * (radius * rng.random(len(which)))[:, None]


def ntk_lambda(centers: np.ndarray, draws: int = 10_000, seed: int = 0) -> float:
    """Monte-Carlo smallest eigenvalue of ``C C' * E[phi'(Cg) phi'(Cg)']`` for ReLU."""
    rng = np.random.default_rng([seed, 31])
    g = rng.standard_normal((centers.shape[1], draws))
    act = (centers @ g > 0).astype(np.float64)
    gram = (centers @ centers.T) * (act @ act.T / draws)
    return float(sym_eig(gram).eigenvalues[-1])


def verify_early_stop_clusterable(cfg: ClusterableConfig = ClusterableConfig(), min_rate: float = 0.95) -> CheckResult:
    """Full-batch gradient descent on poisoned clusterable data, sampled along ``cfg.taus``.

    Poisons are an ``alpha`` fraction of every non-target cluster, shifted by a
    fixed trigger inside the noise radius and relabelled to the target.
    """
    t0 = time.perf_counter()
    cd = D.gen_clusterable(cfg.M, cfg.n, cfg.dim, cfg.noise_radius, cfg.trigger_norm, [cfg.seed, 1], cfg.L)
    rng = np.random.default_rng([cfg.seed, 2])
    trigger = rng.standard_normal(cfg.dim)
    trigger *= cfg.trigger_norm / np.linalg.norm(trigger)
    tgt = cfg.target_label
    x, y = cd.dataset.inputs.copy(), cd.dataset.labels.copy()
    poison = []
    for c in range(cfg.M):
        if cd.cluster_label[c] == tgt:
            continue
        idx = np.flatnonzero(cd.cluster_of == c)
        poison += rng.choice(idx, int(round(cfg.alpha * idx.size)), replace=False).tolist()
    poison = np.sort(np.array(poison, dtype=int))
    x[poison] += trigger
    y[poison] = tgt

    which = np.repeat(np.arange(cfg.M), cfg.n_test // cfg.M)
    xt = _ball_points(cd.centers, which, cfg.noise_radius, rng)
    yt = cd.cluster_label[which]
    off = yt != tgt
    xtrig = xt[off] + trigger

    lam = ntk_lambda(cd.centers, cfg.mc_draws, cfg.seed)
    c_norm = float(np.linalg.norm(cd.centers, 2))
    spec = nn.ModelSpec("two_layer_fixed_head", (cfg.dim, cfg.hidden), cfg.L)
    w = nn.init_params(spec, [cfg.seed, 3])
    batch = nn.Batch(x, y)
    rows = []
    step = 0
    for tau in cfg.taus:
        while step < tau:
            _, g = nn.loss_grad(w, spec, batch)
            w = w - cfg.lr * g
            step += 1
        clean = float(np.mean(nn.predict(w, spec, xt) == yt))
        ptrig = nn.predict(w, spec, xtrig)
        rows.append({"tau": tau, "clean_rate": clean, "triggered_clean_rate": float(np.mean(ptrig == yt[off])),
                     "triggered_target_rate": float(np.mean(ptrig == tgt))})
    good = [r for r in rows if r["clean_rate"] >= min_rate and r["triggered_clean_rate"] >= min_rate]
    best = good[0]["tau"] if good else None
    summary = {"lambda": lam, "tau_scale": c_norm ** 2 / lam if lam > 0 else math.inf, "best_tau": best,
               "n_poison": int(poison.size)}
    if cfg.alpha == 0:
        ok = rows[-1]["clean_rate"] >= 0.99
    else:
        last = rows[-1]
        summary["leakage"] = bool(good) and last["triggered_target_rate"] > good[0]["triggered_target_rate"]
        ok = bool(good)
    return CheckResult("early_stop_clusterable", ok, rows, summary, time.perf_counter() - t0)


# -- numerical hygiene -------------------------------------------------------------------

def gradient_check(spec: nn.ModelSpec, seed: int = 0, n: int = 6, n_coords: int = 40, h: float = 1e-6) -> float:
    """Worst relative error between analytic and central-difference gradients."""
    rng = np.random.default_rng([seed, 9])
    w = nn.init_params(spec, [seed, 10]) * 0.5
    x = rng.random((n, spec.input_dim))
    y = rng.integers(0, spec.n_classes, n)
    batch = nn.Batch(x, y)
    _, g = nn.loss_grad(w, spec, batch)
    idx = rng.choice(spec.n_params, min(n_coords, spec.n_params), replace=False)
    worst = 0.0
    for i in idx:
        e = np.zeros_like(w)
        e[i] = h
        num = (nn.loss_grad(w + e, spec, batch)[0] - nn.loss_grad(w - e, spec, batch)[0]) / (2 * h)
        denom = max(abs(num), abs(g[i]), 1e-7)
        worst = max(worst, abs(num - g[i]) / denom)
    return worst


def weiszfeld_grid_gap(seed: int = 0, n: int = 9, iterations: int = 200, grid: int = 401) -> float:
    """Distance between the Weiszfeld point and a brute-force grid minimiser in 2-D."""
    rng = np.random.default_rng([seed, 12])
    pts = rng.standard_normal((n, 2))
    z = F.geometric_median(pts, iterations)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    gx, gy = np.meshgrid(np.linspace(lo[0], hi[0], grid), np.linspace(lo[1], hi[1], grid))
    cand = np.column_stack([gx.ravel(), gy.ravel()])
    obj = np.linalg.norm(cand[:, None, :] - pts[None], axis=-1).sum(axis=1)
    return float(np.linalg.norm(cand[np.argmin(obj)] - z))


def krum_bruteforce(updates: np.ndarray, f: int, m: int) -> np.ndarray:
    n = len(updates)
    scores = []
    for i in range(n):
        d = sorted(float(np.sum((updates[i] - updates[j]) ** 2)) for j in range(n) if j != i)
        scores.append(sum(d[: n - f - 2]))
    order = sorted(range(n), key=lambda i: (scores[i], i))
    return np.array(sorted(order[:m]))


def verify_numerical_hygiene(seed: int = 0, determinism_fn: Callable[[], bool] | None = None) -> CheckResult:
    t0 = time.perf_counter()
    rows = []
    specs = {
        "mlp": nn.mlp_spec(12, 4, (7, 5)),
        "conv_small": nn.ModelSpec("conv_small", (144, 6, 3), 3, image_shape=(12, 12, 1), dropout=0.0),
        "two_layer": nn.ModelSpec("two_layer_fixed_head", (6, 8), 3, activation="smooth_relu"),
    }
    for name, spec in specs.items():
        err = gradient_check(spec, seed)
        rows.append({"item": f"gradient_{name}", "value": err, "ok": err <= 1e-4})
    gap = weiszfeld_grid_gap(seed)
    rows.append({"item": "weiszfeld_vs_grid", "value": gap, "ok": gap <= 5e-3})
    rng = np.random.default_rng([seed, 13])
    u = rng.standard_normal((15, 6))
    u[:3] += 4.0
    same = np.array_equal(F.multi_krum(u, 3, 7), krum_bruteforce(u, 3, 7))
    rows.append({"item": "multi_krum_bruteforce", "value": float(same), "ok": same})
    if determinism_fn is not None:
        det = bool(determinism_fn())
        rows.append({"item": "determinism", "value": float(det), "ok": det})
    ok = all(r["ok"] for r in rows)
    return CheckResult("numerical_hygiene", ok, rows, {}, time.perf_counter() - t0)


# -- federated runs -------------------------------------------------------------------------

def _simulation():
    # late import: the simulator pulls in every other module
    from . import simulator
    return simulator


def desk_config(**overrides):
    sim = _simulation()
    return sim.ExperimentConfig(**overrides).validate()


def simulation_determinism(rounds: int = 3) -> bool:
    """Two identical small runs must give byte-identical round CSVs."""
    sim = _simulation()
    cfg = desk_config(n_clients=40, shard_size=50, clients_per_round=10, n_test=200, rounds=rounds,
                      defense="shadow", alpha=0.2)
    out = [sim.records_csv(sim.run_experiment(cfg).records) for _ in range(2)]
    return out[0] == out[1]


class RunCache:
    """Memoises experiment runs by config digest within one suite."""

    def __init__(self):
        self.runs: dict = {}

    def get(self, cfg):
        key = cfg.digest()
        if key not in self.runs:
            self.runs[key] = _simulation().run_experiment(cfg)
        return self.runs[key]


def verify_leakage(alpha: float = 0.15, rounds: int = 300, seed: int = 0, min_asr: float = 0.9,
                   defenses: Sequence[str] = ("none", "norm_clip"), cache: RunCache | None = None) -> CheckResult:
    t0 = time.perf_counter()
    cache = cache or RunCache()
    rows = []
    for name in defenses:
        res = cache.get(desk_config(defense=name, alpha=alpha, rounds=rounds, seed=seed))
        s = res.summary
        rows.append({"defense": name, "final_asr": s["final_asr"], "final_mta": s["final_mta"],
                     "ok": s["final_asr"] >= min_asr})
    return CheckResult("leakage", all(r["ok"] for r in rows), rows, {"rounds": rounds, "alpha": alpha},
                       time.perf_counter() - t0)


def verify_shadow_efficacy(alphas: Sequence[float] = (0.15, 0.25), rounds: int = 300, seed: int = 0,
                           max_asr: float = 0.10, mta_gap: float = 0.02, cache: RunCache | None = None) -> CheckResult:
    t0 = time.perf_counter()
    cache = cache or RunCache()
    rows = []
    for a in alphas:
        base = cache.get(desk_config(defense="none", alpha=a, rounds=rounds, seed=seed)).summary
        sh = cache.get(desk_config(defense="shadow", alpha=a, rounds=rounds, seed=seed)).summary
        gap = base["final_mta"] - sh["final_mta"]
        rows.append({"alpha": a, "shadow_asr": sh["final_asr"], "shadow_mta": sh["final_mta"],
                     "none_asr": base["final_asr"], "none_mta": base["final_mta"], "mta_gap": gap,
                     "ok": sh["final_asr"] <= max_asr and abs(gap) <= mta_gap})
    return CheckResult("shadow_efficacy", all(r["ok"] for r in rows), rows, {"rounds": rounds},
                       time.perf_counter() - t0)


def _first_round(records, pred) -> int | None:
    for rec in records:
        if math.isfinite(rec.mta) and pred(rec):
            return rec.round
    return None


def verify_early_stop_crossover(low: float = 0.03, high: float = 0.25, max_rounds: int = 80, seed: int = 0,
                                mta_level: float = 0.95, low_asr: float = 0.05, high_asr: float = 0.5,
                                window: int = 10) -> CheckResult:
    """Early stopping helps at small alpha and fails at large alpha.

    The early-stop point is the first round whose MTA reaches ``mta_level``.
    At small alpha the ASR must stay below ``low_asr`` from that point over
    the next ``window`` rounds. Rounds before it are only logged, since a
    barely trained model already hits the target at roughly chance rate.
    """
    t0 = time.perf_counter()
    sim_mod = _simulation()
    rows = []
    for a in (low, high):
        sim = sim_mod.Simulation(desk_config(defense="none", alpha=a, rounds=max_rounds + window, seed=seed))
        stop = None
        while True:
            if stop is None and sim.round >= max_rounds:
                break
            if stop is not None and (a == high or sim.round > stop + window):
                break
            rec = sim.run_round()
            if stop is None and rec.mta >= mta_level:
                stop = rec.round
        recs = sim.records
        after = [r.asr for r in recs[stop:stop + window + 1]] if stop is not None else [math.nan]
        rows.append({"alpha": a, "early_stop_round": stop if stop is not None else -1,
                     "mta_at_stop": recs[stop].mta if stop is not None else math.nan,
                     "asr_at_stop": after[0], "max_asr_window": max(after),
                     "max_asr_before_stop": max(r.asr for r in recs[:stop]) if stop else math.nan,
                     "first_asr_above": _first_round(recs, lambda r: r.asr > high_asr) or -1})
    lo, hi = rows
    ok_low = lo["early_stop_round"] >= 0 and lo["max_asr_window"] <= low_asr
    ok_high = 0 <= hi["first_asr_above"] < (hi["early_stop_round"] if hi["early_stop_round"] >= 0 else math.inf)
    return CheckResult("early_stop_crossover", ok_low and ok_high, rows,
                       {"low_ok": ok_low, "high_ok": ok_high, "window": window}, time.perf_counter() - t0)


def verify_label_detection(trials: int = 10, candidates: Sequence[int] = (0, 1, 2, 3, 4), target: int = 1,
                           R: int = 50, kappa: float = 0.2, alpha: float = 0.15, max_rounds: int = 400,
                           min_hits: int = 9, seed: int = 0, n_clients: int = 500) -> CheckResult:
    """The planted target must be among the selected labels in most trials."""
    t0 = time.perf_counter()
    sim_mod = _simulation()
    rows = []
    for t in range(trials):
        cfg = desk_config(defense="shadow", candidate_labels=tuple(candidates), target_label=target, R=R,
                          kappa=kappa, alpha=alpha, rounds=max_rounds, seed=seed + t, n_clients=n_clients,
                          eval_every=max_rounds)
        sim = sim_mod.Simulation(cfg)
        while sim.round < max_rounds and not sim.ensemble.selected:
            sim.run_round()
        sel = tuple(sim.ensemble.selected)
        ratios = sim.ensemble.mean_ratios()
        rows.append({"trial": t, "seed": cfg.seed, "rounds": sim.round, "selected": list(sel),
                     "hit": target in sel, **{f"ratio_{y}": ratios[y] for y in sorted(ratios)}})
    hits = sum(r["hit"] for r in rows)
    return CheckResult("label_detection", hits >= min_hits, rows, {"hits": hits, "trials": trials},
                       time.perf_counter() - t0)


QUICK_TAUS = tuple(t for t in ClusterableConfig().taus if t <= 400)


# -- suite -------------------------------------------------------------------------------

def suite(quick: bool = False) -> list:
    """(name, thunk) pairs; quick mode drops the federated runs and shrinks trial counts."""
    cache = RunCache()
    trials = 3 if quick else 10
    checks = [
        ("filter_reduction", lambda: verify_filter_reduction(planted(64, 2000, 0.1, 8.0), trials=trials,
                                                             min_passing=trials - trials // 10)),
        ("reduction_grid", lambda: reduction_grid(trials=2 if quick else 5)),
        ("alignment", verify_alignment),
        ("whitening_counterexample", whitening_counterexample),
        ("que_limit", verify_que_limit),
        ("robust_covariance", lambda: verify_robust_covariance(trials=3 if quick else 10)),
        ("early_stop_clusterable", lambda: verify_early_stop_clusterable(
            ClusterableConfig(taus=QUICK_TAUS) if quick else ClusterableConfig())),
        ("early_stop_clusterable_clean", lambda: _renamed(verify_early_stop_clusterable(
            ClusterableConfig(alpha=0.0, taus=QUICK_TAUS)), "early_stop_clusterable_clean")),
        ("numerical_hygiene", lambda: verify_numerical_hygiene(
            determinism_fn=None if quick else simulation_determinism)),
    ]
    if not quick:
        checks += [
            ("leakage", lambda: verify_leakage(cache=cache)),
            ("shadow_efficacy", lambda: verify_shadow_efficacy(cache=cache)),
            ("early_stop_crossover", verify_early_stop_crossover),
            ("label_detection", verify_label_detection),
        ]
    return checks


def _renamed(res: CheckResult, name: str) -> CheckResult:
    res.name = name
    return res


def run_suite(out_dir, quick: bool = False, progress: Callable[[CheckResult], None] | None = None) -> list:
    """Run every check, writing ``<name>.csv`` plus ``summary.csv`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for name, thunk in suite(quick):
        res = thunk()
        atomic_write_text(out / f"{name}.csv", res.to_csv())
        results.append(res)
        if progress:
            progress(res)
    lines = ["check,status,seconds"] + [f"{r.name},{r.status},{r.seconds:.2f}" for r in results]
    atomic_write_text(out / "summary.csv", "\n".join(lines) + "\n")
    return results

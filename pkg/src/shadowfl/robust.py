"""Robust mean/covariance estimation and quantum-entropy (QUE) filtering."""

from __future__ import annotations

from dataclasses import dataclass
import math
import warnings

import numpy as np
from scipy import stats

from .numerics import (
    EIGEN_FLOOR,
    NumericsError,
    RankDeficientWarning,
    inv_sqrt_psd,
    mat_exp_sym,
    sym_eig,
    top_k_svd,
)

DEFAULT_K = 32
DEFAULT_BETA = 4.0
TRIM_CONSTANT = 1.5
MAD_SCALE = 1.4826
REWEIGHT_QUANTILE = 0.99


class RobustError(ValueError):
    pass


class DegenerateInput(RobustError):
    pass


class InsufficientSamples(RobustError):
    pass


@dataclass(frozen=True)
class FilterParams:
    cov: np.ndarray
    mean: np.ndarray
    threshold: float
    basis: np.ndarray
    center: np.ndarray | None = None

    def __post_init__(self):
        if not self.threshold > 0:
            raise RobustError("QUE threshold must be positive")

    @property
    def k(self) -> int:
        return self.basis.shape[1]

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    def whitener(self) -> np.ndarray:
        return inv_sqrt_psd(self.cov)

    def to_vector(self) -> tuple[dict, np.ndarray]:
        header = {"kind": "filter_params", "d": self.dim, "k": self.k, "threshold": self.threshold}
        vec = np.concatenate([self.cov.ravel(), self.mean.ravel(), self.basis.ravel()])
        return header, vec

    @classmethod
    def from_vector(cls, header: dict, vec: np.ndarray) -> "FilterParams":
        d, k = header["d"], header["k"]
        cov = vec[: k * k].reshape(k, k)
        mean = vec[k * k: k * k + k]
        basis = vec[k * k + k:].reshape(d, k)
        return cls(cov, mean, float(header["threshold"]), basis)


@dataclass(frozen=True)
class QueScores:
    scores: np.ndarray
    degenerate: bool = False


@dataclass(frozen=True)
class RobustEstimate:
    cov: np.ndarray
    mean: np.ndarray
    kept: np.ndarray
    iterations: int


def _stop_level(alpha_bar: float) -> float:
    return 1.0 + TRIM_CONSTANT * alpha_bar * math.log(1.0 / alpha_bar)


def _chi2_mean_over_median(k: int) -> float:
    # Wilson-Hilferty approximation of the chi-square median
    return k / (k * (1.0 - 2.0 / (9.0 * k)) ** 3)


@dataclass(frozen=True)
class _Inflation:
    ratio: np.ndarray
    radial: float
    proj_dev: np.ndarray
    radial_norm: np.ndarray

    @property
    def axis(self) -> int:
        return int(np.argmax(self.ratio))

    def worst(self) -> float:
        return max(float(self.ratio[self.axis]), self.radial)


def _inflation(cur: np.ndarray, radial_ref: float) -> _Inflation:
    k = cur.shape[1]
    mu = cur.mean(axis=0)
    cov = np.cov(cur, rowvar=False, bias=True).reshape(k, k)
    eig = sym_eig(cov)
    if int(np.sum(eig.eigenvalues < EIGEN_FLOOR)) > k / 2:
        raise DegenerateInput("covariance collapses in more than half of the directions")
    proj = (cur - mu) @ eig.eigenvectors
    dev = np.abs(proj - np.median(proj, axis=0))
    mad_var = (MAD_SCALE * np.median(dev, axis=0)) ** 2
    ratio = eig.eigenvalues / np.maximum(mad_var, EIGEN_FLOOR)
    q = np.sum(proj ** 2 / np.maximum(eig.eigenvalues, EIGEN_FLOOR), axis=1)
    radial = float(np.mean(q) / max(np.median(q), EIGEN_FLOOR)) / radial_ref
    return _Inflation(ratio, radial, dev, q)


def robust_est(points: np.ndarray, alpha_bar: float, max_iter: int = 10,
               strict: bool = True, reweight: bool = True) -> RobustEstimate:
    """Robust covariance and mean by iterative spectral trimming.

    Each pass compares, along every principal axis of the current set, the
    sample variance with a median-absolute-deviation variance. A second,
    radial check compares the mean and the median of squared whitened norms
    against their Gaussian ratio. When the larger inflation exceeds
    ``1 + 1.5 * alpha_bar * log(1 / alpha_bar)`` the ``ceil(alpha_bar n / 4)``
    points deviating most along the worst axis are dropped, or, when no axis
    is inflated, those with the largest whitened norm.
    At most ``2 * alpha_bar * n`` points are removed in total.

    The trimmed moments are then refined by one reweighting pass that keeps
    the points inside the 0.99 chi-square quantile of their Mahalanobis
    distance. The refinement is discarded if the reweighted set fails the
    axis test again, which happens when moderately separated poisons are
    readmitted (``reweight=False`` skips it entirely).
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise RobustError("points must be an (n, k) array")
    n, k = x.shape
    if not 0.0 < alpha_bar < 0.5:
        raise RobustError("alpha_bar must lie in (0, 0.5)")
    if strict and n < 20 * k:
        raise InsufficientSamples(f"need n >= 20k = {20 * k}, got {n}")
    if n < k + 2:
        raise InsufficientSamples("fewer points than dimensions")
    step = max(1, math.ceil(alpha_bar * n / 4.0))
    budget = int(math.floor(2.0 * alpha_bar * n))
    level = _stop_level(alpha_bar)
    radial_ref = _chi2_mean_over_median(k)

    keep = np.ones(n, dtype=bool)
    removed = 0
    it = 0
    for it in range(1, max_iter + 1):
        inf = _inflation(x[keep], radial_ref)
        axis = inf.axis
        if inf.worst() <= level or removed >= budget:
            break
        # an inflated axis is trimmed first; radial trimming only handles diffuse
        # contamination, since concentrated poisons can sit at small whitened norm
        score = inf.proj_dev[:, axis] if inf.ratio[axis] > level else inf.radial_norm
        m = min(step, budget - removed)
        # stable sort: ties resolved toward lower original index
        drop_local = np.argsort(-score, kind="stable")[:m]
        idx = np.flatnonzero(keep)
        keep[idx[drop_local]] = False
        removed += m
    cur = x[keep]
    mu = cur.mean(axis=0)
    cov = np.cov(cur, rowvar=False, bias=True).reshape(k, k)
    if reweight:
        mu2, cov2, keep2 = _reweight(x, mu, cov, keep)
        if keep2 is not keep:
            ratio = _inflation(x[keep2], radial_ref).ratio
            if float(ratio.max()) <= level:
                mu, cov, keep = mu2, cov2, keep2
    return RobustEstimate(cov, mu, np.flatnonzero(keep), it)


def _reweight(x, mu, cov, keep, quantile=REWEIGHT_QUANTILE):
    # one hard-rejection step at a chi-square quantile, with the Gaussian
    # consistency factor for the truncated second moment
    k = x.shape[1]
    w = inv_sqrt_psd(cov)
    dist = np.sum(((x - mu) @ w) ** 2, axis=1)
    cut = stats.chi2.ppf(quantile, k)
    new_keep = dist <= cut
    if new_keep.sum() < max(k + 2, keep.sum() // 2):
        return mu, cov, keep
    cur = x[new_keep]
    mu2 = cur.mean(axis=0)
    factor = quantile / stats.chi2.cdf(cut, k + 2)
    cov2 = np.cov(cur, rowvar=False, bias=True).reshape(k, k) * factor
    return mu2, cov2, new_keep


def que_score(points: np.ndarray, beta: float = DEFAULT_BETA) -> QueScores:
    """Quantum-entropy outlier scores of whitened points.

    With ``S`` the second moment of the points, scores are
    ``h' Q h / tr Q`` for ``Q = exp(beta (S - I) / (||S|| - 1))``. When
    ``||S|| <= 1 + 1e-6`` the exponent is undefined and ``Q = I`` is used.
    """
    h = np.asarray(points, dtype=np.float64)
    if h.ndim != 2 or len(h) < 2:
        raise RobustError("que_score needs at least two points")
    if beta < 0:
        raise RobustError("beta must be nonnegative")
    n, k = h.shape
    second = h.T @ h / n
    eig = sym_eig(second)
    top = eig.eigenvalues[0]
    degenerate = top <= 1.0 + 1e-6
    if degenerate or beta == 0:
        q = np.eye(k)
    else:
        expo = beta * (second - np.eye(k)) / (top - 1.0)
        # scores are invariant to rescaling Q, so shift the spectrum to avoid overflow
        q = mat_exp_sym(expo - beta * np.eye(k))
    scores = np.einsum("ij,jk,ik->i", h, q, h) / np.trace(q)
    return QueScores(np.maximum(scores, 0.0), bool(degenerate))


def threshold_rank(alpha_bar: float, n: int) -> int:
    """Rank m such that the threshold is the m-th largest score."""
    m = math.ceil(1.5 * alpha_bar * n - 1e-9)
    return min(max(m, 1), n)


def effective_k(k: int, n: int, d: int) -> int:
    """Largest projection dimension the robust estimator supports for n points."""
    return max(1, min(k, d, n // 20))


def _whiten(points, basis, center, cov, mean):
    reduced = (points - center) @ basis if center is not None else points @ basis
    return (reduced - mean) @ inv_sqrt_psd(cov)


def get_threshold(representations: np.ndarray, alpha_bar: float, k: int = DEFAULT_K,
                  beta: float = DEFAULT_BETA, strict: bool = True) -> FilterParams:
    """Learn filter parameters: PCA basis, robust moments and QUE threshold."""
    h = np.asarray(representations, dtype=np.float64)
    n, d = h.shape
    need = max(20 * k, math.ceil(1.0 / (1.5 * alpha_bar)))
    if strict and n < need:
        raise InsufficientSamples(f"need at least {need} representations, got {n}")
    if np.allclose(h, h[0]):
        raise DegenerateInput("all representations are identical")
    mu = h.mean(axis=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankDeficientWarning)
        basis, _ = top_k_svd(h - mu, k)
    reduced = h @ basis
    est = robust_est(reduced, alpha_bar, strict=strict)
    white = (reduced - est.mean) @ inv_sqrt_psd(est.cov)
    scores = que_score(white, beta).scores
    m = threshold_rank(alpha_bar, n)
    t = float(np.sort(scores)[::-1][m - 1])
    if not t > 0:
        raise DegenerateInput("QUE threshold is zero")
    return FilterParams(est.cov, est.mean, t, basis)


def filter_scores(representations: np.ndarray, params: FilterParams, beta: float = DEFAULT_BETA) -> np.ndarray:
    h = np.asarray(representations, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != params.dim:
        raise NumericsError(f"representation width {h.shape[-1]} != filter dimension {params.dim}")
    white = ((h @ params.basis) - params.mean) @ params.whitener()
    return que_score(white, beta).scores


def filter_clients(representations: np.ndarray, params: FilterParams, beta: float = DEFAULT_BETA) -> np.ndarray:
    """Indices of rows whose QUE score is strictly below the learned threshold."""
    scores = filter_scores(representations, params, beta)
    return np.flatnonzero(scores < params.threshold)

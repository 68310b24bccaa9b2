"""Baseline robust aggregators and update transforms.

Every aggregator takes a stacked ``(n, p)`` array of client updates and
returns a single ``p`` vector. Stateful pieces (FoolsGold history) live in
small objects owned by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

WEISZFELD_FLOOR = 1e-8


class DefenseError(ValueError):
    pass


class InsufficientClients(DefenseError):
    pass


def _stack(updates) -> np.ndarray:
    u = np.asarray(updates, dtype=np.float64)
    if u.ndim == 1:
        u = u[None, :]
    if u.ndim != 2 or len(u) == 0:
        raise InsufficientClients("need at least one update")
    if not np.all(np.isfinite(u)):
        raise DefenseError("updates contain NaN or Inf")
    return u


def mean_aggregate(updates) -> np.ndarray:
    return _stack(updates).mean(axis=0)


def weiszfeld_objective(point, updates) -> float:
    return float(np.sum(np.linalg.norm(_stack(updates) - point, axis=1)))


def geometric_median(updates, iterations: int = 4, floor: float = WEISZFELD_FLOOR) -> np.ndarray:
    """Weiszfeld iterations started from the coordinate-wise mean."""
    u = _stack(updates)
    z = u.mean(axis=0)
    for _ in range(iterations):
        dist = np.maximum(np.linalg.norm(u - z, axis=1), floor)
        w = 1.0 / dist
        z = (w @ u) / w.sum()
    return z


def krum_scores(updates, f: int) -> np.ndarray:
    u = _stack(updates)
    n = len(u)
    nb = n - f - 2
    if nb < 1:
        raise InsufficientClients(f"Multi-Krum needs n - f - 2 >= 1 (n={n}, f={f})")
    sq = np.sum(u ** 2, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (u @ u.T), 0.0)
    np.fill_diagonal(d2, np.inf)
    d2.sort(axis=1)
    return d2[:, :nb].sum(axis=1)


def multi_krum(updates, f: int, m: int) -> np.ndarray:
    """Indices of the ``m`` updates with the lowest Krum scores (ties to lower index)."""
    u = _stack(updates)
    if not 1 <= m <= len(u):
        raise InsufficientClients(f"cannot select m={m} of {len(u)} updates")
    scores = krum_scores(u, f)
    return np.sort(np.argsort(scores, kind="stable")[:m])


def multi_krum_aggregate(updates, f: int, m: int) -> np.ndarray:
    u = _stack(updates)
    return u[multi_krum(u, f, m)].mean(axis=0)


def clip_update(update, bound: float) -> np.ndarray:
    if bound <= 0:
        raise DefenseError("clip bound must be positive")
    u = np.asarray(update, dtype=np.float64)
    norm = float(np.linalg.norm(u))
    if norm <= bound:
        return u.copy()
    return u * (bound / norm)


def add_noise(update, variance: float, rng: np.random.Generator) -> np.ndarray:
    if variance < 0:
        raise DefenseError("noise variance must be nonnegative")
    u = np.asarray(update, dtype=np.float64)
    if variance == 0:
        return u.copy()
    return u + rng.normal(0.0, math.sqrt(variance), size=u.shape)


def crfl_train_transform(aggregate, bound: float, variance: float, rng) -> np.ndarray:
    return add_noise(clip_update(aggregate, bound), variance, rng)


def _cosine_matrix(h: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(h, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = h / safe[:, None]
    cs = unit @ unit.T
    cs[norms == 0, :] = 0.0
    cs[:, norms == 0] = 0.0
    return np.clip(cs, -1.0, 1.0)


def foolsgold_weights(histories, confidence: float = 1.0) -> np.ndarray:
    """Per-client learning-rate multipliers from accumulated update histories."""
    h = _stack(histories)
    n = len(h)
    if n < 2:
        return np.ones(n)
    cs = _cosine_matrix(h)
    np.fill_diagonal(cs, 0.0)
    cs_max = cs.max(axis=1)
    # pardoning: a client is not penalised for resembling one with higher similarity
    adj = cs.copy()
    for i in range(n):
        for j in range(n):
            if i != j and cs_max[i] < cs_max[j]:
                adj[i, j] = cs[i, j] * cs_max[i] / cs_max[j]
    wv = 1.0 - adj.max(axis=1)
    wv = np.clip(wv, 0.0, 1.0)
    top = wv.max()
    if top == 0:
        return np.zeros(n)
    wv = wv / top
    wv[wv == 1.0] = 0.99
    with np.errstate(divide="ignore"):
        wv = confidence * (np.log(wv / (1.0 - wv)) + 0.5)
    wv[np.isinf(wv) & (wv > 0)] = 1.0
    wv[np.isneginf(wv)] = 0.0
    return np.clip(wv, 0.0, 1.0)


@dataclass
class FoolsGoldHistory:
    """Running sum of each client's updates, keyed by client id."""

    dim: int
    sums: dict = field(default_factory=dict)

    def update(self, client_ids, updates) -> np.ndarray:
        u = _stack(updates)
        rows = []
        for cid, row in zip(client_ids, u):
            acc = self.sums.get(int(cid))
            acc = row.copy() if acc is None else acc + row
            self.sums[int(cid)] = acc
            rows.append(acc)
        return np.vstack(rows)


def foolsgold_aggregate(updates, histories, confidence: float = 1.0) -> np.ndarray:
    u = _stack(updates)
    w = foolsgold_weights(histories, confidence)
    if w.sum() == 0:
        return np.zeros(u.shape[1])
    return (w @ u) / len(u)


@dataclass(frozen=True)
class FlameResult:
    aggregate: np.ndarray
    kept: np.ndarray
    clip_norm: float
    variant: str = "FLAME-simplified"


def flame_aggregate(updates, lam: float = 0.001, rng=None) -> FlameResult:
    """Cosine filtering around the coordinate-wise median, median-norm clipping, noise.

    Clients whose cosine distance to the coordinate-wise median update is
    below ``median + MAD`` of all such distances are kept.
    """
    u = _stack(updates)
    if len(u) < 3:
        raise InsufficientClients("FLAME needs at least three updates")
    ref = np.median(u, axis=0)
    rn = np.linalg.norm(ref)
    norms = np.linalg.norm(u, axis=1)
    if rn == 0:
        cos = np.ones(len(u))
    else:
        cos = (u @ ref) / (np.where(norms > 0, norms, 1.0) * rn)
    dist = 1.0 - cos
    med = np.median(dist)
    mad = np.median(np.abs(dist - med))
    kept = np.flatnonzero(dist <= med + mad)
    clip = float(np.median(norms))
    rows = [u[i] * min(1.0, clip / norms[i]) if norms[i] > 0 else u[i] for i in kept]
    agg = np.mean(rows, axis=0)
    sigma = lam * clip
    if sigma > 0:
        if rng is None:
            raise DefenseError("FLAME noise requires an rng")
        agg = agg + rng.normal(0.0, sigma, size=agg.shape)
    return FlameResult(agg, kept, clip)


def label_rfa_aggregate(per_label_updates: dict, iterations: int = 4) -> np.ndarray:
    """Experimental: geometric median per label, then averaged across labels.

    ``per_label_updates`` maps a label to the stacked updates clients
    computed from that label's loss alone.
    """
    meds = [geometric_median(v, iterations) for _, v in sorted(per_label_updates.items()) if len(v)]
    if not meds:
        raise InsufficientClients("no per-label updates")
    return np.mean(meds, axis=0)


DEFENSES = (
    "none", "shadow", "rfa", "multi_krum", "norm_clip", "noise", "foolsgold",
    "flame", "crfl", "label_rfa", "g_spectre", "r_spectre",
)


@dataclass(frozen=True)
class DefenseConfig:
    kind: str = "none"
    rfa_iterations: int = 4
    krum_f: int | None = None
    krum_m: int = 20
    clip_norm: float = 3.0
    noise_variance: float = 0.03
    foolsgold_confidence: float = 1.0
    flame_lambda: float = 0.001

    def __post_init__(self):
        if self.kind not in DEFENSES:
            raise DefenseError(f"unknown defense {self.kind!r}")
        if self.rfa_iterations < 1 or self.krum_m < 1:
            raise DefenseError("iteration and selection counts must be positive")
        if self.clip_norm <= 0 or self.noise_variance < 0 or self.flame_lambda < 0:
            raise DefenseError("clip bound must be positive and noise levels nonnegative")

    def krum_f_for(self, alpha_bar: float, n_participants: int = 50) -> int:
        if self.krum_f is not None:
            return self.krum_f
        return int(round(n_participants * alpha_bar))

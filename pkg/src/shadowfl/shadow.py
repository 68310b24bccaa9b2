"""Backbone/shadow state machine for a known or unknown target label.

The state objects here hold no data. The simulator passes in per-client
accuracies and representations, plus callables that train the shadow model
on a chosen client subset, so every transition can be unit-tested with
synthetic numbers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math
from typing import Callable, Sequence

import numpy as np

from . import nn
from .robust import (
    DEFAULT_BETA,
    DEFAULT_K,
    FilterParams,
    RobustError,
    effective_k,
    filter_scores,
    get_threshold,
)

EPS1 = 0.02
EPS2 = 0.0005


class ShadowError(RuntimeError):
    pass


def trimmed_top_mean(values, alpha_bar: float) -> float:
    """Mean of the largest ``(1 - alpha_bar)`` fraction of the finite values."""
    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return math.nan
    m = max(1, math.ceil((1.0 - alpha_bar) * v.size - 1e-9))
    return float(np.sort(v)[::-1][:m].mean())


def _shadow_seed(seed: int, label: int, period: int) -> int:
    ss = np.random.SeedSequence([seed, 7_001, label, period])
    return int(ss.generate_state(1)[0])


@dataclass
class Transition:
    round: int
    a_n: float = math.nan
    a_shadow: float = math.nan
    retrain: bool = False
    converged_now: bool = False
    filter_learned_now: bool = False
    early_stopped_now: bool = False
    trained: bool = False
    filtered_count: int = 0
    que_ratio: float = math.nan
    empty_side: bool = False
    skipped: str = ""


@dataclass
class ShadowState:
    spec: nn.ModelSpec
    seed: int
    label: int
    alpha_bar: float
    eps1: float = EPS1
    eps2: float = EPS2
    k: int = DEFAULT_K
    beta: float = DEFAULT_BETA
    relearn_filter: bool = False
    converge: bool = False
    filter_learned: bool = False
    early_stop: bool = False
    period: int = 0
    a_n_history: list = field(default_factory=list)
    a_shadow_history: list = field(default_factory=list)
    filter: FilterParams | None = None
    params: np.ndarray | None = None
    shadow_rounds: int = 0
    early_stop_rounds: list = field(default_factory=list)

    def __post_init__(self):
        if self.params is None:
            self.params = self.fresh_params()

    def fresh_params(self) -> np.ndarray:
        return nn.init_params(self.spec, _shadow_seed(self.seed, self.label, self.period))

    def check(self):
        if self.filter_learned and not self.converge:
            raise ShadowError("filter_learned set while not converged")
        if self.early_stop and not self.filter_learned:
            raise ShadowError("early_stop set before the filter was learned")

    def _retrain(self):
        self.converge = False
        self.filter_learned = False
        self.early_stop = False
        self.filter = None
        self.period += 1
        self.params = self.fresh_params()
        self.a_shadow_history = []


def update_shadow_state(state: ShadowState, accuracies, round_index: int = 0) -> Transition:
    """Advance the retrain/converge flags from this round's backbone accuracies.

    ``accuracies`` holds one entry per participant, NaN for clients without
    target-label samples. The previous-round value at the very first round is 0.
    """
    acc = np.asarray(accuracies, dtype=np.float64)
    tr = Transition(round_index)
    finite = acc[np.isfinite(acc)]
    if finite.size == 0:
        tr.skipped = "no client reported target-label accuracy"
        return tr
    a_n = float(finite.mean())
    tr.a_n = a_n
    prev = state.a_n_history[-1] if state.a_n_history else 0.0
    diff = abs(a_n - prev)
    if state.converge and diff > state.eps1:
        state._retrain()
        state.a_n_history = []
        tr.retrain = True
    state.a_n_history.append(a_n)
    if not state.converge and diff < state.eps2:
        state.converge = True
        tr.converged_now = True
    state.check()
    return tr


TrainFn = Callable[[np.ndarray, np.ndarray], np.ndarray]
AccFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _que_ratio(scores: np.ndarray, threshold: float) -> tuple[float, bool]:
    above = scores[scores > threshold]
    below = scores[scores < threshold]
    if above.size == 0 or below.size == 0 or below.mean() <= 0:
        return 1.0, True
    return float(above.mean() / below.mean()), False


def shadow_round(state: ShadowState, tr: Transition, representations, train_fn: TrainFn,
                 acc_fn: AccFn) -> np.ndarray:
    """Filter clients and train the shadow model for one converged round.

    ``representations`` has one row per participant (NaN rows for clients
    without target samples, which are never kept). ``train_fn(params, kept)``
    returns new shadow params trained on the kept participants and
    ``acc_fn(params, kept)`` their target-label accuracies. Returns the kept
    participant indices.
    """
    if not state.converge:
        raise ShadowError("shadow_round requires a converged backbone")
    reps = np.asarray(representations, dtype=np.float64)
    valid = np.flatnonzero(np.all(np.isfinite(reps), axis=1))
    kept = np.array([], dtype=int)
    if valid.size < 2:
        tr.skipped = "fewer than two clients uploaded representations"
        return kept
    h = reps[valid]
    if not state.filter_learned or state.relearn_filter:
        try:
            kk = effective_k(state.k, len(h), h.shape[1])
            state.filter = get_threshold(h, state.alpha_bar, kk, state.beta, strict=False)
        except (RobustError, np.linalg.LinAlgError) as exc:
            tr.skipped = f"filter learning failed: {exc}"
            return kept
        if not state.filter_learned:
            state.filter_learned = True
            state.early_stop = False
            tr.filter_learned_now = True
    scores = filter_scores(h, state.filter, state.beta)
    tr.que_ratio, tr.empty_side = _que_ratio(scores, state.filter.threshold)
    kept = valid[scores < state.filter.threshold]
    tr.filtered_count = int(len(reps) - kept.size)
    state.shadow_rounds += 1
    if state.early_stop:
        return kept
    if kept.size == 0:
        tr.skipped = "filtered set empty"
        return kept
    state.params = train_fn(state.params, kept)
    tr.trained = True
    a_s = trimmed_top_mean(acc_fn(state.params, kept), state.alpha_bar)
    tr.a_shadow = a_s
    if math.isfinite(a_s):
        # a fresh shadow sits at near-zero target accuracy for a few rounds; that
        # flat start is not convergence, so a plateau only counts once accuracy
        # has risen more than eps1 above the period's first measurement
        prev = state.a_shadow_history[-1] if state.a_shadow_history else None
        state.a_shadow_history.append(a_s)
        learned = a_s - state.a_shadow_history[0] > state.eps1
        if prev is not None and learned and abs(a_s - prev) < state.eps2:
            state.early_stop = True
            tr.early_stopped_now = True
            state.early_stop_rounds.append(tr.round)
    state.check()
    return kept


def test_predict(backbone_params, spec: nn.ModelSpec, state: ShadowState | None, x) -> np.ndarray:
    """Backbone labels, with target-label predictions re-decided by the shadow model."""
    pred = np.atleast_1d(nn.predict(backbone_params, spec, x))
    if state is None or not state.filter_learned:
        return pred
    hit = pred == state.label
    if np.any(hit):
        xs = np.asarray(x)
        xs = xs if xs.ndim > 1 else xs[None, :]
        pred = pred.copy()
        pred[hit] = np.atleast_1d(nn.predict(state.params, spec, xs[hit]))
    return pred


@dataclass
class ShadowEnsemble:
    states: dict
    R: int = 50
    kappa: float = 0.2
    gamma_sum: dict = field(default_factory=dict)
    gamma_rounds: dict = field(default_factory=dict)
    selected: tuple = ()

    @classmethod
    def create(cls, candidates: Sequence[int], make_state: Callable[[int], ShadowState],
               R: int = 50, kappa: float = 0.2) -> "ShadowEnsemble":
        labels = sorted(set(int(y) for y in candidates))
        if not labels:
            raise ShadowError("candidate target set is empty")
        return cls({y: make_state(y) for y in labels}, R, kappa,
                   {y: 0.0 for y in labels}, {y: 0 for y in labels})

    @property
    def candidates(self) -> list:
        return sorted(self.states)

    @property
    def n_select(self) -> int:
        return math.ceil(self.kappa * len(self.states) - 1e-9)

    def active(self) -> list:
        return list(self.selected) if self.selected else self.candidates

    def mean_ratios(self) -> dict:
        return {y: self.gamma_sum[y] / max(1, self.gamma_rounds[y]) for y in self.candidates}

    def record(self, label: int, tr: Transition):
        if self.selected or not math.isfinite(tr.que_ratio):
            return
        if self.gamma_rounds[label] >= self.R:
            return
        self.gamma_sum[label] += tr.que_ratio
        self.gamma_rounds[label] += 1
        if all(self.gamma_rounds[y] >= self.R for y in self.candidates):
            self.selected = select_labels(self.mean_ratios(), self.n_select)


def select_labels(mean_ratio: dict, count: int) -> tuple:
    """Labels with the ``count`` largest mean QUE ratios; lower label wins ties."""
    order = sorted(mean_ratio, key=lambda y: (-mean_ratio[y], y))
    return tuple(sorted(order[:count]))


def ensemble_round(ensemble: ShadowEnsemble, round_index: int, accuracies: dict,
                   representations: dict, make_fns: Callable[[int], tuple]) -> dict:
    """Advance every active per-label shadow state one round.

    ``accuracies[y]`` and ``representations[y]`` are the per-participant
    backbone statistics for label ``y``; ``make_fns(y)`` returns the
    ``(train_fn, acc_fn)`` pair for that label. Returns label -> Transition.
    """
    out = {}
    for y in ensemble.active():
        st = ensemble.states[y]
        tr = update_shadow_state(st, accuracies[y], round_index)
        if st.converge:
            train_fn, acc_fn = make_fns(y)
            shadow_round(st, tr, representations[y], train_fn, acc_fn)
            ensemble.record(y, tr)
        out[y] = tr
    return out


def ensemble_predict(backbone_params, spec: nn.ModelSpec, ensemble: ShadowEnsemble, x) -> np.ndarray:
    pred = np.atleast_1d(nn.predict(backbone_params, spec, x))
    if not ensemble.selected:
        return pred
    xs = np.asarray(x)
    xs = xs if xs.ndim > 1 else xs[None, :]
    out = pred.copy()
    for y in ensemble.selected:
        st = ensemble.states[y]
        hit = pred == y
        if st.filter_learned and np.any(hit):
            out[hit] = np.atleast_1d(nn.predict(st.params, spec, xs[hit]))
    return out

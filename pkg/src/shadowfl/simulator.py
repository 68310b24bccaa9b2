"""Federated round engine: sampling, adversaries, local SGD, defenses, metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
import hashlib
import io as _io
import json
import math
from pathlib import Path
import time
from typing import Callable

import numpy as np

from . import data as D
from . import defenses as F
from . import nn
from . import shadow as S
from .io import atomic_write_text, save_filter, save_model
from .robust import RobustError, effective_k, filter_clients, get_threshold

CSV_HEADER = "round,phase,defense,alpha,mta,asr,filtered_count,converge,filter_learned,early_stop,seed"

# purpose tags for independent PRNG streams
_SAMPLE, _LOCAL, _SHADOW, _NOISE, _DEFENSE, _DRIFT, _UPLOAD, _LABEL_RFA, _INIT, _DATA, _SPLIT = range(1, 12)

ADVERSARIES = ("static_fraction", "adaptive_budget", "evasion")
REPRESENTATION_LEVELS = ("label", "user", "sample")


class SimulationError(RuntimeError):
    pass


class ConfigInvalid(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


class BudgetViolation(AssertionError):
    pass


class EmptyTestSet(ValueError):
    pass


def stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *[int(k) for k in keys]])


@dataclass(frozen=True)
class ExperimentConfig:
    # data
    dataset: str = "synthetic_digits"
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    n_test: int = 2000
    data_jitter: float = 0.6
    partition: str = "homogeneous"
    heterogeneity: float = 1.0
    n_clients: int = 500
    shard_size: int = 100
    clients_per_round: int = 50
    # adversary
    alpha: float = 0.15
    alpha_bar: float = -1.0
    adversary: str = "static_fraction"
    alpha_max: float = -1.0
    budget_window: int = 150
    window_offset: int = 0
    evasion_gamma: float = 0.5
    trigger: str = "pixel_square"
    trigger_size: int = 5
    trigger_fill: float = 1.0
    trigger_amplitude: float = 8.0 / 255.0
    trigger_frequency: float = 10.0
    trigger_pixels: int = 25
    source_label: int = 7
    target_label: int = 1
    backdoor_count: int = 10
    candidate_labels: tuple = ()
    upload_noise: float = 0.0
    # defense
    defense: str = "none"
    rfa_iterations: int = 4
    krum_f: int = -1
    krum_m: int = 20
    clip_norm: float = 3.0
    noise_variance: float = 0.03
    foolsgold_confidence: float = 1.0
    flame_lambda: float = 0.001
    # shadow learning
    eps1: float = S.EPS1
    eps2: float = S.EPS2
    k: int = 32
    beta: float = 4.0
    R: int = 50
    kappa: float = 0.2
    relearn_filter: bool = False
    representation_level: str = "label"
    # model and optimisation
    model: str = "mlp"
    hidden: int = 128
    lr: float = 0.1
    batch_size: int = 20
    local_iters: int = 2
    server_lr: float = 0.5
    rounds: int = 300
    eval_every: int = 1
    # distribution drift: listed labels take the keep fraction at each start round
    phase_starts: tuple = ()
    phase_keep: tuple = ()
    phase_labels: tuple = (2, 3, 4, 5)
    drift_malicious: bool = False
    seed: int = 0

    @property
    def effective_alpha_bar(self) -> float:
        return self.alpha if self.alpha_bar < 0 else self.alpha_bar

    @property
    def effective_alpha_max(self) -> float:
        return self.alpha if self.alpha_max < 0 else self.alpha_max

    def problems(self) -> list[str]:
        p = []
        if not 0.0 <= self.alpha < 0.5:
            p.append(f"alpha={self.alpha}: must satisfy 0 <= alpha < 0.5")
        if self.alpha_bar >= 0 and not 0.0 < self.alpha_bar < 0.5:
            p.append(f"alpha_bar={self.alpha_bar}: must lie in (0, 0.5)")
        if self.alpha_max >= 0 and not self.alpha <= self.alpha_max <= 1.0:
            p.append(f"alpha_max={self.alpha_max}: must lie in [alpha, 1]")
        if self.rounds < 1:
            p.append(f"rounds={self.rounds}: must be at least 1")
        if not 1 <= self.clients_per_round <= self.n_clients:
            p.append("clients_per_round must lie in [1, n_clients]")
        if self.dataset not in ("synthetic_digits", "idx"):
            p.append(f"dataset={self.dataset!r}: expected synthetic_digits or idx")
        if self.dataset == "idx" and not (self.train_images and self.train_labels and self.test_images and self.test_labels):
            p.append("dataset=idx needs train_images, train_labels, test_images, test_labels")
        if self.partition not in ("homogeneous", "h_heterogeneous", "by_writer"):
            p.append(f"partition={self.partition!r}: unknown mode")
        if not 0.0 <= self.heterogeneity <= 1.0:
            p.append("heterogeneity must lie in [0, 1]")
        if self.adversary not in ADVERSARIES:
            p.append(f"adversary={self.adversary!r}: expected one of {', '.join(ADVERSARIES)}")
        if self.adversary == "adaptive_budget" and self.budget_window % 5:
            p.append("budget_window must be a multiple of 5 for the adaptive adversary")
        if not 0.0 <= self.evasion_gamma <= 1.0:
            p.append("evasion_gamma must lie in [0, 1]")
        if self.trigger not in D.TRIGGER_KINDS:
            p.append(f"trigger={self.trigger!r}: expected one of {', '.join(D.TRIGGER_KINDS)}")
        if self.defense not in F.DEFENSES:
            p.append(f"defense={self.defense!r}: expected one of {', '.join(F.DEFENSES)}")
        if self.representation_level not in REPRESENTATION_LEVELS:
            p.append(f"representation_level={self.representation_level!r}: expected label, user or sample")
        if self.model not in ("mlp", "conv_small"):
            p.append(f"model={self.model!r}: expected mlp or conv_small")
        for name in ("lr", "server_lr", "clip_norm", "beta", "kappa", "hidden", "batch_size", "local_iters",
                     "k", "R", "eval_every", "shard_size", "rfa_iterations", "krum_m", "budget_window"):
            if getattr(self, name) <= 0:
                p.append(f"{name} must be positive")
        for name in ("noise_variance", "flame_lambda", "upload_noise", "eps1", "eps2", "backdoor_count",
                     "data_jitter"):
            if getattr(self, name) < 0:
                p.append(f"{name} must be nonnegative")
        if self.kappa > 1:
            p.append("kappa must be at most 1")
        if len(self.phase_starts) != len(self.phase_keep):
            p.append("phase_starts and phase_keep need the same length")
        if any(not 0.0 < f <= 1.0 for f in self.phase_keep):
            p.append("phase_keep fractions must lie in (0, 1]")
        if any(b <= a for a, b in zip(self.phase_starts, self.phase_starts[1:])) or any(s <= 0 for s in self.phase_starts):
            p.append("phase_starts must be positive and strictly increasing")
        labels = list(self.candidate_labels) + list(self.phase_labels) + [self.source_label, self.target_label]
        if any(not 0 <= y < 10 for y in labels):
            p.append("labels must lie in [0, 10)")
        if self.source_label == self.target_label:
            p.append("source_label and target_label must differ")
        return p

    def validate(self) -> "ExperimentConfig":
        p = self.problems()
        if p:
            raise ConfigInvalid(p)
        return self

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def phase_schedule(self) -> D.PhaseSchedule:
        phases = [(0, tuple([1.0] * 10))]
        for start, keep in zip(self.phase_starts, self.phase_keep):
            vec = [1.0] * 10
            for y in self.phase_labels:
                vec[y] = float(keep)
            phases.append((int(start), tuple(vec)))
        return D.PhaseSchedule(tuple(phases))

    def trigger_spec(self) -> D.TriggerSpec:
        return D.TriggerSpec(self.trigger, self.target_label, self.source_label, self.trigger_size,
                             n_pixels=self.trigger_pixels, amplitude=self.trigger_amplitude,
                             frequency=self.trigger_frequency, fill=self.trigger_fill)

    def defense_config(self) -> F.DefenseConfig:
        return F.DefenseConfig(self.defense, self.rfa_iterations, None if self.krum_f < 0 else self.krum_f,
                               self.krum_m, self.clip_norm, self.noise_variance, self.foolsgold_confidence,
                               self.flame_lambda)


@dataclass
class RoundRecord:
    round: int
    phase: int
    defense: str
    alpha: float
    mta: float
    asr: float
    filtered_count: int
    converge: bool
    filter_learned: bool
    early_stop: bool
    seed: int
    n_malicious: int = 0
    a_n: float = math.nan
    a_shadow: float = math.nan
    retrain: bool = False
    wall_time: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    def csv_row(self) -> str:
        def num(v):
            return "nan" if not math.isfinite(v) else f"{v:.6f}"
        return ",".join([
            str(self.round), str(self.phase), self.defense, f"{self.alpha:g}", num(self.mta), num(self.asr),
            str(self.filtered_count), str(int(self.converge)), str(int(self.filter_learned)),
            str(int(self.early_stop)), str(self.seed),
        ])


# -- adversary ----------------------------------------------------------------------

@dataclass(frozen=True)
class AdversaryModel:
    kind: str = "static_fraction"
    alpha: float = 0.15
    alpha_max: float | None = None
    r0: int = 150
    window_offset: int = 0
    gamma: float = 1.0

    @property
    def alpha_min(self) -> float:
        amax = self.alpha if self.alpha_max is None else self.alpha_max
        return max(0.0, 1.25 * self.alpha - 0.25 * amax)

    @property
    def window_length(self) -> int:
        return self.r0 // 5

    def in_window(self, round_index: int) -> bool:
        pos = round_index % self.r0 - self.window_offset
        return 0 <= pos < self.window_length

    @property
    def budget(self) -> float:
        return self.alpha * self.r0


def adversary_schedule(model: AdversaryModel, round_index: int, in_window: bool | None = None) -> float:
    """Fraction of participants the adversary corrupts in this round."""
    if model.kind != "adaptive_budget":
        return model.alpha
    if in_window is None:
        in_window = model.in_window(round_index)
    amax = model.alpha if model.alpha_max is None else model.alpha_max
    return amax if in_window else model.alpha_min


@dataclass
class BudgetLedger:
    """Integer corruption counts whose running sum tracks the planned fractions.

    Counts are cumulative round-half-up of ``fraction * n_C``, reset every
    ``r0`` rounds, so a block's total never exceeds ``alpha * n_C * r0``
    rounded to the nearest integer.
    """

    model: AdversaryModel
    n_participants: int
    block: int = -1
    planned: float = 0.0
    used: int = 0
    history: list = field(default_factory=list)

    def count(self, round_index: int, in_window: bool | None = None) -> int:
        blk = round_index // self.model.r0
        if blk != self.block:
            self.block, self.planned, self.used = blk, 0.0, 0
        frac = adversary_schedule(self.model, round_index, in_window)
        before = math.floor(self.planned + 0.5 + 1e-9)
        self.planned += frac * self.n_participants
        n = math.floor(self.planned + 0.5 + 1e-9) - before
        if self.model.kind == "adaptive_budget":
            cap = math.floor(self.model.budget * self.n_participants + 0.5 + 1e-9)
            n = max(0, min(n, cap - self.used))
        n = min(n, math.ceil(frac * self.n_participants - 1e-9))
        self.used += n
        if self.model.kind == "adaptive_budget" and self.used > self.model.budget * self.n_participants + 0.5:
            raise BudgetViolation(f"block {blk} used {self.used} corruptions")
        self.history.append(n)
        return n


# -- metrics ------------------------------------------------------------------------

def compute_mta(predict: Callable[[np.ndarray], np.ndarray], test: D.Dataset) -> float:
    if len(test) == 0:
        raise EmptyTestSet("clean test set is empty")
    return float(np.mean(predict(test.inputs) == test.labels))


def compute_asr(predict: Callable[[np.ndarray], np.ndarray], triggered: np.ndarray, target: int) -> float:
    x = np.asarray(triggered)
    if len(x) == 0:
        raise EmptyTestSet("backdoored test set is empty")
    return float(np.mean(predict(x) == target))


def evasion_local_loss(clean_loss: float, penalty: float, gamma: float) -> float:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    return gamma * clean_loss + (1.0 - gamma) * penalty


# -- world --------------------------------------------------------------------------

def _load_datasets(cfg: ExperimentConfig):
    if cfg.dataset == "idx":
        train = D.load_idx(cfg.train_images, cfg.train_labels, 10)
        test = D.load_idx(cfg.test_images, cfg.test_labels, 10)
        return train, test
    n_train = cfg.n_clients * cfg.shard_size
    n_writers = cfg.n_clients if cfg.partition == "by_writer" else None
    train = D.cached_synthetic_digits(n_train, cfg.seed, "train", n_writers, cfg.data_jitter)
    test = D.cached_synthetic_digits(cfg.n_test, cfg.seed, "test", None, cfg.data_jitter)
    return train, test


class Simulation:
    """Mutable world state for one experiment; ``run_round`` is the only writer."""

    def __init__(self, cfg: ExperimentConfig, datasets: tuple | None = None):
        self.cfg = cfg.validate()
        train, test = datasets if datasets is not None else _load_datasets(cfg)
        self.test = test
        self.trigger = cfg.trigger_spec()
        self.spec = (nn.mlp_spec(train.inputs.shape[1], 10, (cfg.hidden,)) if cfg.model == "mlp" else
                     nn.ModelSpec("conv_small", (train.inputs.shape[1], cfg.hidden, 10),
                                  10, image_shape=train.image_shape))
        self.params = nn.init_params(self.spec, [cfg.seed, _INIT])
        self.alpha_bar = cfg.effective_alpha_bar
        self.n_c = cfg.clients_per_round

        shards = D.partition(train, cfg.n_clients, cfg.partition, [cfg.seed, _SPLIT], cfg.shard_size,
                             cfg.heterogeneity)
        self.n_clients = len(shards)
        peak = max(cfg.alpha, cfg.effective_alpha_max if cfg.adversary == "adaptive_budget" else cfg.alpha)
        pool_size = min(self.n_clients, max(math.ceil(peak * self.n_c), round(peak * self.n_clients)))
        if cfg.alpha == 0:
            pool_size = 0
        prng = stream(cfg.seed, _SPLIT, 1)
        self.malicious_pool = np.sort(prng.choice(self.n_clients, pool_size, replace=False)) if pool_size else np.zeros(0, int)
        self.benign_ids = np.setdiff1d(np.arange(self.n_clients), self.malicious_pool)
        if pool_size and cfg.backdoor_count:
            shards = D.ensure_source_samples(shards, train, self.malicious_pool, cfg.source_label, cfg.backdoor_count)
        mal = set(self.malicious_pool.tolist())
        self.base_shards = [D.make_malicious_shard(s, self.trigger, cfg.backdoor_count) if s.client_id in mal else s
                            for s in shards]
        self.shards = list(self.base_shards)
        self.schedule = cfg.phase_schedule()
        self.phase = 0

        src = test.labels == cfg.source_label
        self.triggered_test = D.apply_trigger(test.inputs[src], self.trigger, test.image_shape)

        self.adversary = AdversaryModel(cfg.adversary, cfg.alpha, cfg.effective_alpha_max, cfg.budget_window,
                                        cfg.window_offset, cfg.evasion_gamma if cfg.adversary == "evasion" else 1.0)
        self.ledger = BudgetLedger(self.adversary, self.n_c)
        self.defense = cfg.defense_config()
        self.foolsgold = F.FoolsGoldHistory(self.spec.n_params)
        self.shadow_state: S.ShadowState | None = None
        self.ensemble: S.ShadowEnsemble | None = None
        self.deployed: dict = {}
        if cfg.defense == "shadow":
            if cfg.candidate_labels:
                self.ensemble = S.ShadowEnsemble.create(cfg.candidate_labels, self._make_state, cfg.R, cfg.kappa)
            else:
                self.shadow_state = self._make_state(cfg.target_label)
        self.records: list[RoundRecord] = []
        self.shadow_log: list[dict] = []
        self.round = 0

    # -- helpers ---------------------------------------------------------------------

    def _make_state(self, label: int) -> S.ShadowState:
        c = self.cfg
        return S.ShadowState(self.spec, c.seed, label, self.alpha_bar, c.eps1, c.eps2, c.k, c.beta, c.relearn_filter)

    def _drift(self, phase: int):
        keep = self.schedule.keep(phase, 10)
        out = []
        for base in self.base_shards:
            if base.malicious and not self.cfg.drift_malicious:
                out.append(base)
            else:
                out.append(D.apply_phase(base, keep, stream(self.cfg.seed, _DRIFT, phase, base.client_id)))
        self.shards = out
        self.phase = phase

    def _penalty_target(self, params, shard: D.ClientShard):
        y = shard.data.labels
        benign = np.ones(len(y), dtype=bool)
        benign[shard.backdoor] = False
        sel = benign & (y == self.cfg.target_label)
        if not np.any(sel):
            return None
        return nn.representations(params, self.spec, shard.data.inputs[sel]).mean(axis=0)

    def local_train(self, params, shard: D.ClientShard, rng, rows: np.ndarray | None = None) -> np.ndarray:
        """Run the configured local SGD steps and return the new parameters."""
        c = self.cfg
        x, y = shard.data.inputs, shard.data.labels
        is_bd = np.zeros(len(y), dtype=bool)
        is_bd[shard.backdoor] = True
        if rows is not None:
            x, y, is_bd = x[rows], y[rows], is_bd[rows]
        if len(y) == 0:
            return params
        target = None
        if shard.malicious and self.adversary.gamma < 1.0:
            target = self._penalty_target(params, shard)
        dropout = rng if self.spec.arch == "conv_small" else None
        w = params
        for _ in range(c.local_iters):
            idx = rng.choice(len(y), min(c.batch_size, len(y)), replace=False)
            pen = None
            if target is not None:
                pen = nn.RepresentationPenalty(self.adversary.gamma, is_bd[idx], target)
            _, g = nn.loss_grad(w, self.spec, nn.Batch(x[idx], y[idx]), rng=dropout, penalty=pen)
            w = nn.sgd_step(w, g, c.lr)
        return w

    def sample_clients(self, r: int, n_mal: int) -> np.ndarray:
        rng = stream(self.cfg.seed, r, 0, _SAMPLE)
        n_mal = min(n_mal, len(self.malicious_pool))
        mal = rng.choice(self.malicious_pool, n_mal, replace=False) if n_mal else np.zeros(0, int)
        ben = rng.choice(self.benign_ids, self.n_c - n_mal, replace=False)
        return np.sort(np.concatenate([mal, ben]).astype(np.int64))

    def _label_stats(self, params, clients, label: int, level: str = "label"):
        """Per-client target-label accuracy and uploaded representation rows."""
        acc = np.full(len(clients), np.nan)
        reps, owners = [], []
        d = self.spec.representation_dim
        for j, cid in enumerate(clients):
            data = self.shards[cid].data
            sel = data.labels == label
            if np.any(sel):
                logits, rep = nn.forward(params, self.spec, data.inputs[sel])
                acc[j] = float(np.mean(np.argmax(logits, axis=1) == label))
            if level == "user":
                rep = nn.representations(params, self.spec, data.inputs)
                reps.append(rep.mean(axis=0))
                owners.append((j, None))
            elif level == "sample":
                if np.any(sel):
                    rows = np.flatnonzero(sel)
                    for t, rr in zip(rows, rep):
                        reps.append(rr)
                        owners.append((j, int(t)))
            else:
                reps.append(rep.mean(axis=0) if np.any(sel) else np.full(d, np.nan))
                owners.append((j, None))
        h = np.vstack(reps) if reps else np.zeros((0, d))
        return acc, h, owners

    def _upload_noise(self, arr: np.ndarray, r: int, tag: int) -> np.ndarray:
        if self.cfg.upload_noise <= 0:
            return arr
        rng = stream(self.cfg.seed, r, tag, _UPLOAD)
        return arr + rng.normal(0.0, math.sqrt(self.cfg.upload_noise), arr.shape)

    # -- aggregation -----------------------------------------------------------------

    def aggregate(self, r: int, clients: np.ndarray, updates: np.ndarray, diag: dict) -> np.ndarray:
        kind = self.defense.kind
        rng = stream(self.cfg.seed, r, 0, _DEFENSE)
        if kind in ("none", "shadow"):
            return updates.mean(axis=0)
        if kind == "rfa":
            return F.geometric_median(updates, self.defense.rfa_iterations)
        if kind == "multi_krum":
            f = self.defense.krum_f_for(self.alpha_bar, len(updates))
            sel = F.multi_krum(updates, f, min(self.defense.krum_m, len(updates)))
            diag["selected"] = len(sel)
            diag["filtered"] = len(updates) - len(sel)
            return updates[sel].mean(axis=0)
        if kind == "norm_clip":
            return np.mean([F.clip_update(u, self.defense.clip_norm) for u in updates], axis=0)
        if kind == "noise":
            return np.mean([F.add_noise(u, self.defense.noise_variance, rng) for u in updates], axis=0)
        if kind == "foolsgold":
            hist = self.foolsgold.update(clients, updates)
            return F.foolsgold_aggregate(updates, hist, self.defense.foolsgold_confidence)
        if kind == "flame":
            res = F.flame_aggregate(updates, self.defense.flame_lambda, rng)
            diag["filtered"] = len(updates) - len(res.kept)
            diag["variant"] = res.variant
            return res.aggregate
        if kind == "crfl":
            return F.crfl_train_transform(updates.mean(axis=0), self.defense.clip_norm,
                                          self.defense.noise_variance, rng)
        if kind == "label_rfa":
            return self._label_rfa(r, clients)
        if kind in ("g_spectre", "r_spectre"):
            if kind == "g_spectre":
                h = updates
            else:
                _, h, _ = self._label_stats(self.params, clients, self.cfg.target_label)
                h = self._upload_noise(h, r, 1)
            ok = np.flatnonzero(np.all(np.isfinite(h), axis=1))
            try:
                kk = effective_k(self.cfg.k, len(ok), h.shape[1])
                fp = get_threshold(h[ok], self.alpha_bar, kk, self.cfg.beta, strict=False)
                kept = ok[filter_clients(h[ok], fp, self.cfg.beta)]
            except (RobustError, np.linalg.LinAlgError) as exc:
                diag["skipped"] = str(exc)
                kept = np.arange(len(updates))
            diag["filtered"] = len(updates) - len(kept)
            if len(kept) == 0:
                return np.zeros(updates.shape[1])
            return updates[kept].mean(axis=0)
        raise SimulationError(f"unhandled defense {kind!r}")

    def _label_rfa(self, r: int, clients) -> np.ndarray:
        # each client sends one gradient step per label it holds
        per_label: dict = {}
        for cid in clients:
            shard = self.shards[cid]
            rng = stream(self.cfg.seed, r, cid, _LABEL_RFA)
            for y in np.unique(shard.data.labels):
                pos = np.flatnonzero(shard.data.labels == y)
                pos = rng.choice(pos, min(self.cfg.batch_size, len(pos)), replace=False)
                _, g = nn.loss_grad(self.params, self.spec, nn.Batch(shard.data.inputs[pos], shard.data.labels[pos]))
                per_label.setdefault(int(y), []).append(-self.cfg.lr * self.cfg.local_iters * g)
        return F.label_rfa_aggregate({y: np.vstack(v) for y, v in per_label.items()}, self.defense.rfa_iterations)

    # -- shadow ---------------------------------------------------------------------

    def _shadow_fns(self, r: int, clients, owners, label: int):
        cfg = self.cfg

        def units_to_rows(kept):
            rows: dict = {}
            for u in kept:
                j, t = owners[u]
                rows.setdefault(j, []).append(t)
            return rows

        def train_fn(params, kept):
            deltas = []
            for j, ts in sorted(units_to_rows(kept).items()):
                cid = clients[j]
                shard = self.shards[cid]
                rows = None
                if cfg.representation_level == "sample":
                    # drop flagged target-label samples, keep everything else
                    sel = shard.data.labels == label
                    flagged = set(np.flatnonzero(sel).tolist()) - set(ts)
                    rows = np.array([i for i in range(len(shard)) if i not in flagged], dtype=np.int64)
                rng = stream(cfg.seed, r, cid, _SHADOW, label)
                deltas.append(self.local_train(params, shard, rng, rows) - params)
            return params + cfg.server_lr * np.mean(deltas, axis=0)

        def acc_fn(params, kept):
            out = []
            for j in sorted(units_to_rows(kept)):
                data = self.shards[clients[j]].data
                sel = data.labels == label
                out.append(float(np.mean(nn.predict(params, self.spec, data.inputs[sel]) == label))
                           if np.any(sel) else np.nan)
            return np.array(out)

        return train_fn, acc_fn

    def _advance_shadow(self, r: int, clients, rec: RoundRecord):
        level = self.cfg.representation_level
        if self.shadow_state is not None:
            st = self.shadow_state
            acc, h, owners = self._label_stats(self.params, clients, st.label, level)
            tr = S.update_shadow_state(st, acc, r)
            if st.converge:
                train_fn, acc_fn = self._shadow_fns(r, clients, owners, st.label)
                S.shadow_round(st, tr, self._upload_noise(h, r, 2), train_fn, acc_fn)
            if st.early_stop and tr.early_stopped_now:
                self.deployed[st.label] = st.params.copy()
            self._log_transition(st.label, tr, st)
            rec.filtered_count = tr.filtered_count
            rec.converge, rec.filter_learned, rec.early_stop = st.converge, st.filter_learned, st.early_stop
            rec.a_n, rec.a_shadow, rec.retrain = tr.a_n, tr.a_shadow, tr.retrain
            return
        ens = self.ensemble
        accs, reps, owners_by = {}, {}, {}
        for y in ens.active():
            acc, h, owners = self._label_stats(self.params, clients, y, level)
            accs[y], reps[y], owners_by[y] = acc, self._upload_noise(h, r, 10 + y), owners
        trs = S.ensemble_round(ens, r, accs, reps, lambda y: self._shadow_fns(r, clients, owners_by[y], y))
        for y, tr in trs.items():
            st = ens.states[y]
            if tr.early_stopped_now:
                self.deployed[y] = st.params.copy()
            self._log_transition(y, tr, st)
        act = [ens.states[y] for y in ens.active()]
        rec.filtered_count = int(sum(tr.filtered_count for tr in trs.values()))
        rec.converge = all(s.converge for s in act)
        rec.filter_learned = all(s.filter_learned for s in act)
        rec.early_stop = all(s.early_stop for s in act)
        rec.diagnostics["selected_labels"] = list(ens.selected)

    def _log_transition(self, label: int, tr: S.Transition, st: S.ShadowState):
        self.shadow_log.append({
            "round": tr.round, "label": label, "a_n": tr.a_n, "a_shadow": tr.a_shadow,
            "retrain": int(tr.retrain), "converge": int(st.converge), "filter_learned": int(st.filter_learned),
            "early_stop": int(st.early_stop), "filtered_count": tr.filtered_count,
            "que_ratio": tr.que_ratio, "skipped": tr.skipped,
        })

    # -- prediction ------------------------------------------------------------------

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Deployed prediction rule: backbone, re-routed through early-stopped shadows."""
        pred = nn.predict(self.params, self.spec, x)
        labels = ()
        if self.shadow_state is not None:
            labels = (self.shadow_state.label,)
        elif self.ensemble is not None:
            labels = self.ensemble.selected
        if not labels:
            return pred
        out = pred.copy()
        for y in labels:
            w = self.deployed.get(y)
            hit = pred == y
            if w is not None and np.any(hit):
                out[hit] = nn.predict(w, self.spec, x[hit])
        return out

    def backbone_predict(self, x: np.ndarray) -> np.ndarray:
        return nn.predict(self.params, self.spec, x)

    # -- the round -------------------------------------------------------------------

    def run_round(self) -> RoundRecord:
        t0 = time.perf_counter()
        cfg, r = self.cfg, self.round
        phase = self.schedule.phase_at(r)
        if phase != self.phase:
            self._drift(phase)
        n_mal = self.ledger.count(r) if len(self.malicious_pool) else 0
        clients = self.sample_clients(r, n_mal)
        updates = np.empty((len(clients), self.spec.n_params))
        for j, cid in enumerate(clients):
            rng = stream(cfg.seed, r, cid, _LOCAL)
            updates[j] = self.local_train(self.params, self.shards[cid], rng) - self.params
        updates = self._upload_noise(updates, r, 0)
        rec = RoundRecord(r, phase, cfg.defense, cfg.alpha, math.nan, math.nan, 0, False, False, False,
                          cfg.seed, n_malicious=int(n_mal))
        agg = self.aggregate(r, clients, updates, rec.diagnostics)
        rec.filtered_count = int(rec.diagnostics.get("filtered", 0))
        self.params = self.params + cfg.server_lr * agg
        if not np.all(np.isfinite(self.params)):
            raise SimulationError(f"global parameters diverged at round {r}")
        if cfg.defense == "shadow":
            self._advance_shadow(r, clients, rec)
        if (r + 1) % cfg.eval_every == 0 or r + 1 == cfg.rounds:
            rec.mta = compute_mta(self.predict, self.test)
            rec.asr = compute_asr(self.predict, self.triggered_test, cfg.target_label)
        rec.wall_time = time.perf_counter() - t0
        self.records.append(rec)
        self.round += 1
        return rec

    def run(self, rounds: int | None = None, progress: Callable[[RoundRecord], None] | None = None):
        total = self.cfg.rounds if rounds is None else rounds
        while self.round < total:
            rec = self.run_round()
            if progress:
                progress(rec)
        return self.records


# -- orchestration ------------------------------------------------------------------

@dataclass
class ExperimentResult:
    records: list
    summary: dict
    simulation: Simulation


def records_csv(records) -> str:
    buf = _io.StringIO()
    buf.write(CSV_HEADER + "\n")
    for rec in records:
        buf.write(rec.csv_row() + "\n")
    return buf.getvalue()


def shadow_log_csv(log) -> str:
    cols = ["round", "label", "a_n", "a_shadow", "retrain", "converge", "filter_learned", "early_stop",
            "filtered_count", "que_ratio", "skipped"]
    lines = [",".join(cols)]
    for row in log:
        vals = []
        for c in cols:
            v = row[c]
            if isinstance(v, float):
                vals.append("nan" if not math.isfinite(v) else f"{v:.6f}")
            else:
                vals.append(str(v).replace(",", ";"))
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


def curves_csv(records) -> str:
    lines = ["round,series,value"]
    for rec in records:
        for name in ("mta", "asr", "a_n", "a_shadow"):
            v = getattr(rec, name)
            if math.isfinite(v):
                lines.append(f"{rec.round},{name},{v:.6f}")
    return "\n".join(lines) + "\n"


def summarize(sim: Simulation) -> dict:
    recs = [r for r in sim.records if math.isfinite(r.mta)]
    early = []
    if sim.shadow_state is not None:
        early = list(sim.shadow_state.early_stop_rounds)
    elif sim.ensemble is not None:
        early = {int(y): list(st.early_stop_rounds) for y, st in sim.ensemble.states.items()}
    out = {
        "config_digest": sim.cfg.digest(),
        "defense": sim.cfg.defense,
        "alpha": sim.cfg.alpha,
        "seed": sim.cfg.seed,
        "rounds": sim.round,
        "final_mta": recs[-1].mta if recs else None,
        "final_asr": recs[-1].asr if recs else None,
        "peak_asr": max(r.asr for r in recs) if recs else None,
        "early_stop_rounds": early,
    }
    if sim.ensemble is not None:
        out["selected_labels"] = list(sim.ensemble.selected)
    return out


def run_experiment(cfg: ExperimentConfig, out_dir=None, progress=None, datasets=None) -> ExperimentResult:
    sim = Simulation(cfg, datasets)
    sim.run(progress=progress)
    summary = summarize(sim)
    if out_dir is not None:
        write_artifacts(sim, summary, out_dir)
    return ExperimentResult(sim.records, summary, sim)


def write_artifacts(sim: Simulation, summary: dict, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "rounds.csv", records_csv(sim.records))
    atomic_write_text(out / "curves.csv", curves_csv(sim.records))
    atomic_write_text(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if sim.shadow_log:
        atomic_write_text(out / "shadow_log.csv", shadow_log_csv(sim.shadow_log))
    save_model(out / "backbone.ckpt", sim.spec, sim.params, sim.cfg.seed, {"round": sim.round})
    for y, w in sorted(sim.deployed.items()):
        save_model(out / f"shadow_{y}.ckpt", sim.spec, w, sim.cfg.seed, {"label": int(y)})
    if sim.shadow_state is not None and sim.shadow_state.filter is not None:
        save_filter(out / "filter.ckpt", sim.shadow_state.filter)

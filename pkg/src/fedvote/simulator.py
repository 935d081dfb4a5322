"""Federated rounds under attack, with optional detection, and multi-replication runs."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .attacks import AttackSpec, attacker_update, pretrain_false_model
from .config import ExperimentConfig
from .data import LabeledDataset, load_idx, load_mnist_sample, partition, stratified_split, synth_dataset
from .detector import Detector, IntervalRecord, calibrated_threshold
from .errors import EmptyTrustSetError, FedVoteError, InputError, ReplicationError
from .models import ModelState, init_params, local_train, predict

log = logging.getLogger(__name__)

# purpose tags for seed derivation
_SPLIT, _PARTITION, _INIT, _FALSE_MODEL, _AGENT = range(5)

QUANTILE_PERCENTS = (10, 50, 90)


def stream(seed: int, replication: int, *key: int) -> np.random.Generator:
    """Independent generator for ``(seed, replication, *key)``."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(replication,) + key))


def aggregate(updates: np.ndarray, trusted: Sequence[bool], weights: Sequence[float]) -> np.ndarray:
    """Weighted mean of the trusted agents' parameters, weights renormalized over them."""
    updates = np.asarray(updates, dtype=np.float64)
    mask = np.asarray(trusted, dtype=bool)
    w = np.asarray(weights, dtype=np.float64)
    if updates.ndim != 2 or len(mask) != updates.shape[0] or len(w) != updates.shape[0]:
        raise InputError(f"{updates.shape[0]} updates, {len(mask)} trust flags, {len(w)} weights")
    if not mask.any():
        raise EmptyTrustSetError("every agent is ignored; nothing to aggregate")
    w = np.where(mask, w, 0.0)
    return (w / w.sum()) @ updates


def label_flip_success_count(model: ModelState, X: np.ndarray, y: np.ndarray, table: Sequence[int]) -> int:
    """How many test examples are predicted as ``table[true label]``."""
    return int(np.sum(predict(model, X) == np.asarray(table)[np.asarray(y)]))


def nearest_rank(values: Sequence[float], percent: int) -> float:
    """Nearest-rank percentile: the ``ceil(percent/100 * n)``-th smallest value."""
    ordered = np.sort(np.asarray(values, dtype=np.float64))
    rank = max(1, -(-percent * len(ordered) // 100))
    return float(ordered[rank - 1])


@dataclass(frozen=True)
class RoundRecord:
    round: int
    test_error: float
    statistics: Optional[Tuple[float, ...]]
    trusted: Tuple[bool, ...]
    flip_success_count: Optional[int]
    prediction_counts: Tuple[int, ...]

    def prediction_fraction(self, label: int) -> float:
        return self.prediction_counts[label] / sum(self.prediction_counts)


@dataclass
class ReplicationResult:
    """One replication's round series plus its detection timeline.

    Attributes:
        excluded_from: For each attacker, the first interval from which it stays
            ignored through the end of the run (``None`` if it is trusted at the end).
        truthful_exclusions: ``(agent, first_interval, last_interval)`` for every
            stretch during which a truthful agent was ignored; ``last_interval`` is
            ``None`` if the stretch lasts to the end.
    """

    replication: int
    threshold: Optional[float]
    rounds: List[RoundRecord]
    intervals: List[IntervalRecord] = field(default_factory=list)
    excluded_from: Dict[int, Optional[int]] = field(default_factory=dict)
    truthful_exclusions: List[Tuple[int, int, Optional[int]]] = field(default_factory=list)

    @property
    def errors(self) -> np.ndarray:
        return np.array([r.test_error for r in self.rounds])


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    replications: List[ReplicationResult]
    quantiles: np.ndarray  # (rounds, 3): q10, q50, q90 of test error


@lru_cache(maxsize=4)
def _idx_pool(images: str, labels: str) -> LabeledDataset:
    return load_idx(images, labels)


def prepare_data(config: ExperimentConfig, replication: int) -> Tuple[LabeledDataset, LabeledDataset]:
    """Per-replication stratified train/test draw from the configured source."""
    ds = config.dataset
    rng = stream(config.seed, replication, _SPLIT)
    if ds.source == "mnist-sample":
        return stratified_split(load_mnist_sample(), ds.train_size, ds.test_size, rng)
    if ds.source == "synthetic":
        pool = synth_dataset(ds.classes, ds.per_class, ds.dim, ds.noise_sd, ds.seed)
        return stratified_split(pool, ds.train_size, ds.test_size, rng)
    pool = _idx_pool(ds.train_images, ds.train_labels)
    if not ds.test_images:
        return stratified_split(pool, ds.train_size, ds.test_size, rng)
    test_pool = _idx_pool(ds.test_images, ds.test_labels)
    train, _ = stratified_split(pool, ds.train_size, 0, rng)
    test, _ = stratified_split(test_pool, ds.test_size, 0, rng)
    return train, test


class Simulation:
    """State of one replication: data shards, global model, attacker, detector.

    Args:
        config: Scenario.
        replication: Replication index (selects the seeds).
        threshold: Detector threshold; required when detection is on.
        monitor: Compute detector statistics even when detection is off
            (flags are then never applied to aggregation).
    """

    def __init__(self, config: ExperimentConfig, replication: int = 0,
                 threshold: Optional[float] = None, monitor: bool = False):
        self.config = config
        self.replication = replication
        self.train, self.test = prepare_data(config, replication)
        plan = partition(self.train, config.n_agents, stream(config.seed, replication, _PARTITION))
        self.shards = [self.train.subset(idx) for idx in plan.shards]
        spec = config.model
        self.global_params = init_params(spec, stream(config.seed, replication, _INIT))
        self.initial_params = self.global_params.copy()
        self.attack: AttackSpec = config.attack
        self.false_params: Optional[np.ndarray] = None
        if self.attack.active:
            self.false_params = pretrain_false_model(
                self.attack, spec, self.shards[self.attack.attackers[0]],
                stream(config.seed, replication, _FALSE_MODEL),
                init=self.initial_params, lr=config.training.lr, batch_size=config.training.batch_size,
            )
        self.detector: Optional[Detector] = None
        if config.detection or monitor:
            if threshold is None:
                raise InputError("a detector threshold is required")
            self.detector = Detector(config.n_agents, config.detector, threshold, self.initial_params)
        self.t = 0
        self.rounds: List[RoundRecord] = []
        self.intervals: List[IntervalRecord] = []

    def local_steps(self, shard: LabeledDataset) -> int:
        tr = self.config.training
        return tr.local_epochs * math.ceil(len(shard) / tr.batch_size)

    def submissions(self, t: int) -> np.ndarray:
        """Every agent trains from the current global model; attackers then blend in the false model."""
        cfg = self.config
        spec = cfg.model
        out = np.empty((cfg.n_agents, spec.n_params))
        start = ModelState(spec, self.global_params)
        for j, shard in enumerate(self.shards):
            rng = stream(cfg.seed, self.replication, _AGENT, j, t)
            out[j] = local_train(start, shard.features, shard.labels, self.local_steps(shard),
                                 cfg.training.lr, cfg.training.batch_size, rng)
        if self.attack.active:
            for a in self.attack.attackers:
                out[a] = attacker_update(self.attack.schedule, t, out[a], self.false_params)
        return out

    def run_round(self) -> RoundRecord:
        cfg = self.config
        t = self.t + 1
        subs = self.submissions(t)
        stats = None
        if self.detector is not None:
            stats = tuple(float(u) for u in self.detector.observe(subs, self.global_params))
            if self.detector.at_boundary:
                self.intervals.extend(self.detector.close_interval())
        if cfg.detection:
            trusted = self.detector.trusted.copy()
        else:
            trusted = np.ones(cfg.n_agents, dtype=bool)
        try:
            self.global_params = aggregate(subs, trusted, cfg.weights)
        except EmptyTrustSetError as exc:
            raise EmptyTrustSetError(
                f"replication {self.replication}, round {t}: {exc} (seed {cfg.seed})"
            ) from None
        model = ModelState(cfg.model, self.global_params)
        pred = predict(model, self.test.features)
        flips = None
        if cfg.attack.flip_table is not None:
            flips = int(np.sum(pred == np.asarray(cfg.attack.flip_table)[self.test.labels]))
        record = RoundRecord(
            round=t,
            test_error=float(np.mean(pred != self.test.labels)),
            statistics=stats,
            trusted=tuple(bool(x) for x in trusted),
            flip_success_count=flips,
            prediction_counts=tuple(int(c) for c in np.bincount(pred, minlength=cfg.model.n_classes)),
        )
        self.t = t
        self.rounds.append(record)
        return record

    def run(self) -> List[RoundRecord]:
        while self.t < self.config.rounds:
            self.run_round()
        return self.rounds


def calibrate_threshold(config: ExperimentConfig, replication: int = 0) -> float:
    """Threshold from one attack-free, detection-free warmup interval of this replication."""
    clean = config.replace(attack=AttackSpec(flip_table=config.attack.flip_table), detection=False)
    sim = Simulation(clean, replication, threshold=1.0, monitor=True)
    for _ in range(config.detector.interval):
        sim.run_round()
    means = sim.detector.last_means
    return calibrated_threshold(means, config.detector.calibration_factor)


def resolve_threshold(config: ExperimentConfig, replication: int) -> Optional[float]:
    if not config.detection:
        return None
    if config.detector.threshold is not None:
        return config.detector.threshold
    return calibrate_threshold(config, replication)


def detection_timeline(intervals: Sequence[IntervalRecord], attackers: Sequence[int], n_agents: int):
    """Permanent-exclusion interval per attacker and truthful exclusion episodes."""
    if not intervals:
        return {a: None for a in attackers}, []
    n_k = max(r.interval for r in intervals)
    trusted = np.ones((n_k, n_agents), dtype=bool)
    for r in intervals:
        trusted[r.interval - 1, r.agent] = r.trusted
    excluded_from: Dict[int, Optional[int]] = {}
    for a in attackers:
        col = trusted[:, a]
        if col[-1]:
            excluded_from[a] = None
        else:
            trusted_at = np.flatnonzero(col)
            excluded_from[a] = int(trusted_at[-1]) + 2 if trusted_at.size else 1
    episodes: List[Tuple[int, int, Optional[int]]] = []
    for j in range(n_agents):
        if j in attackers:
            continue
        start = None
        for k in range(n_k):
            if not trusted[k, j] and start is None:
                start = k + 1
            elif trusted[k, j] and start is not None:
                episodes.append((j, start, k))
                start = None
        if start is not None:
            episodes.append((j, start, None))
    return excluded_from, episodes


def run_experiment(config: ExperimentConfig, replication: int = 0) -> ReplicationResult:
    """One replication: calibrate if needed, then run every round."""
    threshold = resolve_threshold(config, replication)
    sim = Simulation(config, replication, threshold=threshold)
    sim.run()
    attackers = config.attack.attackers if config.attack.active else ()
    excluded_from, episodes = detection_timeline(sim.intervals, attackers, config.n_agents)
    return ReplicationResult(replication, threshold, sim.rounds, sim.intervals, excluded_from, episodes)


def _run_one(args) -> ReplicationResult:
    config, replication = args
    try:
        return run_experiment(config, replication)
    except FedVoteError as exc:
        raise ReplicationError(replication, config.seed, exc) from exc


def quantile_curves(replications: Sequence[ReplicationResult]) -> np.ndarray:
    errors = np.stack([r.errors for r in replications])
    return np.array([[nearest_rank(errors[:, t], p) for p in QUANTILE_PERCENTS]
                     for t in range(errors.shape[1])])


def run_replications(config: ExperimentConfig, workers: int = 1) -> ExperimentResult:
    """All replications of ``config``; the result does not depend on ``workers``."""
    jobs = [(config, r) for r in range(config.replications)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = []
        for job in jobs:
            results.append(_run_one(job))
            log.info("replication %d/%d done", job[1] + 1, config.replications)
    results.sort(key=lambda r: r.replication)
    return ExperimentResult(config, results, quantile_curves(results))

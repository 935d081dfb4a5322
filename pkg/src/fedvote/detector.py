"""Coordinator-side attacker detection and trust management.

Per round, every agent j gets a deviation score

    U_j(t) = max_i | dW_j(t)[i] - median_{l != j} dW_l(t)[i] |

(the sup-norm distance between its parameter change and the coordinatewise
median of everybody else's). Every ``interval`` rounds the scores are
averaged; an agent whose average strictly exceeds ``threshold * sqrt(N)``
gets a 1-decision for that interval, else 0. An agent is ignored while the
mean of all its decisions so far is above 1/2, readmitted when it drops
below 1/2, and keeps its current status at exactly 1/2. Scores keep being
computed for ignored agents.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, InputError, ProtocolError

REFERENCES = ("submission", "broadcast")
MEDIAN_POOLS = ("all", "trusted")


@dataclass(frozen=True)
class DetectorConfig:
    """Detector settings.

    Attributes:
        interval: Rounds per decision interval.
        threshold: Per-agent threshold ``delta_u``; the decision compares the
            interval mean against ``threshold * sqrt(N)``. ``None`` means
            calibrate it from an attack-free warmup interval.
        calibration_factor: Calibrated threshold is this factor times the
            median over agents of their warmup interval means.
        reference: What ``dW_j(t)`` is measured against: the agent's previous
            submission (``"submission"``) or the model broadcast to it at the
            start of the round (``"broadcast"``).
        median_pool: ``"all"`` compares against every other agent, ignored or
            not; ``"trusted"`` only against currently trusted ones.
    """

    interval: int = 5
    threshold: Optional[float] = None
    calibration_factor: float = 3.0
    reference: str = "broadcast"
    median_pool: str = "all"

    def __post_init__(self):
        if self.interval < 1:
            raise ConfigError(f"detector interval must be >= 1, got {self.interval}")
        if self.threshold is not None and not self.threshold > 0:
            raise ConfigError(f"detector threshold must be positive, got {self.threshold}")
        if not self.calibration_factor > 0:
            raise ConfigError(f"calibration_factor must be positive, got {self.calibration_factor}")
        if self.reference not in REFERENCES:
            raise ConfigError(f"reference must be one of {REFERENCES}, got {self.reference!r}")
        if self.median_pool not in MEDIAN_POOLS:
            raise ConfigError(f"median_pool must be one of {MEDIAN_POOLS}, got {self.median_pool!r}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "interval": self.interval,
            "threshold": self.threshold,
            "calibration_factor": self.calibration_factor,
            "reference": self.reference,
            "median_pool": self.median_pool,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DetectorConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown detector field(s): {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class IntervalRecord:
    interval: int
    agent: int
    delta_u: float
    decision: int
    vote_mean: float
    trusted: bool


def coordinatewise_median(vectors: Union[Sequence[np.ndarray], np.ndarray]) -> np.ndarray:
    """Per-coordinate median; an even count averages the two middle values."""
    stack = np.asarray(vectors, dtype=np.float64)
    if stack.ndim != 2 or stack.shape[0] == 0:
        raise InputError("need a non-empty list of equal-length vectors")
    return np.median(stack, axis=0)


def leave_one_out_medians(deltas: np.ndarray) -> np.ndarray:
    """Row j is the coordinatewise median of all rows except j.

    Sorts each column once, then reads the median of the remaining ``N - 1``
    values by skipping row j's rank.
    """
    n = deltas.shape[0]
    if n < 2:
        raise InputError("leave-one-out median needs at least two vectors")
    order = np.argsort(deltas, axis=0, kind="stable")
    ordered = np.take_along_axis(deltas, order, axis=0)
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(n)[:, None], axis=0)
    m = n - 1
    out = np.empty_like(deltas)
    for j in range(n):
        r = rank[j]
        if m % 2:
            mid = (m - 1) // 2
            out[j] = np.take_along_axis(ordered, (mid + (mid >= r))[None], axis=0)[0]
        else:
            lo, hi = m // 2 - 1, m // 2
            a = np.take_along_axis(ordered, (lo + (lo >= r))[None], axis=0)[0]
            b = np.take_along_axis(ordered, (hi + (hi >= r))[None], axis=0)[0]
            out[j] = (a + b) / 2
    return out


def deviation_statistics(deltas: np.ndarray, pool: Optional[np.ndarray] = None) -> np.ndarray:
    """Sup-norm distance of each row from the median of the other rows.

    Args:
        deltas: ``(N, D)`` parameter changes, one row per agent.
        pool: Optional boolean mask restricting which agents enter the median.
            An agent whose comparison pool is empty scores 0.
    """
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.ndim != 2 or deltas.shape[0] < 2:
        raise InputError(f"need an (N >= 2, D) array of deltas, got shape {deltas.shape}")
    n = deltas.shape[0]
    if pool is None or np.all(pool):
        med = leave_one_out_medians(deltas)
        return np.abs(deltas - med).max(axis=1)
    pool = np.asarray(pool, dtype=bool)
    scores = np.zeros(n)
    for j in range(n):
        others = pool.copy()
        others[j] = False
        if others.any():
            scores[j] = np.abs(deltas[j] - np.median(deltas[others], axis=0)).max()
    return scores


def vote(decisions_sum: int, n_decisions: int, previous: bool) -> bool:
    """Trust flag from a decision history (``True`` = trusted)."""
    if n_decisions < 1:
        raise InputError("need at least one decision")
    twice = 2 * decisions_sum
    if twice > n_decisions:
        return False
    if twice < n_decisions:
        return True
    return previous


def calibrated_threshold(interval_means: Sequence[float], factor: float) -> float:
    """``factor`` times the median over agents of their attack-free interval means."""
    value = factor * float(np.median(np.asarray(interval_means, dtype=np.float64)))
    if not value > 0:
        raise ConfigError("calibration produced a non-positive threshold (all warmup statistics are 0)")
    return value


class Detector:
    """Mutable detector state for one replication.

    Args:
        n_agents: Number of edge agents N.
        config: Detector settings.
        threshold: Resolved ``delta_u`` (already calibrated if needed).
        initial_params: The initial global model, used as every agent's
            previous submission before round 1.
    """

    def __init__(self, n_agents: int, config: DetectorConfig, threshold: float,
                 initial_params: np.ndarray):
        if n_agents < 2:
            raise ConfigError("detection needs at least two agents")
        if not threshold > 0:
            raise ConfigError(f"threshold must be positive, got {threshold}")
        self.n_agents = n_agents
        self.config = config
        self.threshold = float(threshold)
        self.previous = np.tile(np.asarray(initial_params, dtype=np.float64), (n_agents, 1))
        self.sums = np.zeros(n_agents)
        self.rounds_in_interval = 0
        self.history: List[List[int]] = [[] for _ in range(n_agents)]
        self.trusted = np.ones(n_agents, dtype=bool)
        self.last_means = np.zeros(n_agents)

    @property
    def n_intervals(self) -> int:
        return len(self.history[0])

    @property
    def cutoff(self) -> float:
        return self.threshold * math.sqrt(self.n_agents)

    @property
    def at_boundary(self) -> bool:
        return self.rounds_in_interval == self.config.interval

    def deltas(self, submissions: np.ndarray, broadcast: np.ndarray) -> np.ndarray:
        """``dW_j(t)`` per the configured reference; also stores the submissions."""
        submissions = np.asarray(submissions, dtype=np.float64)
        if submissions.shape != self.previous.shape:
            raise ProtocolError(f"expected {self.previous.shape} submissions, got {submissions.shape}")
        if self.config.reference == "submission":
            out = submissions - self.previous
        else:
            out = submissions - np.asarray(broadcast, dtype=np.float64)[None, :]
        self.previous = submissions.copy()
        return out

    def round_statistic(self, deltas: Union[Mapping[int, np.ndarray], np.ndarray]) -> np.ndarray:
        """Score every agent for one round and add the scores to the interval sums."""
        if self.at_boundary:
            raise ProtocolError("interval is complete; call interval_decision first")
        if isinstance(deltas, Mapping):
            missing = [j for j in range(self.n_agents) if j not in deltas]
            if missing:
                raise ProtocolError(f"missing updates from agents {missing}")
            deltas = np.stack([np.asarray(deltas[j], dtype=np.float64) for j in range(self.n_agents)])
        deltas = np.asarray(deltas, dtype=np.float64)
        if deltas.ndim != 2 or deltas.shape[0] != self.n_agents:
            raise ProtocolError(f"expected one update per agent ({self.n_agents}), got shape {deltas.shape}")
        pool = self.trusted if self.config.median_pool == "trusted" else None
        scores = deviation_statistics(deltas, pool)
        self.sums += scores
        self.rounds_in_interval += 1
        return scores

    def observe(self, submissions: np.ndarray, broadcast: np.ndarray) -> np.ndarray:
        return self.round_statistic(self.deltas(submissions, broadcast))

    def interval_decision(self) -> np.ndarray:
        """Threshold the interval means, append the decisions and reset the sums."""
        if not self.at_boundary:
            raise ProtocolError(
                f"interval_decision called after {self.rounds_in_interval} of {self.config.interval} rounds"
            )
        means = self.sums / self.config.interval
        decisions = (means > self.cutoff).astype(int)
        for j, d in enumerate(decisions):
            self.history[j].append(int(d))
        self.last_means = means
        self.sums = np.zeros(self.n_agents)
        self.rounds_in_interval = 0
        return decisions

    def update_trust(self) -> np.ndarray:
        if self.n_intervals < 1:
            raise ProtocolError("no decisions recorded yet")
        k = self.n_intervals
        self.trusted = np.array([vote(sum(h), k, bool(prev)) for h, prev in zip(self.history, self.trusted)])
        return self.trusted.copy()

    def close_interval(self) -> List[IntervalRecord]:
        """Decide, vote and report one record per agent."""
        decisions = self.interval_decision()
        trusted = self.update_trust()
        k = self.n_intervals
        return [
            IntervalRecord(k, j, float(self.last_means[j]), int(decisions[j]),
                           sum(self.history[j]) / k, bool(trusted[j]))
            for j in range(self.n_agents)
        ]

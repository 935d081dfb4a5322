"""Data-injection attackers.

A malicious agent trains honestly from the broadcast model like everyone
else, then submits a blend of that honest result and a fixed, pre-trained
false model::

    W_a(t) = g(t) * W_honest(t) + (1 - g(t)) * W_false

where the mixing weight ``g`` starts at 1 and decays, so the attack fades in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from .data import LabeledDataset
from .errors import ConfigError, InputError
from .models import ModelSpec, ModelState, init_params, local_train, param_scales

ATTACK_KINDS = ("none", "constant-output", "label-flip", "randomized")
SCHEDULE_KINDS = ("inverse-sqrt", "step", "zero", "table")

# c -> h(c) for MNIST digits
MNIST_FLIP_TABLE: Tuple[int, ...] = (3, 4, 7, 5, 8, 0, 9, 6, 2, 1)


@dataclass(frozen=True)
class MixingSchedule:
    """Mixing weight ``g(t)`` for round ``t >= 0``.

    Kinds:
        ``inverse-sqrt``: ``1/sqrt(t - start + 1)`` once ``t >= start``.
        ``step``: 0 once ``t >= start`` (a plain delayed attack).
        ``zero``: 0 for every round, i.e. the pure false model from the start.
        ``table``: ``table[t - start]``, holding the last entry afterwards.

    For every kind except ``zero``, ``g(t) = 1`` while ``t < start``.
    """

    kind: str = "inverse-sqrt"
    start: int = 0
    table: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"unknown schedule kind {self.kind!r}; expected one of {SCHEDULE_KINDS}")
        if self.start < 0:
            raise ConfigError(f"schedule start must be >= 0, got {self.start}")
        if self.kind == "table":
            if not self.table:
                raise ConfigError("table schedule needs a non-empty table")
            values = tuple(float(v) for v in self.table)
            object.__setattr__(self, "table", values)
            if any(not 0.0 <= v <= 1.0 for v in values):
                raise ConfigError("table schedule values must lie in [0, 1]")
            if any(b > a for a, b in zip(values, values[1:])):
                raise ConfigError("table schedule must be non-increasing")
        elif self.table is not None:
            raise ConfigError(f"table given for a {self.kind!r} schedule")

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"kind": self.kind, "start": self.start}
        if self.table is not None:
            out["table"] = list(self.table)
        return out

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MixingSchedule":
        unknown = set(data) - {"kind", "start", "table"}
        if unknown:
            raise ConfigError(f"unknown schedule field(s): {sorted(unknown)}")
        table = data.get("table")
        return cls(data.get("kind", "inverse-sqrt"), int(data.get("start", 0)),
                   tuple(table) if table is not None else None)


def mixing_weight(schedule: MixingSchedule, t: int) -> float:
    if t < 0:
        raise InputError(f"round index must be >= 0, got {t}")
    if schedule.kind == "zero":
        return 0.0
    if t < schedule.start:
        return 1.0
    s = t - schedule.start
    if schedule.kind == "inverse-sqrt":
        return 1.0 / math.sqrt(s + 1)
    if schedule.kind == "step":
        return 0.0
    return schedule.table[min(s, len(schedule.table) - 1)]


@dataclass(frozen=True)
class AttackSpec:
    """Who attacks and how.

    All attackers share one false model and one schedule.

    Attributes:
        kind: One of ``ATTACK_KINDS``.
        attackers: Agent ids (0-based) under the attacker's control.
        target_class: Class forced by the constant-output attack.
        flip_table: ``h(c)`` for every class ``c``; used by label-flip attacks and
            for counting successful flips in any scenario.
        random_scale: Standard deviation of the randomized false model. ``None``
            uses each layer's initialization scale ``1/sqrt(fan_in)``.
        schedule: Mixing weight schedule.
        false_model_epochs: SGD epochs used to pre-train the false model on the
            attacker's own relabeled shard.
    """

    kind: str = "none"
    attackers: Tuple[int, ...] = ()
    target_class: int = 9
    flip_table: Optional[Tuple[int, ...]] = MNIST_FLIP_TABLE
    random_scale: Optional[float] = None
    schedule: MixingSchedule = field(default_factory=MixingSchedule)
    false_model_epochs: int = 100

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}; expected one of {ATTACK_KINDS}")
        object.__setattr__(self, "attackers", tuple(sorted(int(a) for a in self.attackers)))
        if len(set(self.attackers)) != len(self.attackers):
            raise ConfigError(f"duplicate attacker ids in {list(self.attackers)}")
        if self.kind != "none" and not self.attackers:
            raise ConfigError(f"{self.kind} attack needs at least one attacker id")
        if self.flip_table is not None:
            object.__setattr__(self, "flip_table", tuple(int(v) for v in self.flip_table))
        if self.kind == "label-flip" and self.flip_table is None:
            raise ConfigError("label-flip attack needs a flip_table")
        if self.random_scale is not None and self.random_scale <= 0:
            raise ConfigError(f"random_scale must be positive, got {self.random_scale}")
        if self.false_model_epochs < 1:
            raise ConfigError(f"false_model_epochs must be >= 1, got {self.false_model_epochs}")

    @property
    def active(self) -> bool:
        return self.kind != "none"

    def check_against(self, n_agents: int, n_classes: int) -> None:
        """Validate the parts that depend on the experiment around the attack."""
        n_a = len(self.attackers) if self.active else 0
        if not n_a < n_agents / 2:
            raise ConfigError(f"attackers must be a strict minority: n_a={n_a}, N={n_agents}")
        bad = [a for a in self.attackers if not 0 <= a < n_agents]
        if bad:
            raise ConfigError(f"attacker ids {bad} outside [0, {n_agents})")
        if self.kind == "constant-output" and not 0 <= self.target_class < n_classes:
            raise ConfigError(f"target_class {self.target_class} outside [0, {n_classes})")
        if self.flip_table is not None:
            if len(self.flip_table) != n_classes:
                raise ConfigError(f"flip_table has {len(self.flip_table)} entries, expected {n_classes}")
            if any(not 0 <= v < n_classes for v in self.flip_table):
                raise ConfigError(f"flip_table entries must lie in [0, {n_classes})")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "attackers": list(self.attackers),
            "target_class": self.target_class,
            "flip_table": list(self.flip_table) if self.flip_table is not None else None,
            "random_scale": self.random_scale,
            "schedule": self.schedule.to_dict(),
            "false_model_epochs": self.false_model_epochs,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AttackSpec":
        known = {"kind", "attackers", "target_class", "flip_table", "random_scale", "schedule",
                 "false_model_epochs"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown attack field(s): {sorted(unknown)}")
        kwargs = {k: v for k, v in data.items() if k != "schedule"}
        if "attackers" in kwargs:
            kwargs["attackers"] = tuple(kwargs["attackers"])
        if kwargs.get("flip_table") is not None:
            kwargs["flip_table"] = tuple(kwargs["flip_table"])
        return cls(schedule=MixingSchedule.from_dict(data.get("schedule") or {}), **kwargs)


def flip_labels(dataset: LabeledDataset, table: Sequence[int]) -> LabeledDataset:
    """Relabel every example ``c -> table[c]``; features are shared, not copied."""
    table = np.asarray(table, dtype=np.int64)
    if dataset.labels.size and dataset.labels.max() >= len(table):
        raise InputError(f"flip table of size {len(table)} does not cover label {dataset.labels.max()}")
    return dataset.with_labels(table[dataset.labels])


def attacker_update(schedule: MixingSchedule, t: int, w_truthful: np.ndarray,
                    w_false: np.ndarray) -> np.ndarray:
    if w_truthful.shape != w_false.shape:
        raise InputError(f"dimension mismatch: {w_truthful.shape} vs {w_false.shape}")
    g = mixing_weight(schedule, t)
    if g == 1.0:
        return w_truthful.copy()
    if g == 0.0:
        return w_false.copy()
    return g * w_truthful + (1.0 - g) * w_false


def pretrain_false_model(attack: AttackSpec, spec: ModelSpec, data: Optional[LabeledDataset],
                         rng: np.random.Generator, *, init: Optional[np.ndarray] = None,
                         lr: float = 0.05, batch_size: int = 32) -> np.ndarray:
    """Build the attacker's fixed false model ``W_false``.

    Constant-output and label-flip models are trained with SGD on ``data``
    relabeled to the target class or through ``flip_table``, starting from
    ``init`` (the initial broadcast model, when known) or a fresh initialization.
    Randomized models are i.i.d. Gaussian.
    """
    if attack.kind == "none":
        raise ConfigError("no false model for attack kind 'none'")
    if attack.kind == "randomized":
        sd = attack.random_scale if attack.random_scale is not None else param_scales(spec)
        return rng.normal(size=spec.n_params) * sd
    if data is None or len(data) == 0:
        raise ConfigError(f"{attack.kind} false model needs training data")
    if attack.kind == "constant-output":
        poisoned = data.with_labels(np.full(len(data), attack.target_class))
    else:
        poisoned = flip_labels(data, attack.flip_table)
    start = init if init is not None else init_params(spec, rng)
    steps = attack.false_model_epochs * math.ceil(len(poisoned) / batch_size)
    return local_train(ModelState(spec, start), poisoned.features, poisoned.labels,
                       steps, lr, batch_size, rng)

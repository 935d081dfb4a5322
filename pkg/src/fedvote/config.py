"""Experiment configuration: dataclasses, validation and (de)serialization.

Config files are YAML (JSON is accepted too, being a YAML subset). Every
field has a default; :meth:`ExperimentConfig.to_dict` materializes all of
them so a dumped config reproduces the run on its own.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import yaml

from .attacks import AttackSpec
from .detector import DetectorConfig
from .errors import ConfigError
from .models import ModelSpec, mlp

DATA_SOURCES = ("mnist-sample", "idx", "synthetic")
MNIST_DIM = 784


@dataclass(frozen=True)
class DatasetConfig:
    """Where the data comes from and how much of it each replication uses.

    ``mnist-sample`` is the 5,000-digit MNIST subset bundled with mlxtend;
    ``idx`` reads uncompressed MNIST-format files (test files are optional,
    without them the test set is carved out of the training files);
    ``synthetic`` draws Gaussian classes around unit-norm means.
    """

    source: str = "mnist-sample"
    train_size: int = 4000
    test_size: int = 1000
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    classes: int = 10
    per_class: int = 200
    dim: int = 20
    noise_sd: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.source not in DATA_SOURCES:
            raise ConfigError(f"unknown dataset source {self.source!r}; expected one of {DATA_SOURCES}")
        if self.train_size < 1 or self.test_size < 1:
            raise ConfigError("train_size and test_size must be positive")
        if self.source == "idx" and not (self.train_images and self.train_labels):
            raise ConfigError("idx source needs train_images and train_labels paths")
        if self.source == "idx" and bool(self.test_images) != bool(self.test_labels):
            raise ConfigError("give both test_images and test_labels, or neither")
        if self.source == "synthetic":
            if min(self.classes, self.per_class, self.dim) < 1:
                raise ConfigError("synthetic classes, per_class and dim must be positive")
            if self.noise_sd < 0:
                raise ConfigError(f"noise_sd must be non-negative, got {self.noise_sd}")
            if self.train_size + self.test_size > self.classes * self.per_class:
                raise ConfigError(
                    f"train_size + test_size = {self.train_size + self.test_size} exceeds "
                    f"the synthetic pool of {self.classes * self.per_class}"
                )
        if self.source == "mnist-sample" and self.train_size + self.test_size > 5000:
            raise ConfigError(
                f"train_size + test_size = {self.train_size + self.test_size} exceeds the 5000-image MNIST sample"
            )

    @property
    def feature_dim(self) -> int:
        return self.dim if self.source == "synthetic" else MNIST_DIM

    @property
    def n_classes(self) -> int:
        return self.classes if self.source == "synthetic" else 10

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class TrainingConfig:
    lr: float = 0.05
    batch_size: int = 32
    local_epochs: int = 1

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.local_epochs < 1:
            raise ConfigError(f"local_epochs must be >= 1, got {self.local_epochs}")

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


def default_model(dataset: DatasetConfig) -> ModelSpec:
    hidden = 64 if dataset.source != "synthetic" else 16
    return mlp(dataset.feature_dim, [hidden], dataset.n_classes)


@dataclass(frozen=True)
class ExperimentConfig:
    """A complete scenario.

    Attributes:
        n_agents: Number of edge agents N.
        weights: Aggregation weights ``p_k`` (positive, summing to 1);
            ``None`` becomes uniform ``1/N``.
        rounds: Number of federated rounds ``T_max``.
        replications: Independent replications R.
        seed: Master seed; everything random derives from it.
        detection: Whether the coordinator excludes flagged agents.
    """

    n_agents: int = 5
    weights: Optional[Tuple[float, ...]] = None
    rounds: int = 60
    replications: int = 20
    seed: int = 0
    detection: bool = True
    model: Optional[ModelSpec] = None
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    attack: AttackSpec = field(default_factory=AttackSpec)
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    def __post_init__(self):
        n = self.n_agents
        if n < 1:
            raise ConfigError(f"n_agents must be >= 1, got {n}")
        if self.weights is None:
            object.__setattr__(self, "weights", tuple([1.0 / n] * n))
        weights = tuple(float(w) for w in self.weights)
        object.__setattr__(self, "weights", weights)
        if len(weights) != n:
            raise ConfigError(f"got {len(weights)} weights for {n} agents")
        if any(not w > 0 for w in weights):
            raise ConfigError("aggregation weights must be positive")
        if not math.isclose(sum(weights), 1.0, rel_tol=0, abs_tol=1e-9):
            raise ConfigError(f"aggregation weights must sum to 1, got {sum(weights)!r}")
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")
        if self.replications < 1:
            raise ConfigError(f"replications must be >= 1, got {self.replications}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if self.model is None:
            object.__setattr__(self, "model", default_model(self.dataset))
        if self.model.input_dim != self.dataset.feature_dim:
            raise ConfigError(
                f"model input dim {self.model.input_dim} does not match dataset feature dim {self.dataset.feature_dim}"
            )
        if self.model.n_classes != self.dataset.n_classes:
            raise ConfigError(
                f"model has {self.model.n_classes} classes but the dataset has {self.dataset.n_classes}"
            )
        self.attack.check_against(n, self.dataset.n_classes)
        if self.detection and n < 2:
            raise ConfigError("detection needs at least two agents")
        if n > self.dataset.train_size:
            raise ConfigError(f"cannot split {self.dataset.train_size} training examples among {n} agents")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n_agents": self.n_agents,
            "weights": list(self.weights),
            "rounds": self.rounds,
            "replications": self.replications,
            "seed": self.seed,
            "detection": self.detection,
            "model": self.model.to_dict(),
            "dataset": self.dataset.to_dict(),
            "training": self.training.to_dict(),
            "attack": self.attack.to_dict(),
            "detector": self.detector.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a mapping")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
        kwargs = {k: v for k, v in data.items() if k not in ("model", "dataset", "training", "attack", "detector")}
        if kwargs.get("weights") is not None:
            kwargs["weights"] = tuple(kwargs["weights"])
        try:
            kwargs["dataset"] = DatasetConfig(**(data.get("dataset") or {}))
            kwargs["training"] = TrainingConfig(**(data.get("training") or {}))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        kwargs["attack"] = AttackSpec.from_dict(data.get("attack") or {})
        kwargs["detector"] = DetectorConfig.from_dict(data.get("detector") or {})
        if data.get("model") is not None:
            kwargs["model"] = ModelSpec.from_dict(data["model"])
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def parse_config(source: Union[str, Path, Dict[str, Any]]) -> ExperimentConfig:
    """Load and validate a config from a YAML/JSON file path or a mapping."""
    if isinstance(source, dict):
        return ExperimentConfig.from_dict(source)
    path = Path(source)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return ExperimentConfig.from_dict(data or {})


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)

"""CSV/JSON emission of experiment results.

Every number is written with 9 significant digits and rows come in a fixed
order (replication, then round or interval, then agent), so the same result
always produces the same bytes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

from . import __version__
from .config import ExperimentConfig
from .errors import ConfigError
from .simulator import ExperimentResult

ROUNDS_HEADER = ("replication", "round", "test_error", "flip_success_count")
DETECTOR_HEADER = ("replication", "interval", "agent", "delta_u", "decision", "vote_mean", "trusted")
QUANTILES_HEADER = ("round", "q10", "q50", "q90")

OUTPUT_FILES = {
    "rounds": "rounds.csv",
    "detector": "detector.csv",
    "quantiles": "quantiles.csv",
    "manifest": "manifest.json",
}


def fmt(value: Union[int, float, bool, None]) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, int):
        return str(value)
    return format(float(value), ".9g")


@dataclass(frozen=True)
class RunManifest:
    """Everything needed to reproduce a run bit for bit.

    Attributes:
        config: Fully materialized config (every default filled in).
        seed: Master seed, duplicated from the config for visibility.
        version: Package version that produced the outputs.
        outputs: Output file names, relative to the manifest's directory.
    """

    config: Dict[str, Any]
    seed: int
    version: str = __version__
    outputs: Optional[Dict[str, str]] = None

    @classmethod
    def for_config(cls, config: ExperimentConfig) -> "RunManifest":
        return cls(config.to_dict(), config.seed, __version__, dict(OUTPUT_FILES))

    def experiment_config(self) -> ExperimentConfig:
        return ExperimentConfig.from_dict(self.config)

    def to_json(self) -> str:
        data = {"version": self.version, "seed": self.seed, "outputs": self.outputs, "config": self.config}
        return json.dumps(data, indent=2) + "\n"

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunManifest":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"manifest not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        missing = {"config", "seed"} - set(data)
        if missing:
            raise ConfigError(f"{path}: manifest lacks {sorted(missing)}")
        if data["config"].get("seed") != data["seed"]:
            raise ConfigError(f"{path}: manifest seed {data['seed']} disagrees with config seed")
        return cls(data["config"], data["seed"], data.get("version", __version__), data.get("outputs"))


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])


def round_rows(result: ExperimentResult) -> List[tuple]:
    return [(rep.replication, r.round, r.test_error, r.flip_success_count)
            for rep in result.replications for r in rep.rounds]


def detector_rows(result: ExperimentResult) -> List[tuple]:
    return [(rep.replication, k.interval, k.agent, k.delta_u, k.decision, k.vote_mean, k.trusted)
            for rep in result.replications for k in rep.intervals]


def quantile_rows(result: ExperimentResult) -> List[tuple]:
    return [(t + 1, *(float(q) for q in row)) for t, row in enumerate(result.quantiles)]


def emit_results(result: ExperimentResult, manifest: RunManifest, out_dir: Union[str, Path]) -> Dict[str, Path]:
    """Write the three CSVs and the manifest into ``out_dir``; returns their paths.

    Raises:
        OSError: ``out_dir`` cannot be created or written; the message names the path.
    """
    out = Path(out_dir)
    paths = {key: out / name for key, name in OUTPUT_FILES.items()}
    try:
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(paths["rounds"], ROUNDS_HEADER, round_rows(result))
        _write_csv(paths["detector"], DETECTOR_HEADER, detector_rows(result))
        _write_csv(paths["quantiles"], QUANTILES_HEADER, quantile_rows(result))
        paths["manifest"].write_text(manifest.to_json())
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write results to {out}: {exc.strerror}", str(exc.filename or out)) from exc
    return paths


def summarize(result: ExperimentResult) -> Dict[str, Any]:
    """Headline numbers for the final round across replications."""
    final = result.quantiles[-1]
    reps = result.replications
    summary: Dict[str, Any] = {
        "replications": len(reps),
        "rounds": len(reps[0].rounds),
        "final_error_q10": float(final[0]),
        "final_error_q50": float(final[1]),
        "final_error_q90": float(final[2]),
    }
    if result.config.attack.active and result.config.detection:
        summary["attackers_excluded"] = sum(
            all(k is not None for k in rep.excluded_from.values()) for rep in reps)
        summary["truthful_exclusions"] = sum(len(rep.truthful_exclusions) for rep in reps)
    return summary

"""Command-line entry point.

Exit codes: 0 on success, 1 for usage or validation errors, 2 for failures
while running.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from . import __version__
from .attacks import ATTACK_KINDS
from .config import ExperimentConfig, dump_config
from .errors import ConfigError, FedVoteError
from .report import RunManifest, emit_results, summarize
from .simulator import calibrate_threshold, run_replications

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected 'on' or 'off', got {value!r}")
    return value == "on"


def _add_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="YAML or JSON config file")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--detection", type=_on_off, metavar="on|off")
    p.add_argument("--replications", type=int, metavar="R")
    p.add_argument("--rounds", type=int, metavar="T")
    p.add_argument("--agents", type=int, metavar="N", help="number of agents")
    p.add_argument("--interval", type=int, metavar="DT", help="detector interval length")
    p.add_argument("--threshold", type=float, metavar="DELTA", help="fixed detector threshold")
    p.add_argument("--attack", choices=ATTACK_KINDS, help="attack kind")
    p.add_argument("--attackers", type=lambda s: [int(x) for x in s.split(",") if x], metavar="IDS",
                   help="comma-separated attacker ids (0-based)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedvote", description="Federated learning attack/detection simulator")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run an experiment and write CSV/JSON outputs")
    _add_overrides(run)
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--workers", type=int, default=1, help="parallel replication processes")

    validate = sub.add_parser("validate", help="parse and check a config, then print it resolved")
    _add_overrides(validate)

    calibrate = sub.add_parser("calibrate", help="run the warmup calibration and print the threshold")
    _add_overrides(calibrate)
    calibrate.add_argument("--replication", type=int, default=0, help="replication index to calibrate")

    replay = sub.add_parser("replay", help="re-run an experiment from its manifest.json")
    replay.add_argument("manifest")
    replay.add_argument("--out", help="output directory (default: the manifest's directory)")
    replay.add_argument("--workers", type=int, default=1)
    return parser


def load_config_dict(path: str) -> Dict[str, Any]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    return data


def apply_overrides(data: Dict[str, Any], args: argparse.Namespace) -> Dict[str, Any]:
    data = dict(data)
    for flag, key in (("seed", "seed"), ("detection", "detection"), ("replications", "replications"),
                      ("rounds", "rounds"), ("agents", "n_agents")):
        value = getattr(args, flag)
        if value is not None:
            data[key] = value
    detector = dict(data.get("detector") or {})
    if args.interval is not None:
        detector["interval"] = args.interval
    if args.threshold is not None:
        detector["threshold"] = args.threshold
    data["detector"] = detector
    attack = dict(data.get("attack") or {})
    if args.attack is not None:
        attack["kind"] = args.attack
    if args.attackers is not None:
        attack["attackers"] = args.attackers
    data["attack"] = attack
    return data


def resolve(args: argparse.Namespace) -> ExperimentConfig:
    return ExperimentConfig.from_dict(apply_overrides(load_config_dict(args.config), args))


def _run_and_emit(config: ExperimentConfig, out: Path, workers: int) -> None:
    result = run_replications(config, workers=workers)
    paths = emit_results(result, RunManifest.for_config(config), out)
    print(json.dumps(summarize(result), indent=2))
    print(f"wrote {', '.join(str(p) for p in paths.values())}")


def dispatch(args: argparse.Namespace) -> None:
    if args.command == "validate":
        print(dump_config(resolve(args)), end="")
    elif args.command == "calibrate":
        config = resolve(args)
        threshold = calibrate_threshold(config, args.replication)
        print(format(threshold, ".9g"))
    elif args.command == "run":
        _run_and_emit(resolve(args), Path(args.out), args.workers)
    elif args.command == "replay":
        manifest = RunManifest.load(args.manifest)
        if manifest.version != __version__:
            logging.warning("manifest written by version %s, replaying with %s", manifest.version, __version__)
        out = Path(args.out) if args.out else Path(args.manifest).parent
        _run_and_emit(manifest.experiment_config(), out, args.workers)


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FedVoteError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

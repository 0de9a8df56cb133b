"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 solver divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness import EXPERIMENTS, ExperimentConfig, run_experiment
from .model import validate_model
from .modelio import ConfigError, load_model

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3

COMMAND_EXPERIMENT = {
    "sweep-lambda": "lambda-sweep",
    "scaling": "scaling",
    "tomography": "tomography",
}


def _seeds(text: str) -> list[int]:
    try:
        out = []
        for part in text.split(","):
            if "-" in part.strip()[1:]:
                a, b = part.split("-", 1)
                out.extend(range(int(a), int(b) + 1))
            elif part.strip():
                out.append(int(part))
        return out
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="l1smooth", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("solve", "run a tracking experiment (linear-tracking or coordinated-turn)"),
        ("sweep-lambda", "relative error over a grid of regularization weights"),
        ("scaling", "wall time against horizon length"),
        ("tomography", "dynamic tomography reconstruction on phantoms"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="experiment config (JSON)")
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--seeds", type=_seeds, help="seed list, e.g. 0,1,2 or 0-29")
        p.add_argument("--jobs", type=int, help="parallel cells")
        if name == "solve":
            p.add_argument("--experiment", choices=["linear-tracking", "coordinated-turn"])
    v = sub.add_parser("validate", help="check a model file")
    v.add_argument("model", type=Path, help="model description (JSON)")
    v.add_argument("--check-jacobians", action="store_true",
                   help="compare Jacobians against finite differences")
    return parser


def _experiment_config(args) -> ExperimentConfig:
    data = {}
    if args.config is not None:
        try:
            data = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
    if args.command in COMMAND_EXPERIMENT:
        data["experiment"] = COMMAND_EXPERIMENT[args.command]
    elif getattr(args, "experiment", None):
        data["experiment"] = args.experiment
    elif data.get("experiment", "linear-tracking") not in ("linear-tracking", "coordinated-turn"):
        raise ConfigError(f"solve runs linear-tracking or coordinated-turn, got {data['experiment']!r}")
    if args.out is not None:
        data["out"] = str(args.out)
    if args.seeds is not None:
        data["seeds"] = args.seeds
    if args.jobs is not None:
        data["jobs"] = args.jobs
    return ExperimentConfig.from_dict(data)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "validate":
            model = load_model(args.model)
            report = validate_model(model, check_jacobians=args.check_jacobians)
            for line in report:
                print(line)
            if report:
                return EXIT_CONFIG
            print("model OK")
            return EXIT_OK
        cfg = _experiment_config(args)
        result = run_experiment(cfg)
    except (ConfigError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        print(f"valid experiments: {', '.join(EXPERIMENTS)}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"wrote {result.out_dir} ({len(result.summary)} summary rows)")
    if result.diverged:
        print(f"{result.diverged} run(s) diverged", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

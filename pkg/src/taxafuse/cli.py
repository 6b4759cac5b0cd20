"""Command-line entry point.

Subcommands: synth, train, cv, eval, predict.  Every configuration key can
come from a flat 'key = value' config file (-c) and/or a same-named
command-line flag; flags win.  Each run echoes its resolved config into the
output directory so it can be reproduced exactly.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 training
divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields

from .dataset import DataError
from .encoding import EncodingError
from .evaluation import EvaluationError
from .experiments import (
    ConfigError,
    EvalOptions,
    ExperimentConfig,
    PredictOptions,
    load_config_file,
    resolve_config,
    run_cv,
    run_eval,
    run_predict,
    run_synth,
    run_train,
)
from .model import ModelError
from .ndiff import CheckpointError, DivergenceError
from .rasters import RasterError
from .synthetic import SyntheticConfigError
from .taxonomy import TaxonomyError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGENCE = 3

_USAGE_ERRORS = (ConfigError, ModelError, SyntheticConfigError, argparse.ArgumentTypeError)
_DATA_ERRORS = (
    DataError,
    TaxonomyError,
    RasterError,
    EncodingError,
    CheckpointError,
    EvaluationError,
    FileNotFoundError,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; we use 1
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _bool_flag(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {raw!r}")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("-c", "--config", help="key = value config file", default=None)
    for f in fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        ftype = f.type if isinstance(f.type, type) else {"int": int, "float": float, "str": str, "bool": bool}[f.type]
        if ftype is bool:
            parser.add_argument(flag, dest=f.name, type=_bool_flag, default=None, metavar="BOOL")
        else:
            parser.add_argument(flag, dest=f.name, type=ftype, default=None)


def _resolve(args) -> ExperimentConfig:
    file_values = load_config_file(args.config) if args.config else None
    overrides = {f.name: getattr(args, f.name) for f in fields(ExperimentConfig)}
    return resolve_config(file_values, overrides)


def build_parser() -> _Parser:
    parser = _Parser(prog="taxafuse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic dataset with ground truth")
    _add_config_flags(synth)

    trn = sub.add_parser("train", help="train one model with a stratified holdout")
    _add_config_flags(trn)

    cv = sub.add_parser("cv", help="stratified k-fold cross-validation")
    _add_config_flags(cv)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on an observation file")
    _add_config_flags(ev)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--per-level", action="store_true", help="emit the six-level metrics table")
    ev.add_argument("--unseen", action="store_true", help="coarse-level evaluation of unseen species")
    ev.add_argument("--confusion", action="store_true", help="export the taxonomy-ordered confusion matrix")
    ev.add_argument("--bands", action="store_true", help="per-frequency-band deltas vs a baseline")
    ev.add_argument("--baseline-checkpoint", default="")
    ev.add_argument("--full-taxonomy", default="", help="taxonomy covering unseen species")
    ev.add_argument("--train-observations", default="", help="counts source for --bands")

    pr = sub.add_parser("predict", help="rank species for a single observation")
    _add_config_flags(pr)
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--image", required=True, help=".npy image or synth:// token")
    pr.add_argument("--longitude", type=float, default=None)
    pr.add_argument("--latitude", type=float, default=None)
    pr.add_argument("--altitude", type=float, default=None)
    pr.add_argument("--day-of-year", type=float, default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve(args)
        if args.command == "synth":
            result = run_synth(cfg)
        elif args.command == "train":
            result = run_train(cfg)
        elif args.command == "cv":
            result = run_cv(cfg)
            result = {k: v for k, v in result.items() if not k.startswith("_")}
        elif args.command == "eval":
            result = run_eval(
                cfg,
                EvalOptions(
                    checkpoint=args.checkpoint,
                    per_level=args.per_level,
                    unseen=args.unseen,
                    confusion=args.confusion,
                    bands=args.bands,
                    baseline_checkpoint=args.baseline_checkpoint,
                    full_taxonomy=args.full_taxonomy,
                    train_observations=args.train_observations,
                ),
            )
        elif args.command == "predict":
            result = run_predict(
                cfg,
                PredictOptions(
                    checkpoint=args.checkpoint,
                    image=args.image,
                    longitude=args.longitude,
                    latitude=args.latitude,
                    altitude=args.altitude,
                    day_of_year=args.day_of_year,
                ),
            )
        else:  # pragma: no cover - argparse enforces the choices
            raise ConfigError(f"unknown command {args.command!r}")
    except _USAGE_ERRORS as exc:
        print(f"taxafuse: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _DATA_ERRORS as exc:
        print(f"taxafuse: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"taxafuse: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    print(json.dumps(result, indent=1, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: gen-data, train, eval, params, gradcheck.

Exit codes: 0 success, 1 usage or configuration error, 2 data error, 3 numeric error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from ..decoders import format_metrics
from ..errors import MiatError, NumericError
from ..ltmi import ltmi_layer_parameters, naive_layer_parameters
from . import data as D
from .config import TASKS, load_config, preset
from .train import build_model, evaluate_checkpoint, train

REFERENCE_U = 3
REFERENCE_D = 512


def params_report(U: int = REFERENCE_U, d: int = REFERENCE_D, config_path: str | None = None) -> list[str]:
    ltmi = ltmi_layer_parameters(U, d)
    naive = naive_layer_parameters(U, d)
    lines = [
        f"component=ltmi_layer U={U} d={d} params={ltmi}",
        f"component=naive_layer U={U} d={d} params={naive}",
        f"ratio={ltmi / naive:.6f}",
    ]
    if config_path is not None:
        config = load_config(config_path)
        data = D.load_split(config.task, config.data, "train")
        model = build_model(config, data, np.random.default_rng(config.seed))
        lines.append(f"component=model task={config.task} params={model.num_parameters()}")
    return lines


def _cmd_gen_data(args) -> int:
    for path in D.generate(args.task, args.seed, args.out):
        print(f"wrote {path}")
    config = preset(args.task, data=str(args.out), out=str(Path(args.out) / "run"), seed=args.seed)
    path = Path(args.out) / "run.cfg"
    path.write_text(config.to_text(), encoding="utf-8")
    print(f"wrote {path}")
    return 0


def _cmd_train(args) -> int:
    config = load_config(args.config)
    result = train(config)
    print(f"final_loss={result.final_loss!r}")
    if result.checkpoints:
        print(f"checkpoint={result.checkpoints[-1]}")
    return 0


def _cmd_eval(args) -> int:
    for line in format_metrics(evaluate_checkpoint(args.checkpoint, args.data, args.split)):
        print(line)
    return 0


def _cmd_params(args) -> int:
    for line in params_report(args.u, args.d, args.config):
        print(line)
    return 0


def _cmd_gradcheck(args) -> int:
    from ..gradcheck import REGISTRY, run_all

    names = args.case or list(REGISTRY)
    unknown = [n for n in names if n not in REGISTRY]
    if unknown:
        raise MiatError(f"unknown gradcheck cases: {unknown}")
    failed = 0
    for report in run_all(names):
        status = "pass" if report.passed else "fail"
        failed += not report.passed
        print(f"case={report.name} max_rel_error={report.max_rel_error:.3e} "
              f"worst={report.worst_tensor} entries={report.checked_entries} status={status}")
    if failed:
        raise NumericError(f"{failed} gradient check(s) above tolerance")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="miat", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset (train and held-out valid split) and a run.cfg")
    p.add_argument("--task", required=True, choices=TASKS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train from a key = value config file")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="valid", choices=D.SPLITS)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("params", help="parameter counts for the LTMI layer and the naive extension")
    p.add_argument("--u", type=int, default=REFERENCE_U)
    p.add_argument("--d", type=int, default=REFERENCE_D)
    p.add_argument("--config", help="also count the model a run config would build")
    p.set_defaults(func=_cmd_params)

    p = sub.add_parser("gradcheck", help="finite-difference check of every registered op and layer")
    p.add_argument("--case", action="append", help="restrict to the named case (repeatable)")
    p.set_defaults(func=_cmd_gradcheck)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    if args.command == "params" and (args.u < 1 or args.d < 1):
        print("error: --u and --d must be positive", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except MiatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

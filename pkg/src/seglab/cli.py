#!/usr/bin/env python3
"""Command-line entry point: verify, curves, train, sweep and gradcheck."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path
from typing import Any, Iterable, Sequence

from . import __version__
from .debuglog import log_event
from .errors import ConfigError, SeglabError
from .fields import DEFAULT_TAU, LabelField, LogitField, temperature_softmax, write_pgm
from .grad import DEFAULT_FD_STEP, gradcheck_suite
from .losses import PRESET_NAMES, build_loss
from .synthlab import (
    DEFAULT_EPOCHS,
    DEFAULT_LAMBDA_GRID,
    DEFAULT_LR,
    DEFAULT_SEEDS,
    Model,
    ScenarioName,
    default_scenario,
    make_scenario,
    summarize,
    sweep,
    train,
)
from .theory import DEFAULT_CURVE_POINTS, bias_curves, verification_suite

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3
DEFAULT_SWEEP_LOSSES = ("ce", "dice", "logdice", "ours-l1", "ours-kl")
_THREADS_RAW = os.environ.get("SEGLAB_THREADS")
try:
    _THREADS = int(_THREADS_RAW) if _THREADS_RAW is not None else 0
except ValueError:
    _THREADS = 0
if _THREADS < 0:
    _THREADS = 0


def _fmt(value: Any) -> str:
    if isinstance(value, bool) or value is None:
        return str(value)
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return format(value, ".9g")
    return str(value)


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _read_json_config(path: Path, required: bool) -> dict[str, Any]:
    try:
        text = path.read_text(encoding="utf-8")
    except Exception as exc:
        if required:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return {}
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return data


def _resolve_config_path(cli_args: list[str]) -> tuple[Path | None, bool]:
    """Config file from --config (required to exist) or SEGLAB_CONFIG (best effort)."""
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument("--config", type=Path)
    known, _ = parser.parse_known_args(cli_args)
    if known.config:
        return known.config.expanduser(), True
    env_path = os.environ.get("SEGLAB_CONFIG")
    if env_path:
        return Path(env_path).expanduser(), False
    return None, False


def _coerce(parser: argparse.ArgumentParser, action: argparse.Action, key: str, value: Any) -> Any:
    if action.nargs == 0:
        if not isinstance(value, bool):
            parser.error(f"config key {key} must be true or false, got {value!r}")
        return value
    if action.nargs == "+":
        if not isinstance(value, list) or not value:
            parser.error(f"config key {key} must be a non-empty list, got {value!r}")
        return [_coerce_scalar(parser, action, key, v) for v in value]
    return _coerce_scalar(parser, action, key, value)


def _coerce_scalar(parser: argparse.ArgumentParser, action: argparse.Action, key: str, value: Any) -> Any:
    if action.type is None:
        return value
    inexact = action.type is int and isinstance(value, float) and not value.is_integer()
    if inexact or isinstance(value, (bool, list, dict)):
        parser.error(f"bad value for config key {key}: {value!r}")
    try:
        return action.type(value)
    except (TypeError, ValueError):
        parser.error(f"bad value for config key {key}: {value!r}")


def _apply_config(parser: argparse.ArgumentParser, config: dict[str, Any], command: str) -> None:
    """Turn config keys (flag names with '_' for '-') into parser defaults; flags still win."""
    by_flag = {opt: action for action in parser._actions for opt in action.option_strings}
    defaults: dict[str, Any] = {}
    for key, value in config.items():
        if key == "command":
            if value != command:
                parser.error(f"config is for command {value!r}, not {command!r}")
            continue
        action = by_flag.get("--" + key.replace("_", "-"))
        if action is None or key == "config":
            parser.error(f"unknown config key: {key}")
        value = _coerce(parser, action, key, value)
        if action.choices is not None:
            values = value if isinstance(value, list) else [value]
            bad = [v for v in values if v not in action.choices]
            if bad:
                parser.error(f"bad value for config key {key}: {bad[0]!r}")
        defaults[action.dest] = value
    parser.set_defaults(**defaults)


def _common(parser: argparse.ArgumentParser, seed: int | None) -> None:
    parser.add_argument("--config", type=Path, help="JSON config file; keys are flag names with '_' for '-'.")
    parser.add_argument("--out", type=Path, default=Path("."), help="Output directory (default: current directory).")
    if seed is not None:
        parser.add_argument("--seed", type=int, default=seed, help=f"Base seed (default: {seed}).")


def _training(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--scenario",
        choices=[n.value for n in ScenarioName],
        default=ScenarioName.BINARY_IMBALANCED.value,
        help="Synthetic scenario.",
    )
    parser.add_argument("--lr", type=float, default=DEFAULT_LR, help=f"Step size, the initial one with --adaptive (default: {DEFAULT_LR}).")
    parser.add_argument("--epochs", type=int, default=DEFAULT_EPOCHS, help=f"Epochs (default: {DEFAULT_EPOCHS}).")
    parser.add_argument("--tau", type=float, default=DEFAULT_TAU, help=f"Softmax temperature (default: {DEFAULT_TAU}).")
    parser.add_argument("--class-separation", type=float, help="Override the scenario's class-mean distance.")
    parser.add_argument("--noise-sigma", type=float, help="Override the scenario's feature noise.")
    parser.add_argument(
        "--adaptive",
        action="store_true",
        help="Keep only steps that do not raise the loss, growing or halving the step size.",
    )


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="seglab",
        description="Verify, plot and train the label-marginal biases of segmentation losses.",
    )
    parser.add_argument("--version", action="version", version=f"seglab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    verify = sub.add_parser("verify", help="Run every numerical certificate and write verify.csv.")
    _common(verify, 0)
    verify.add_argument("--perturb-constant", type=float, default=0.0, help=argparse.SUPPRESS)

    curves = sub.add_parser("curves", help="Write the binary bias curves to curves.csv.")
    _common(curves, None)
    curves.add_argument("--y1", type=float, default=0.1, help="Ground-truth foreground proportion in (0, 1).")
    curves.add_argument("--points", type=int, default=DEFAULT_CURVE_POINTS, help="Number of curve rows.")

    train_p = sub.add_parser("train", help="Train the linear model on a scenario and write trace.csv.")
    _common(train_p, 1)
    _training(train_p)
    train_p.add_argument("--loss", choices=PRESET_NAMES, default="ce", help="Loss preset.")
    train_p.add_argument("--lambda", dest="lam", type=float, help="Regularizer weight for composite presets.")
    train_p.add_argument("--marginal-tau", type=float, help="Separate temperature for the predicted marginal.")

    sweep_p = sub.add_parser("sweep", help="Train every (loss, lambda, seed) and write sweep.csv and summary.csv.")
    _common(sweep_p, None)
    _training(sweep_p)
    sweep_p.add_argument("--losses", nargs="+", choices=PRESET_NAMES, default=list(DEFAULT_SWEEP_LOSSES))
    sweep_p.add_argument("--lambdas", nargs="+", type=float, default=list(DEFAULT_LAMBDA_GRID))
    sweep_p.add_argument("--seeds", nargs="+", type=int, default=list(DEFAULT_SEEDS))

    grad_p = sub.add_parser("gradcheck", help="Compare analytic and finite-difference gradients.")
    _common(grad_p, 0)
    grad_p.add_argument("--instances", type=int, default=10, help="Instances per loss.")
    grad_p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    grad_p.add_argument("--h", type=float, default=DEFAULT_FD_STEP, help="Central-difference step.")
    commands = {"verify": verify, "curves": curves, "train": train_p, "sweep": sweep_p, "gradcheck": grad_p}
    return parser, commands


def parse_args(argv: list[str]) -> tuple[argparse.Namespace, argparse.ArgumentParser]:
    parser, subparsers = build_parser()
    config_path, required = _resolve_config_path(argv)
    config: dict[str, Any] = {}
    if config_path is not None:
        try:
            config = _read_json_config(config_path, required)
        except ConfigError as exc:
            parser.error(str(exc))
    command = next((a for a in argv if a in subparsers), None)
    if command is None and isinstance(config.get("command"), str) and config["command"] in subparsers:
        command = config["command"]
        argv = [command, *argv]
    if command is not None and config:
        _apply_config(subparsers[command], config, command)
    args = parser.parse_args(argv)
    return args, subparsers[args.command]


def _scenario(args: argparse.Namespace, seed: int):
    overrides = {}
    if args.class_separation is not None:
        overrides["class_separation"] = args.class_separation
    if args.noise_sigma is not None:
        overrides["noise_sigma"] = args.noise_sigma
    return default_scenario(args.scenario, seed=seed, **overrides)


def cmd_verify(args: argparse.Namespace) -> int:
    reports = verification_suite(args.seed, args.perturb_constant, _THREADS)
    _write_csv(
        args.out / "verify.csv",
        ["check_id", "parameters", "max_violation", "status"],
        ([r.check_id, r.parameters, float(r.max_violation), "PASS" if r.passed else "FAIL"] for r in reports),
    )
    passed = sum(1 for r in reports if r.passed)
    print(f"verify: {passed}/{len(reports)} PASS")
    for report in reports:
        if not report.passed:
            print(f"FAIL {report.check_id} {report.parameters} max_violation={_fmt(float(report.max_violation))}")
    return EXIT_OK if passed == len(reports) else EXIT_FAIL


def cmd_curves(args: argparse.Namespace) -> int:
    table = bias_curves(args.y1, args.points)
    _write_csv(args.out / "curves.csv", ["p1", "db1", "kl", "l1"], table.rows())
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    scenario = _scenario(args, args.seed)
    data = make_scenario(scenario)
    spec = build_loss(args.loss, args.lam)
    k = scenario.num_classes
    trace = train(
        Model.zeros(k, scenario.feature_dim),
        spec,
        data,
        lr=args.lr,
        epochs=args.epochs,
        tau=args.tau,
        adaptive=args.adaptive,
        marginal_tau=args.marginal_tau,
    )
    header = ["iteration", "loss"] + [f"p{j + 1}" for j in range(k)] + [f"dsc_{j + 1}" for j in range(k)] + ["miou"]
    _write_csv(
        args.out / "trace.csv",
        header,
        ([row.epoch, row.loss, *row.marginal, *row.dsc, row.miou] for row in trace.rows),
    )
    write_pgm(args.out / "labels.pgm", data.labels)
    z = LogitField.like(data.labels, trace.model.logits(data.features))
    mask = temperature_softmax(z, args.tau).argmax()
    write_pgm(args.out / "mask.pgm", LabelField(data.labels.height, data.labels.width, k, mask))
    run = {
        "command": "train",
        "loss": spec.to_dict(),
        "scenario": scenario.to_dict(),
        "lr": args.lr,
        "epochs": args.epochs,
        "tau": args.tau,
        "marginal_tau": args.marginal_tau,
        "adaptive": args.adaptive,
        "status": trace.status,
    }
    (args.out / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if trace.diverged:
        print(f"diverged after {len(trace.rows)} epochs")
        return EXIT_DIVERGED
    m = trace.metrics
    print(f"metrics: mean_dsc={_fmt(m.mean_dsc)} mean_iou={_fmt(m.mean_iou)} p1={_fmt(trace.final_marginal[0])}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    scenario = _scenario(args, args.seeds[0])
    rows = sweep(
        scenario,
        args.losses,
        args.lambdas,
        args.seeds,
        args.lr,
        args.epochs,
        args.tau,
        threads=_THREADS,
        adaptive=args.adaptive,
    )
    k = scenario.num_classes
    nan = float("nan")
    header = ["loss", "lambda", "seed", "status", "final_loss", "mean_dsc", "mean_iou", "marginal_l1_error"]
    header += [f"p{j + 1}" for j in range(k)] + [f"dsc_{j + 1}" for j in range(k)]

    def cells(row):
        m = row.metrics
        marginal = list(row.marginal) or [nan] * k
        scores = [nan, nan, nan] if m is None else [m.mean_dsc, m.mean_iou, m.marginal_l1_error]
        dsc = [nan] * k if m is None else list(m.dsc_per_class)
        return [row.loss, row.lam, row.seed, row.status, row.final_loss, *scores, *marginal, *dsc]

    _write_csv(args.out / "sweep.csv", header, (cells(r) for r in rows))
    _write_csv(
        args.out / "summary.csv",
        ["loss", "lambda", "runs", "diverged", "mean_dsc", "mean_dsc_std", "mean_iou", "mean_iou_std",
         "marginal_l1_error", "marginal_l1_error_std", "p1", "p1_std"],
        (
            [s.loss, s.lam, s.runs, s.diverged, *s.mean_dsc, *s.mean_iou, *s.marginal_l1_error, *s.p1]
            for s in summarize(rows)
        ),
    )
    diverged = sum(1 for r in rows if r.status == "diverged")
    print(f"sweep: {len(rows)} runs, {diverged} diverged")
    return EXIT_DIVERGED if diverged else EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    rows = gradcheck_suite(args.seed, args.instances, args.tau, args.h)
    _write_csv(
        args.out / "gradcheck.csv",
        ["spec_id", "instance_seed", "max_rel_err", "status"],
        ([r.spec_id, r.instance_seed, r.max_rel_err, "PASS" if r.passed else "FAIL"] for r in rows),
    )
    failed = [r for r in rows if not r.passed]
    print(f"gradcheck: {len(rows) - len(failed)}/{len(rows)} PASS")
    return EXIT_FAIL if failed else EXIT_OK


_COMMANDS = {
    "verify": cmd_verify,
    "curves": cmd_curves,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args, parser = parse_args(argv)
    log_event("cli", "start", command=args.command)
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        return _COMMANDS[args.command](args)
    except SeglabError as exc:
        parser.error(str(exc))
    return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())

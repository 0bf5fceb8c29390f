"""Command-line entry point.

Every subcommand accepts ``--config FILE`` (TOML).  Values are resolved in the
order built-in defaults < config file < command-line flags.  The config file
may use the sections ``[dataset]``, ``[train]``, ``[sweep]`` and ``[run]``::

    [dataset]
    path = "data/ml-100k/u.data"
    format = "ml100k"
    test_fraction = 0.2

    [train]
    kind = "rfrecf"
    alpha = 0.025
    max_iters = 100

    [sweep]
    dropout_rate = [0.0, 0.5, 0.9]

    [run]
    seeds = [0, 1, 2]
    output_dir = "results/robustness"
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from .data import SplitSpec, fetch_ml100k
from .harness import (
    COMPARISON_COLUMNS,
    DEFAULT_PRIVACY_DELTA,
    DEFAULT_ROUND_CAP,
    SWEEP_AXES,
    ExperimentSpec,
    compare_communication,
    default_output_dir,
    run_experiment,
    write_csv,
)
from .model import TrainConfig
from .privacy import PrivacyConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("rfrec")

# flag name -> (section, key)
_FILE_KEYS = {
    "dataset": ("dataset", "path"),
    "format": ("dataset", "format"),
    "test_fraction": ("dataset", "test_fraction"),
    "split_seed": ("dataset", "split_seed"),
    "kind": ("train", "kind"),
    "d": ("train", "d"),
    "alpha": ("train", "alpha"),
    "lam": ("train", "lam"),
    "lambda_u": ("train", "lambda_u"),
    "lambda_v": ("train", "lambda_v"),
    "p": ("train", "p"),
    "max_iters": ("train", "max_iters"),
    "stop_eps": ("train", "stop_eps"),
    "dropout_rate": ("train", "dropout_rate"),
    "privacy_delta": ("train", "privacy_delta"),
    "privacy_scale": ("train", "privacy_scale"),
    "no_clip": ("train", "no_clip"),
    "init_std": ("train", "init_std"),
    "max_rounds": ("train", "max_rounds"),
    "seeds": ("run", "seeds"),
    "output_dir": ("run", "output_dir"),
    "workers": ("run", "workers"),
    "max_cells": ("run", "max_cells"),
}

_DEFAULTS = {
    "dataset": "data/ml-100k/u.data",
    "format": "ml100k",
    "test_fraction": 0.2,
    "split_seed": 0,
    "kind": "rfrec",
    "lambda_v": 0.1,
    "seeds": [0],
    "workers": 1,
    "max_cells": 256,
    "no_clip": False,
}


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _axis(text: str) -> tuple[str, list[float]]:
    name, sep, values = text.partition("=")
    name = name.strip()
    if not sep or name not in SWEEP_AXES:
        raise argparse.ArgumentTypeError(f"expected NAME=v1,v2 with NAME in {SWEEP_AXES}")
    return name, _floats(values)


def _common(p: argparse.ArgumentParser) -> None:
    # defaults are None so that unset flags fall through to the config file
    g = p.add_argument_group("dataset")
    g.add_argument("--config", type=Path, help="TOML file supplying any flag")
    g.add_argument("--dataset", help="ratings file, or planted:n=4,m=6,d=2,seed=0 for a synthetic one")
    g.add_argument("--format", choices=["ml100k", "ml1m", "csv", "internal"])
    g.add_argument("--test-fraction", type=float)
    g.add_argument("--split-seed", type=int)
    t = p.add_argument_group("training")
    t.add_argument("--kind", choices=["rfrec", "rfrecf", "fcf"])
    t.add_argument("--d", type=int)
    t.add_argument("--alpha", type=float, help="step size (default 0.05, or 0.025 for rfrecf)")
    t.add_argument("--lam", type=float, help="consensus penalty weight")
    t.add_argument("--lambda-u", type=float)
    t.add_argument("--lambda-v", type=float, help="item ridge for the fcf baseline")
    t.add_argument("--p", type=float, help="aggregation probability for rfrecf")
    t.add_argument("--max-iters", type=int)
    t.add_argument("--stop-eps", type=float)
    t.add_argument("--dropout-rate", type=float)
    t.add_argument("--privacy-delta", type=float)
    t.add_argument("--privacy-scale", type=float)
    t.add_argument("--no-clip", action="store_true", default=None, help="report unclipped predictions")
    t.add_argument("--init-std", type=float)
    t.add_argument("--max-rounds", type=int)
    r = p.add_argument_group("run")
    r.add_argument("--seeds", type=_ints, help="comma-separated replicate seeds")
    r.add_argument("--output-dir", type=Path, help="defaults to $RFREC_OUTPUT_DIR or ./results")
    r.add_argument("--workers", type=int)
    r.add_argument("--max-cells", type=int)
    r.add_argument("-v", "--verbose", action="store_true")


def _resolve(args: argparse.Namespace) -> dict:
    values = dict(_DEFAULTS)
    sweep = {}
    if args.config is not None:
        with open(args.config, "rb") as fh:
            doc = tomllib.load(fh)
        for flag, (section, key) in _FILE_KEYS.items():
            if key in doc.get(section, {}):
                values[flag] = doc[section][key]
        sweep = {k: list(v) for k, v in doc.get("sweep", {}).items()}
    for flag in _FILE_KEYS:
        v = getattr(args, flag, None)
        if v is not None:
            values[flag] = v
    for name, vals in getattr(args, "axis", None) or []:
        sweep[name] = vals
    values["sweep"] = sweep
    return values


def _spec(values: dict, kind: str | None = None, sweep: dict | None = None) -> ExperimentSpec:
    privacy = None
    if values.get("privacy_scale") is not None:
        privacy = PrivacyConfig(float(values.get("privacy_delta") or DEFAULT_PRIVACY_DELTA),
                                float(values["privacy_scale"]))
    train = {k: values[k] for k in ("d", "alpha", "lam", "lambda_u", "p", "max_iters", "stop_eps",
                                    "dropout_rate", "init_std", "max_rounds") if values.get(k) is not None}
    cfg = TrainConfig(**train, privacy=privacy, clip_predictions=not values["no_clip"])
    out = values.get("output_dir")
    return ExperimentSpec(
        dataset=str(values["dataset"]),
        format=values["format"],
        kind=kind or values["kind"],
        config=cfg,
        split=SplitSpec(float(values["test_fraction"]), int(values["split_seed"])),
        sweep=values["sweep"] if sweep is None else sweep,
        seeds=list(values["seeds"]),
        output_dir=Path(out) if out is not None else default_output_dir(),
        lambda_v=float(values["lambda_v"]),
        max_cells=int(values["max_cells"]),
        workers=int(values["workers"]),
    )


def _print_table(table) -> None:
    for row in table.summary():
        rmse = row["final_rmse_mean"]
        text = "n/a" if rmse is None else f"{rmse:.4f} +- {row['final_rmse_std']:.4f}"
        print(f"cell {row['cell']}: kind={row['kind']} alpha={row['alpha']} lam={row['lam']} "
              f"p={row['p']} dropout={row['dropout_rate']} scale={row['privacy_scale']} "
              f"ok={row['ok']}/{row['seeds']} rmse={text}")


def cmd_train(args) -> int:
    values = _resolve(args)
    table = run_experiment(_spec(values, sweep={}))
    _print_table(table)
    print(f"results written to {table.output_dir}")
    return 0 if all(r["status"] == "ok" for r in table.rows) else 1


def cmd_sweep(args) -> int:
    values = _resolve(args)
    table = run_experiment(_spec(values))
    _print_table(table)
    print(f"results written to {table.output_dir}")
    return 0


def cmd_privacy_sweep(args) -> int:
    values = _resolve(args)
    sweep = dict(values["sweep"])
    sweep.setdefault("scale", [0.02, 0.04, 0.06, 0.08])
    sweep.setdefault("delta", [values.get("privacy_delta") or DEFAULT_PRIVACY_DELTA])
    table = run_experiment(_spec(values, sweep=sweep))
    _print_table(table)
    return 0


def cmd_robustness_sweep(args) -> int:
    values = _resolve(args)
    sweep = dict(values["sweep"])
    sweep.setdefault("dropout_rate", [round(0.1 * k, 1) for k in range(10)])
    table = run_experiment(_spec(values, sweep=sweep))
    _print_table(table)
    return 0


def cmd_compare_comm(args) -> int:
    values = _resolve(args)
    specs = [_spec(values, kind=k, sweep={}) for k in args.kinds.split(",")]
    report = compare_communication(specs, cap=args.cap)
    for rec in report:
        print(f"{rec.kind:7s} rounds={rec.rounds} reached={rec.reached} "
              f"rmse={rec.final_rmse} status={rec.status} {rec.error}")
    out = specs[0].output_dir
    write_csv(Path(out) / "compare_comm.csv", COMPARISON_COLUMNS, [asdict(r) for r in report])
    return 0


def cmd_verify_theory(args) -> int:
    from .verify import run_suite

    report = run_suite(seed=args.seed, draws=args.draws, quick=args.quick)
    for rec in report.records:
        flag = "PASS" if rec.passed else "FAIL"
        print(f"{flag} {rec.name}: lhs={rec.lhs:.6g} rhs={rec.rhs:.6g} {rec.note}")
    out = Path(args.output_dir) if args.output_dir else default_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "theory_report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    return 0 if report.passed else 1


def cmd_fetch_data(args) -> int:
    path = fetch_ml100k(args.dest)
    print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rfrec", description="Federated matrix-factorization simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="one run per seed")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="cross product of sweep axes")
    _common(p)
    p.add_argument("--axis", type=_axis, action="append", help="NAME=v1,v2 (repeatable)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("privacy-sweep", help="sweep the Laplace scale (and clip threshold)")
    _common(p)
    p.add_argument("--axis", type=_axis, action="append")
    p.set_defaults(func=cmd_privacy_sweep)

    p = sub.add_parser("robustness-sweep", help="sweep the client dropout rate")
    _common(p)
    p.add_argument("--axis", type=_axis, action="append")
    p.set_defaults(func=cmd_robustness_sweep)

    p = sub.add_parser("compare-comm", help="communication rounds to the stop criterion")
    _common(p)
    p.add_argument("--kinds", default="rfrecf,rfrec,fcf")
    p.add_argument("--cap", type=int, default=DEFAULT_ROUND_CAP)
    p.set_defaults(func=cmd_compare_comm)

    p = sub.add_parser("verify-theory", help="theory checks on planted desk instances")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--draws", type=int, default=10_000)
    p.add_argument("--quick", action="store_true", help="shorter runs and fewer points")
    p.add_argument("--output-dir", type=Path)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_verify_theory)

    p = sub.add_parser("fetch-data", help="download MovieLens 100k")
    p.add_argument("--dest", type=Path, help="data directory (default ./data or $RFREC_DATA_DIR)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_fetch_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

"""Experiment orchestration: sweeps, replicate seeds, CSV outputs and the
communication comparison.

Every result row carries the fully resolved configuration so it can be rerun
on its own.  Wall-clock timings go to a separate ``timings.csv`` so that the
results table is bit-identical across repeated runs.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .data import FORMATS, RatingsDataset, SplitSpec, load_tabular, split
from .errors import RFRecError
from .model import TrainConfig
from .privacy import PrivacyConfig, budget
from .synthetic import planted_instance
from .trainers import KINDS, RunResult, run

log = logging.getLogger(__name__)

SWEEP_AXES = ("alpha", "lam", "p", "scale", "delta", "dropout_rate")
DEFAULT_PRIVACY_DELTA = 0.2
DEFAULT_ROUND_CAP = 200
OUTPUT_ENV = "RFREC_OUTPUT_DIR"

RESULT_COLUMNS = [
    "cell", "seed", "kind", "dataset", "format", "test_fraction", "split_seed",
    "d", "alpha", "lam", "lambda_u", "p", "max_iters", "stop_eps", "dropout_rate",
    "privacy_delta", "privacy_scale", "clip_predictions", "init_std", "max_rounds", "lambda_v",
    "status", "error", "stop_reason", "iterations", "comm_rounds", "messages", "bytes",
    "final_loss", "final_mae", "final_rmse", "epsilon",
]
HISTORY_COLUMNS = ["iter", "loss", "mae", "rmse", "comm_rounds"]


def default_output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "results"))


@dataclass
class ExperimentSpec:
    dataset: str = "data/ml-100k/u.data"
    format: str = "ml100k"
    kind: str = "rfrec"
    config: TrainConfig = field(default_factory=TrainConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    sweep: dict[str, list] = field(default_factory=dict)
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: Path | None = None
    lambda_v: float = 0.1
    max_cells: int = 256
    workers: int = 1
    write_history: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown trainer kind {self.kind!r}")
        unknown = set(self.sweep) - set(SWEEP_AXES)
        if unknown:
            raise ValueError(f"unknown sweep axes {sorted(unknown)}; allowed: {SWEEP_AXES}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.cell_count() > self.max_cells:
            raise ValueError(f"sweep has {self.cell_count()} cells, above the cap of {self.max_cells}")

    def cell_count(self) -> int:
        return math.prod(len(v) for v in self.sweep.values()) if self.sweep else 1

    def cells(self) -> list[TrainConfig]:
        """Cross product of the sweep axes applied to the base config."""
        axes = [a for a in SWEEP_AXES if self.sweep.get(a)]
        out = []
        for values in itertools.product(*(self.sweep[a] for a in axes)):
            out.append(apply_axes(self.config, dict(zip(axes, values))))
        return out


def apply_axes(cfg: TrainConfig, values: dict) -> TrainConfig:
    changes = {k: v for k, v in values.items() if k in ("alpha", "lam", "p", "dropout_rate")}
    if "scale" in values or "delta" in values:
        base = cfg.privacy
        delta = values.get("delta", base.delta if base else DEFAULT_PRIVACY_DELTA)
        scale = values.get("scale", base.scale if base else None)
        if scale is None:
            raise ValueError("a delta axis needs a Laplace scale (set privacy scale or a scale axis)")
        changes["privacy"] = PrivacyConfig(float(delta), float(scale))
    return replace(cfg, **changes)


# --- datasets -------------------------------------------------------------------


def _parse_planted(desc: str) -> dict:
    params = {}
    _, _, rest = desc.partition(":")
    for part in filter(None, rest.split(",")):
        key, _, val = part.partition("=")
        params[key.strip()] = float(val) if key.strip() in ("scale", "noise", "density") else int(val)
    return params


@lru_cache(maxsize=8)
def _load(dataset: str, fmt: str) -> RatingsDataset:
    if dataset.startswith("planted"):
        return planted_instance(**_parse_planted(dataset)).data
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}; expected one of {sorted(FORMATS)}")
    return load_tabular(dataset, FORMATS[fmt])


@lru_cache(maxsize=8)
def load_split(dataset: str, fmt: str, split_spec: SplitSpec) -> tuple[RatingsDataset, RatingsDataset]:
    """Load ``dataset`` (a path, or ``planted:n=..,m=..`` for a synthetic one) and split it."""
    return split(_load(dataset, fmt), split_spec)


# --- running --------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_columns(cfg: TrainConfig, kind: str) -> dict:
    cfg = cfg.for_kind(kind)
    return {
        "d": cfg.d, "alpha": cfg.alpha, "lam": cfg.lam, "lambda_u": cfg.lambda_u, "p": cfg.p,
        "max_iters": cfg.max_iters, "stop_eps": cfg.stop_eps, "dropout_rate": cfg.dropout_rate,
        "privacy_delta": cfg.privacy.delta if cfg.privacy else None,
        "privacy_scale": cfg.privacy.scale if cfg.privacy else None,
        "clip_predictions": cfg.clip_predictions, "init_std": cfg.init_std,
        "max_rounds": cfg.max_rounds,
    }


@dataclass
class CellOutcome:
    row: dict
    history: list
    seconds: float


def run_cell(spec: ExperimentSpec, cell: int, cfg: TrainConfig, seed: int) -> CellOutcome:
    cfg = replace(cfg, seed=seed).for_kind(spec.kind)
    row = {
        "cell": cell, "seed": seed, "kind": spec.kind, "dataset": spec.dataset, "format": spec.format,
        "test_fraction": spec.split.test_fraction, "split_seed": spec.split.seed,
        **config_columns(cfg, spec.kind), "lambda_v": spec.lambda_v if spec.kind == "fcf" else None,
        "epsilon": budget(cfg.privacy) if cfg.privacy else None,
    }
    start = time.perf_counter()
    history = []
    try:
        train, test = load_split(spec.dataset, spec.format, spec.split)
        res: RunResult = run(spec.kind, cfg, train, test if test.n_observed else None,
                             lambda_v=spec.lambda_v)
        history = res.history
        last = res.history[-1] if res.history else None
        row.update(
            status="ok", error="", stop_reason=res.stop_reason, iterations=res.iterations,
            comm_rounds=res.comm_log.rounds, messages=res.comm_log.messages, bytes=res.comm_log.bytes,
            final_loss=last.loss if last else None,
            final_mae=last.mae if last else None, final_rmse=last.rmse if last else None,
        )
    except (RFRecError, FloatingPointError, ValueError, OSError) as exc:
        status = "diverged" if isinstance(exc, FloatingPointError) else "error"
        log.warning("cell %d seed %d: %s", cell, seed, exc)
        row.update(status=status, error=str(exc))
    return CellOutcome(row, history, time.perf_counter() - start)


def _run_cell_args(args):
    return run_cell(*args)


@dataclass
class ResultTable:
    rows: list[dict]
    output_dir: Path | None = None

    def column(self, name: str) -> list:
        return [r.get(name) for r in self.rows]

    def summary(self) -> list[dict]:
        return summarize(self.rows)


def run_experiment(spec: ExperimentSpec) -> ResultTable:
    """Run every sweep cell for every seed and write the CSV outputs."""
    jobs = [(spec, c, cfg, s) for c, cfg in enumerate(spec.cells()) for s in spec.seeds]
    if spec.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            outcomes = list(pool.map(_run_cell_args, jobs))
    else:
        outcomes = [run_cell(*job) for job in jobs]
    table = ResultTable([o.row for o in outcomes], spec.output_dir)
    if spec.output_dir is not None:
        write_outputs(spec, outcomes)
    return table


def write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def write_outputs(spec: ExperimentSpec, outcomes: list[CellOutcome]) -> None:
    out = Path(spec.output_dir)
    rows = [o.row for o in outcomes]
    write_csv(out / "results.csv", RESULT_COLUMNS, rows)
    write_csv(out / "summary.csv", SUMMARY_COLUMNS, summarize(rows))
    write_csv(out / "timings.csv", ["cell", "seed", "seconds"],
              [{"cell": o.row["cell"], "seed": o.row["seed"], "seconds": o.seconds} for o in outcomes])
    if spec.write_history:
        for o in outcomes:
            hist = [{c: getattr(h, c) for c in HISTORY_COLUMNS} for h in o.history]
            write_csv(out / "history" / f"cell{o.row['cell']}-seed{o.row['seed']}.csv", HISTORY_COLUMNS, hist)


SUMMARY_METRICS = ("final_rmse", "final_mae", "comm_rounds", "iterations")
SUMMARY_COLUMNS = (
    ["cell", "kind", "alpha", "lam", "p", "dropout_rate", "privacy_delta", "privacy_scale", "seeds", "ok"]
    + [f"{m}_{s}" for m in SUMMARY_METRICS for s in ("mean", "std")]
)


def summarize(rows: list[dict]) -> list[dict]:
    """Mean and sample standard deviation across seeds for every cell."""
    out = []
    for cell in sorted({r["cell"] for r in rows}):
        group = [r for r in rows if r["cell"] == cell]
        ok = [r for r in group if r.get("status") == "ok"]
        first = group[0]
        rec = {k: first.get(k) for k in ("cell", "kind", "alpha", "lam", "p", "dropout_rate",
                                         "privacy_delta", "privacy_scale")}
        rec["seeds"] = len(group)
        rec["ok"] = len(ok)
        for m in SUMMARY_METRICS:
            vals = np.array([r[m] for r in ok if r.get(m) is not None], dtype=np.float64)
            rec[f"{m}_mean"] = float(vals.mean()) if vals.size else None
            rec[f"{m}_std"] = float(vals.std(ddof=1)) if vals.size > 1 else (0.0 if vals.size else None)
        out.append(rec)
    return out


# --- communication comparison ------------------------------------------------------


@dataclass
class CommComparison:
    kind: str
    rounds: int | None
    reached: bool
    stop_reason: str
    final_rmse: float | None
    status: str
    error: str = ""


def compare_communication(specs: list[ExperimentSpec], cap: int = DEFAULT_ROUND_CAP,
                          seed: int | None = None) -> list[CommComparison]:
    """Run each spec to its stop criterion or ``cap`` communication rounds."""
    if not specs:
        return []
    first = specs[0]
    for s in specs[1:]:
        if (s.dataset, s.format, s.split) != (first.dataset, first.format, first.split):
            raise ValueError("compared specs must share dataset and split")
        if s.config.stop_eps != first.config.stop_eps:
            raise ValueError("compared specs must share stop_eps")
    report = []
    for s in specs:
        cfg = replace(s.config, max_rounds=cap)
        outcome = run_cell(s, 0, cfg, s.seeds[0] if seed is None else seed)
        r = outcome.row
        report.append(CommComparison(
            kind=s.kind,
            rounds=r.get("comm_rounds"),
            reached=r.get("stop_reason") == "stop_eps",
            stop_reason=r.get("stop_reason") or "",
            final_rmse=r.get("final_rmse"),
            status=r["status"],
            error=r.get("error", ""),
        ))
    return report


COMPARISON_COLUMNS = [f.name for f in fields(CommComparison)]

"""Rating datasets: loading, serialization, splitting and error metrics."""

from __future__ import annotations

import io
import json
import logging
import math
import os
import subprocess
import sys
import tempfile
import urllib.request
import zipfile
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataFormatError, ShapeError
from .model import Observations, RatingRow

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FormatSpec:
    """How to read a delimited ratings file.

    ``columns`` names each field in order; only ``user``, ``item`` and
    ``rating`` are used.  ``delimiter=None`` splits on any whitespace.  Rows
    with a rating above ``max_value`` (or below ``min_value``) are dropped.
    ``internal`` marks the package's own format, whose first line is the
    header ``n m count lo hi`` and whose ids are already dense.
    """

    delimiter: str | None = "\t"
    columns: tuple[str, ...] = ("user", "item", "rating", "timestamp")
    skip_header: int = 0
    max_value: float | None = None
    min_value: float | None = None
    internal: bool = False

    def __post_init__(self):
        for col in ("user", "item", "rating"):
            if col not in self.columns:
                raise ValueError(f"columns must include {col!r}")


ML100K_FORMAT = FormatSpec("\t", ("user", "item", "rating", "timestamp"))
ML1M_FORMAT = FormatSpec("::", ("user", "item", "rating", "timestamp"))
CSV_FORMAT = FormatSpec(",", ("user", "item", "rating"))
INTERNAL_FORMAT = FormatSpec(None, ("user", "item", "rating"), internal=True)

FORMATS = {
    "ml100k": ML100K_FORMAT,
    "ml1m": ML1M_FORMAT,
    "csv": CSV_FORMAT,
    "internal": INTERNAL_FORMAT,
}


@dataclass(frozen=True)
class RatingsDataset:
    n_users: int
    n_items: int
    rows: tuple[RatingRow, ...]
    rating_bounds: tuple[float, float]
    name: str = ""
    user_ids: tuple | None = field(default=None, repr=False)
    item_ids: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))
        if len(self.rows) != self.n_users:
            raise ShapeError(f"{len(self.rows)} rows for n_users={self.n_users}")
        for i, row in enumerate(self.rows):
            if len(row) and row.items[-1] >= self.n_items:
                raise ShapeError(f"user {i}: item {row.items[-1]} >= n_items={self.n_items}")
        lo, hi = self.rating_bounds
        if lo > hi:
            raise ValueError(f"rating bounds ({lo}, {hi}) are inverted")

    @property
    def n_observed(self) -> int:
        return sum(len(r) for r in self.rows)

    @cached_property
    def obs(self) -> Observations:
        return Observations.from_rows(self.rows, self.n_items)

    def triples(self):
        for i, row in enumerate(self.rows):
            for j, r in zip(row.items.tolist(), row.ratings.tolist()):
                yield i, j, r


def _parse_id(tok: str):
    try:
        return int(tok)
    except ValueError:
        return tok


def _sort_key(x):
    return (isinstance(x, str), x)


def load_tabular(path, format_spec: FormatSpec = ML100K_FORMAT, name: str | None = None) -> RatingsDataset:
    """Parse a ratings file into a dataset with dense 0-based ids."""
    path = Path(path)
    fs = format_spec
    cols = {c: fs.columns.index(c) for c in ("user", "item", "rating")}
    need = max(cols.values()) + 1
    name = name or path.stem

    users, items, ratings = [], [], []
    header = None
    dropped = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if lineno <= fs.skip_header:
                continue
            line = line.strip()
            if not line:
                continue
            parts = line.split(fs.delimiter) if fs.delimiter else line.split()
            if fs.internal and header is None:
                if len(parts) != 5:
                    raise DataFormatError("expected header 'n m count lo hi'", lineno)
                try:
                    header = (int(parts[0]), int(parts[1]), int(parts[2]), float(parts[3]), float(parts[4]))
                except ValueError as exc:
                    raise DataFormatError(f"bad header: {exc}", lineno) from None
                continue
            if len(parts) < need:
                raise DataFormatError(f"expected at least {need} fields, got {len(parts)}", lineno)
            try:
                r = float(parts[cols["rating"]])
            except ValueError:
                raise DataFormatError(f"rating {parts[cols['rating']]!r} is not a number", lineno) from None
            if not math.isfinite(r):
                raise DataFormatError("rating is not finite", lineno)
            if (fs.max_value is not None and r > fs.max_value) or (
                fs.min_value is not None and r < fs.min_value
            ):
                dropped += 1
                continue
            u_tok, i_tok = parts[cols["user"]].strip(), parts[cols["item"]].strip()
            if fs.internal:
                try:
                    users.append(int(u_tok))
                    items.append(int(i_tok))
                except ValueError:
                    raise DataFormatError("internal format ids must be integers", lineno) from None
            else:
                users.append(_parse_id(u_tok))
                items.append(_parse_id(i_tok))
            ratings.append(r)

    if fs.internal and header is None or not ratings and not fs.internal:
        raise DataFormatError(f"{path}: no ratings found")
    if dropped:
        log.info("%s: dropped %d rows outside the value filter", path, dropped)

    if fs.internal:
        n, m, count, lo, hi = header
        if count != len(ratings):
            raise DataFormatError(f"header declares {count} ratings, file has {len(ratings)}")
        u = np.asarray(users, dtype=np.int64)
        it = np.asarray(items, dtype=np.int64)
        if u.size and (u.min() < 0 or u.max() >= n or it.min() < 0 or it.max() >= m):
            raise DataFormatError("id out of range of the header's n, m")
        return _assemble(u, it, np.asarray(ratings), n, m, (lo, hi), name, None, None)

    user_ids = sorted(set(users), key=_sort_key)
    item_ids = sorted(set(items), key=_sort_key)
    umap = {x: k for k, x in enumerate(user_ids)}
    imap = {x: k for k, x in enumerate(item_ids)}
    u = np.fromiter((umap[x] for x in users), dtype=np.int64, count=len(users))
    it = np.fromiter((imap[x] for x in items), dtype=np.int64, count=len(items))
    r = np.asarray(ratings, dtype=np.float64)
    bounds = (float(r.min()), float(r.max()))
    return _assemble(u, it, r, len(user_ids), len(item_ids), bounds, name, tuple(user_ids), tuple(item_ids))


def _assemble(u, it, r, n, m, bounds, name, user_ids, item_ids) -> RatingsDataset:
    order = np.lexsort((it, u))
    u, it, r = u[order], it[order], r[order]
    dup = (np.diff(u) == 0) & (np.diff(it) == 0)
    if np.any(dup):
        k = int(np.flatnonzero(dup)[0])
        raise DataFormatError(f"duplicate rating for user {u[k]}, item {it[k]}")
    splits = np.searchsorted(u, np.arange(n + 1))
    rows = tuple(RatingRow(it[a:b], r[a:b]) for a, b in zip(splits[:-1], splits[1:]))
    return RatingsDataset(n, m, rows, bounds, name, user_ids, item_ids)


def save_internal(data: RatingsDataset, path) -> None:
    """Write the internal text format; ``repr`` keeps every double bit-exact.

    When the dataset carries id remap tables they go to ``<path>.ids.json``.
    """
    path = Path(path)
    lo, hi = data.rating_bounds
    buf = io.StringIO()
    buf.write(f"{data.n_users} {data.n_items} {data.n_observed} {lo!r} {hi!r}\n")
    for i, j, r in data.triples():
        buf.write(f"{i} {j} {r!r}\n")
    path.write_text(buf.getvalue(), encoding="utf-8")
    if data.user_ids is not None:
        ids = {"user_ids": list(data.user_ids), "item_ids": list(data.item_ids)}
        Path(str(path) + ".ids.json").write_text(json.dumps(ids), encoding="utf-8")


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.2
    seed: int = 0
    strategy: str = "per-user-random"

    def __post_init__(self):
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in [0, 1)")
        if self.strategy != "per-user-random":
            raise ValueError(f"unsupported split strategy {self.strategy!r}")


def n_test_for(count: int, fraction: float) -> int:
    """Test ratings taken from a user with ``count`` ratings; at least one stays in train."""
    k = int(math.floor(fraction * count + 1e-9))
    return max(0, min(k, count - 1))


def split(data: RatingsDataset, spec: SplitSpec) -> tuple[RatingsDataset, RatingsDataset]:
    """Per-user random train/test partition sharing one index space."""
    rng = np.random.default_rng(spec.seed)
    train_rows, test_rows, keep = [], [], []
    for i, row in enumerate(data.rows):
        if len(row) == 0:
            continue
        k = n_test_for(len(row), spec.test_fraction)
        perm = rng.permutation(len(row))
        test_idx = np.sort(perm[:k])
        train_idx = np.sort(perm[k:])
        keep.append(i)
        train_rows.append(RatingRow(row.items[train_idx], row.ratings[train_idx]))
        test_rows.append(RatingRow(row.items[test_idx], row.ratings[test_idx]))
    if len(keep) < data.n_users:
        log.info("split: dropped %d users without ratings", data.n_users - len(keep))
    user_ids = tuple(data.user_ids[i] for i in keep) if data.user_ids is not None else None
    common = dict(n_users=len(keep), n_items=data.n_items, rating_bounds=data.rating_bounds,
                  user_ids=user_ids, item_ids=data.item_ids)
    train = RatingsDataset(rows=train_rows, name=f"{data.name}-train", **common)
    test = RatingsDataset(rows=test_rows, name=f"{data.name}-test", **common)
    return train, test


def error_metrics(ratings: np.ndarray, preds: np.ndarray) -> tuple[float, float]:
    ratings = np.asarray(ratings, dtype=np.float64)
    preds = np.asarray(preds, dtype=np.float64)
    if ratings.size == 0:
        raise ValueError("cannot evaluate on an empty test set")
    if ratings.shape != preds.shape:
        raise ShapeError(f"{ratings.shape} ratings vs {preds.shape} predictions")
    err = ratings - preds
    mae = float(np.mean(np.abs(err)))
    # scale before squaring so tiny errors do not underflow
    peak = float(np.max(np.abs(err)))
    rmse = peak * float(np.sqrt(np.mean((err / peak) ** 2))) if peak > 0 else 0.0
    # power-mean inequality; slack for rounding when all errors are equal
    assert rmse >= mae * (1 - 1e-12), (mae, rmse)
    return mae, rmse


def evaluate(user_vecs: np.ndarray, item_mat: np.ndarray, test: RatingsDataset, clip: bool = True):
    """MAE and RMSE of ``u_i . v_bar_j`` over every test rating."""
    obs = test.obs
    if len(obs) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    preds = np.einsum("kd,dk->k", user_vecs[obs.users], item_mat[:, obs.items])
    if not np.all(np.isfinite(preds)):
        raise FloatingPointError("non-finite predictions")
    if clip:
        preds = np.clip(preds, *test.rating_bounds)
    return error_metrics(obs.ratings, preds)


def from_triples(triples: Sequence[tuple[int, int, float]], n: int, m: int,
                 bounds: tuple[float, float] | None = None, name: str = "") -> RatingsDataset:
    """Build a dataset from dense ``(user, item, rating)`` triples."""
    arr = np.asarray(triples, dtype=np.float64).reshape(-1, 3)
    u = arr[:, 0].astype(np.int64)
    it = arr[:, 1].astype(np.int64)
    r = arr[:, 2]
    if bounds is None:
        bounds = (float(r.min()), float(r.max())) if r.size else (0.0, 0.0)
    return _assemble(u, it, r, n, m, bounds, name, None, None)


# --- MovieLens 100k download ----------------------------------------------------

ML100K_URL = "https://files.grouplens.org/datasets/movielens/ml-100k.zip"
_WHEEL_SPEC = "recbole==1.2.1"
_WHEEL_MEMBER = "recbole/dataset_example/ml-100k/ml-100k.inter"


def default_data_dir() -> Path:
    return Path(os.environ.get("RFREC_DATA_DIR", Path.cwd() / "data"))


def fetch_ml100k(dest: Path | None = None, timeout: float = 30.0) -> Path:
    """Return the path of ``ml-100k/u.data``, downloading it when absent.

    Tries the GroupLens archive first.  If that host is unreachable, falls back
    to the copy bundled in a published Python wheel (same 100000 rows, a typed
    header line that is stripped).
    """
    dest = Path(dest) if dest is not None else default_data_dir()
    target = dest / "ml-100k" / "u.data"
    if target.exists():
        return target
    target.parent.mkdir(parents=True, exist_ok=True)
    try:
        with urllib.request.urlopen(ML100K_URL, timeout=timeout) as resp:
            payload = resp.read()
        with zipfile.ZipFile(io.BytesIO(payload)) as zf:
            target.write_bytes(zf.read("ml-100k/u.data"))
        return target
    except OSError as exc:
        log.warning("GroupLens download failed (%s); trying the wheel mirror", exc)

    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "--only-binary=:all:",
             "-d", tmp, _WHEEL_SPEC],
            check=True, capture_output=True, timeout=600,
        )
        wheel = next(Path(tmp).glob("*.whl"))
        with zipfile.ZipFile(wheel) as zf:
            lines = zf.read(_WHEEL_MEMBER).decode("utf-8").splitlines()
    body = "\n".join(lines[1:]) + "\n"
    target.write_text(body, encoding="utf-8")
    return target

"""Model parameters, the regularized objective and its exact gradients.

Each client ``i`` owns a user vector ``u_i`` (length ``d``) and a private copy of
the item matrix ``V_(i)`` (``d x m``).  The server holds the average item matrix
``V_bar``.  The training objective is::

    F(x) = sum_i f_i(x_i) + lam * psi(x)
    f_i  = sum_{j observed} (r_ij - u_i . v_j)^2 + lambda_u * |u_i|^2
    psi  = 1/2 * sum_i |V_(i) - V_bar|_F^2

Losses and item-gradients are restricted to the observed entries of each
client's rating row; unobserved columns contribute nothing to ``f_i``.

Two flavours of every computation live here: per-client functions operating
on :class:`LocalModel` / :class:`RatingRow` (the reference surface), and
``batch_*`` functions over stacked arrays ``U`` (``n x d``) and ``V``
(``n x d x m``) used by the trainers.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateClientError,
    InvalidProbabilityError,
    NoParticipantsError,
    ShapeError,
)
from .privacy import PrivacyConfig


@dataclass(frozen=True)
class RatingRow:
    """Observed ``(item, rating)`` pairs of one user, items strictly increasing."""

    items: np.ndarray
    ratings: np.ndarray

    def __post_init__(self):
        items = np.asarray(self.items, dtype=np.int64).reshape(-1)
        ratings = np.asarray(self.ratings, dtype=np.float64).reshape(-1)
        if items.shape != ratings.shape:
            raise ShapeError(
                f"{items.size} item indices but {ratings.size} ratings"
            )
        if items.size and (items[0] < 0 or np.any(np.diff(items) <= 0)):
            raise ValueError("item indices must be non-negative and strictly increasing")
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "ratings", ratings)

    @classmethod
    def from_pairs(cls, pairs) -> "RatingRow":
        pairs = sorted(pairs)
        return cls([j for j, _ in pairs], [r for _, r in pairs])

    def __len__(self) -> int:
        return int(self.items.size)


@dataclass
class LocalModel:
    """One client's parameters: ``user_vec`` (d,) and ``item_mat`` (d, m)."""

    user_vec: np.ndarray
    item_mat: np.ndarray

    def __post_init__(self):
        self.user_vec = np.asarray(self.user_vec, dtype=np.float64)
        self.item_mat = np.asarray(self.item_mat, dtype=np.float64)
        if self.user_vec.ndim != 1 or self.item_mat.ndim != 2:
            raise ShapeError("user_vec must be 1-D and item_mat 2-D")
        if self.item_mat.shape[0] != self.user_vec.shape[0]:
            raise ShapeError(
                f"user_vec has length {self.user_vec.shape[0]} but item_mat "
                f"has {self.item_mat.shape[0]} rows"
            )

    @property
    def d(self) -> int:
        return self.user_vec.shape[0]

    @property
    def m(self) -> int:
        return self.item_mat.shape[1]

    def copy(self) -> "LocalModel":
        return LocalModel(self.user_vec.copy(), self.item_mat.copy())


@dataclass
class GlobalState:
    """The server's average item matrix ``V_bar`` (d, m)."""

    avg_item_mat: np.ndarray

    def __post_init__(self):
        self.avg_item_mat = np.asarray(self.avg_item_mat, dtype=np.float64)
        if self.avg_item_mat.ndim != 2:
            raise ShapeError("avg_item_mat must be 2-D")

    @property
    def shape(self) -> tuple[int, int]:
        return self.avg_item_mat.shape


DEFAULT_ALPHA = {"rfrec": 0.05, "rfrecf": 0.025, "fcf": 0.05}


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters shared by every trainer.

    ``lam`` is the consensus penalty weight (``lambda`` is a Python keyword).
    ``alpha=None`` means the trainer's default step size (see ``DEFAULT_ALPHA``).
    ``max_rounds`` optionally caps the number of communication rounds.
    """

    d: int = 20
    alpha: float | None = None
    lam: float = 10.0
    lambda_u: float = 0.1
    p: float = 0.5
    max_iters: int = 100
    stop_eps: float = 1e-4
    seed: int = 0
    dropout_rate: float = 0.0
    privacy: PrivacyConfig | None = None
    clip_predictions: bool = True
    init_std: float = 0.01
    max_rounds: int | None = None

    def validate(self, kind: str | None = None) -> "TrainConfig":
        if self.d < 1:
            raise ValueError("d must be a positive integer")
        if self.alpha is None:
            if kind is None:
                raise ValueError("alpha is unset; resolve it with for_kind()")
            return self.for_kind(kind).validate(kind)
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        if self.lambda_u < 0:
            raise ValueError("lambda_u must be non-negative")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")
        if not self.stop_eps > 0:
            raise ValueError("stop_eps must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.init_std < 0:
            raise ValueError("init_std must be non-negative")
        if kind == "rfrecf" and not 0.0 < self.p < 1.0:
            raise InvalidProbabilityError(f"p={self.p} must lie strictly inside (0, 1)")
        return self

    def for_kind(self, kind: str) -> "TrainConfig":
        """Fill an unset ``alpha`` with the default for trainer ``kind``."""
        if self.alpha is not None:
            return self
        return replace(self, alpha=DEFAULT_ALPHA[kind])

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


def _check_row(model: LocalModel, row: RatingRow) -> None:
    if len(row) == 0:
        raise DegenerateClientError("client has no observed ratings")
    if row.items[-1] >= model.m:
        raise ShapeError(
            f"item index {row.items[-1]} out of range for item_mat with {model.m} columns"
        )


def local_loss(model: LocalModel, row: RatingRow, lambda_u: float) -> float:
    """``f_i``: squared error over observed entries plus ``lambda_u |u_i|^2``."""
    _check_row(model, row)
    pred = model.user_vec @ model.item_mat[:, row.items]
    resid = row.ratings - pred
    return float(resid @ resid + lambda_u * (model.user_vec @ model.user_vec))


def regularizer(models: Sequence[LocalModel], global_state: GlobalState) -> float:
    """``psi = 1/2 sum_i |V_(i) - V_bar|_F^2`` against the supplied ``V_bar``."""
    vbar = global_state.avg_item_mat
    total = 0.0
    for mdl in models:
        if mdl.item_mat.shape != vbar.shape:
            raise ShapeError(
                f"item_mat shape {mdl.item_mat.shape} != global shape {vbar.shape}"
            )
        diff = mdl.item_mat - vbar
        total += float(np.sum(diff * diff))
    return 0.5 * total


def grad_f(model: LocalModel, row: RatingRow, lambda_u: float):
    """Exact gradient of ``f_i``; returns ``(grad_u, grad_V)``."""
    _check_row(model, row)
    cols = model.item_mat[:, row.items]
    resid = row.ratings - model.user_vec @ cols
    grad_u = -2.0 * cols @ resid + 2.0 * lambda_u * model.user_vec
    grad_v = np.zeros_like(model.item_mat)
    grad_v[:, row.items] = -2.0 * np.outer(model.user_vec, resid)
    return grad_u, grad_v


def grad_psi(model: LocalModel, global_state: GlobalState) -> np.ndarray:
    """Gradient of ``psi_i`` with ``V_bar`` held fixed: ``V_(i) - V_bar``.

    When ``V_bar`` is the exact mean of all item matrices this coincides with
    the full derivative of ``psi``, since the mean's own contribution sums to
    zero.
    """
    if model.item_mat.shape != global_state.shape:
        raise ShapeError(
            f"item_mat shape {model.item_mat.shape} != global shape {global_state.shape}"
        )
    return model.item_mat - global_state.avg_item_mat


def aggregate(item_mats: Sequence[np.ndarray]) -> GlobalState:
    """Entrywise mean of the given item matrices."""
    if len(item_mats) == 0:
        raise NoParticipantsError("cannot aggregate an empty cohort")
    first = np.asarray(item_mats[0], dtype=np.float64)
    acc = first.copy()
    for mat in item_mats[1:]:
        mat = np.asarray(mat, dtype=np.float64)
        if mat.shape != first.shape:
            raise ShapeError(f"shape {mat.shape} != {first.shape}")
        acc += mat
    return GlobalState(acc / len(item_mats))


def predict(user_vec, item_col, bounds: tuple[float, float] | None = None) -> float:
    """Inner-product rating, clamped to ``bounds`` when given."""
    user_vec = np.asarray(user_vec, dtype=np.float64)
    item_col = np.asarray(item_col, dtype=np.float64)
    if user_vec.shape != item_col.shape or user_vec.ndim != 1:
        raise ShapeError(f"cannot take inner product of {user_vec.shape} and {item_col.shape}")
    val = float(user_vec @ item_col)
    if bounds is not None:
        lo, hi = bounds
        val = min(max(val, lo), hi)
    return val


# --- stacked-array versions used by the trainers ---------------------------


@dataclass(frozen=True)
class Observations:
    """Flattened observed entries of a whole dataset, sorted by user."""

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    n: int
    m: int
    counts: np.ndarray = field(repr=False)

    @classmethod
    def from_rows(cls, rows: Sequence[RatingRow], m: int) -> "Observations":
        counts = np.array([len(r) for r in rows], dtype=np.int64)
        users = np.repeat(np.arange(len(rows), dtype=np.int64), counts)
        if len(rows):
            items = np.concatenate([r.items for r in rows])
            ratings = np.concatenate([r.ratings for r in rows])
        else:
            items = np.zeros(0, dtype=np.int64)
            ratings = np.zeros(0)
        return cls(users, items, ratings, len(rows), m, counts)

    def __len__(self) -> int:
        return int(self.users.size)


def _check_stack(U: np.ndarray, V: np.ndarray, obs: Observations) -> None:
    if U.ndim != 2 or V.ndim != 3:
        raise ShapeError("U must be (n, d) and V must be (n, d, m)")
    n, d = U.shape
    if V.shape != (n, d, obs.m) or n != obs.n:
        raise ShapeError(
            f"inconsistent shapes U{U.shape}, V{V.shape} for n={obs.n}, m={obs.m}"
        )


def gather_item_cols(V: np.ndarray, obs: Observations) -> np.ndarray:
    """Rows ``k`` hold ``V_(users[k])[:, items[k]]``; shape (N, d)."""
    return V[obs.users, :, obs.items]


def batch_residuals(U: np.ndarray, V: np.ndarray, obs: Observations) -> np.ndarray:
    cols = gather_item_cols(V, obs)
    return obs.ratings - np.einsum("kd,kd->k", U[obs.users], cols)


def batch_task_loss(U, V, obs: Observations, lambda_u: float) -> float:
    """``sum_i f_i``."""
    _check_stack(U, V, obs)
    resid = batch_residuals(U, V, obs)
    return float(resid @ resid + lambda_u * np.sum(U * U))


def batch_grad_f(U, V, obs: Observations, lambda_u: float):
    """Gradients of ``f`` for all clients.

    Returns ``(grad_U, grad_obs)`` where ``grad_obs[k]`` is the gradient
    column of ``V_(users[k])`` at item ``items[k]``; every other entry of the
    item-gradient is zero.
    """
    _check_stack(U, V, obs)
    cols = gather_item_cols(V, obs)
    uk = U[obs.users]
    resid = obs.ratings - np.einsum("kd,kd->k", uk, cols)
    grad_u = 2.0 * lambda_u * U
    np.add.at(grad_u, obs.users, -2.0 * resid[:, None] * cols)
    grad_obs = -2.0 * resid[:, None] * uk
    return grad_u, grad_obs


def batch_regularizer(V: np.ndarray, vbar: np.ndarray | None = None) -> float:
    """``psi`` for stacked item matrices; ``vbar`` defaults to their mean."""
    if vbar is None:
        vbar = V.mean(axis=0)
    if vbar.shape != V.shape[1:]:
        raise ShapeError(f"V_bar shape {vbar.shape} != {V.shape[1:]}")
    total = 0.0
    for mat in V:
        diff = mat - vbar
        total += float(np.sum(diff * diff))
    return 0.5 * total


def batch_objective(U, V, obs: Observations, lambda_u: float, lam: float) -> float:
    """``F = sum_i f_i + lam * psi`` with ``V_bar`` the exact mean."""
    return batch_task_loss(U, V, obs, lambda_u) + lam * batch_regularizer(V)


def batch_grad_F(U, V, obs: Observations, lambda_u: float, lam: float):
    """Dense gradient of ``F`` with respect to ``(U, V)``."""
    grad_u, grad_obs = batch_grad_f(U, V, obs, lambda_u)
    grad_v = lam * (V - V.mean(axis=0))
    grad_v[obs.users, :, obs.items] += grad_obs
    return grad_u, grad_v


def models_from_stack(U: np.ndarray, V: np.ndarray) -> list[LocalModel]:
    """Per-client :class:`LocalModel` views onto stacked arrays (no copy)."""
    return [LocalModel(U[i], V[i]) for i in range(U.shape[0])]

"""Alternating gradient-exchange federated MF baseline.

Clients hold their user vectors; the server holds one shared item matrix.
Each round a client steps ``u_i`` on its own ratings, then sends the
per-rating quantities ``h(i, j) = (r_ij - u_i . v_j) u_i`` for its observed
items.  The server sums them into the item gradient
``-2 sum_i h(i, j) + 2 lambda_v v_j``, steps ``V`` and broadcasts it back.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .comm import DOWNLOAD, UPLOAD, CommEvent
from .errors import DivergenceError, ShapeError
from .model import Observations, TrainConfig


@dataclass
class FcfState:
    U: np.ndarray
    V: np.ndarray
    lambda_u: float = 0.1
    lambda_v: float = 0.1
    iter: int = 0
    last_delta: float | None = None
    dropout_rng: np.random.Generator | None = None

    def __post_init__(self):
        self.U = np.asarray(self.U, dtype=np.float64)
        self.V = np.asarray(self.V, dtype=np.float64)
        if self.U.ndim != 2 or self.V.ndim != 2 or self.U.shape[1] != self.V.shape[0]:
            raise ShapeError(f"U{self.U.shape} and V{self.V.shape} are inconsistent")
        if self.lambda_u < 0 or self.lambda_v < 0:
            raise ValueError("lambda_u and lambda_v must be non-negative")

    @property
    def user_vecs(self) -> np.ndarray:
        return self.U

    @property
    def item_mat(self) -> np.ndarray:
        return self.V


def fcf_init(cfg: TrainConfig, obs: Observations, lambda_v: float = 0.1) -> FcfState:
    """Same initial streams as the federated trainers: per-client ``u_i``, global ``V``."""
    from .trainers import _DROPOUT, _INIT_CLIENT, _INIT_GLOBAL, stream

    U = np.empty((obs.n, cfg.d))
    for i in range(obs.n):
        U[i] = stream(cfg.seed, _INIT_CLIENT, i).normal(0.0, cfg.init_std, cfg.d)
    V = stream(cfg.seed, _INIT_GLOBAL).normal(0.0, cfg.init_std, (cfg.d, obs.m))
    return FcfState(U, V, cfg.lambda_u, lambda_v, dropout_rng=stream(cfg.seed, _DROPOUT))


def fcf_objective(state: FcfState, obs: Observations) -> float:
    """``J = sum_obs (r - u.v)^2 + lambda_u sum |u_i|^2 + lambda_v sum |v_j|^2``."""
    resid = obs.ratings - np.einsum("kd,dk->k", state.U[obs.users], state.V[:, obs.items])
    return float(
        resid @ resid
        + state.lambda_u * np.sum(state.U**2)
        + state.lambda_v * np.sum(state.V**2)
    )


def fcf_round(state: FcfState, data, alpha: float, dropout_rate: float = 0.0):
    """One alternating round; mutates ``state`` and returns ``(state, comm_events)``.

    ``state.last_delta`` records the relative change of the shared item matrix,
    the quantity the stop criterion compares against ``stop_eps``.
    """
    from .trainers import as_observations

    if not alpha > 0:
        raise ValueError("alpha must be positive")
    obs = as_observations(data)
    U, V = state.U, state.V
    n, d = U.shape
    if V.shape[1] != obs.m or n != obs.n:
        raise ShapeError(f"state shapes U{U.shape}, V{V.shape} do not match data ({obs.n}, {obs.m})")

    if dropout_rate > 0.0:
        rng = state.dropout_rng or np.random.default_rng(0)
        cohort = rng.random(n) >= dropout_rate
    else:
        cohort = np.ones(n, dtype=bool)
    keep = cohort[obs.users]
    users, items, ratings = obs.users[keep], obs.items[keep], obs.ratings[keep]

    # client phase: step u_i, then form h(i, j) with the updated vector
    cols = V[:, items].T
    resid = ratings - np.einsum("kd,kd->k", U[users], cols)
    grad_u = 2.0 * state.lambda_u * U
    np.add.at(grad_u, users, -2.0 * resid[:, None] * cols)
    U[cohort] -= alpha * grad_u[cohort]
    uk = U[users]
    h = (ratings - np.einsum("kd,kd->k", uk, cols))[:, None] * uk

    # server phase
    hsum = np.zeros((obs.m, d))
    np.add.at(hsum, items, h)
    grad_v = -2.0 * hsum.T + 2.0 * state.lambda_v * V
    old_norm = np.linalg.norm(V)
    step = alpha * grad_v
    V -= step
    state.last_delta = float(np.linalg.norm(step) / old_norm) if old_norm > 0 else float("inf")
    if not (np.all(np.isfinite(U)) and np.all(np.isfinite(V))):
        bad = np.flatnonzero(~np.isfinite(U).all(axis=1))
        raise DivergenceError(int(bad[0]) if bad.size else -1, state.iter)

    members = int(cohort.sum())
    events = [
        CommEvent(state.iter, UPLOAD, members, (d, obs.m), skipped=members == 0),
        CommEvent(state.iter, DOWNLOAD, n, (d, obs.m)),
    ]
    state.iter += 1
    return state, events

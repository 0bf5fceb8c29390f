"""RFRec (local gradient descent) and RFRecF (non-uniform SGD) trainers.

Both trainers keep every client's parameters stacked: ``U`` is ``(n, d)`` and
``V`` is ``(n, d, m)`` with ``V[i]`` the local item matrix of client ``i``.
Each client also remembers which server average it last received, so that
clients that miss an aggregation keep stepping against a stale ``V_bar``.

Randomness is drawn from independent streams derived from ``cfg.seed``:
per-client initialisation, the global initialisation, the shared ``zeta``
draws, dropout cohorts and per-client privacy noise.  Identical ``(cfg, data)``
therefore reproduce bit-identical trajectories.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .comm import DOWNLOAD, UPLOAD, CommEvent, CommLog
from .errors import DivergenceError, InvalidProbabilityError
from .model import (
    GlobalState,
    LocalModel,
    Observations,
    TrainConfig,
    batch_grad_f,
    batch_regularizer,
    batch_task_loss,
    grad_f,
    models_from_stack,
)
from .privacy import perturb

log = logging.getLogger(__name__)

KINDS = ("rfrec", "rfrecf", "fcf")

# spawn keys for the independent random streams
_INIT_CLIENT, _INIT_GLOBAL, _ZETA, _DROPOUT, _NOISE = range(5)


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def as_observations(data) -> Observations:
    if isinstance(data, Observations):
        return data
    return data.obs


@dataclass
class TrainerState:
    U: np.ndarray
    V: np.ndarray
    vbar: np.ndarray
    seed: int
    iter: int = 0
    prev_zeta: int | None = None
    zeta_seq: list[int] = field(default_factory=list)
    # server-side bookkeeping of which average each client holds
    version: int = 0
    client_version: np.ndarray = None
    history: dict = field(default_factory=dict)
    last_cohort: np.ndarray = None
    zeta_rng: np.random.Generator = None
    dropout_rng: np.random.Generator = None
    noise_rngs: dict = field(default_factory=dict)
    # task steps taken since the last fresh aggregation
    fresh_work: int = 1

    def __post_init__(self):
        n = self.U.shape[0]
        if self.client_version is None:
            self.client_version = np.zeros(n, dtype=np.int64)
        if not self.history:
            self.history = {self.version: self.vbar}
        if self.last_cohort is None:
            self.last_cohort = np.ones(n, dtype=bool)
        if self.zeta_rng is None:
            self.zeta_rng = stream(self.seed, _ZETA)
        if self.dropout_rng is None:
            self.dropout_rng = stream(self.seed, _DROPOUT)

    @property
    def n(self) -> int:
        return self.U.shape[0]

    @property
    def d(self) -> int:
        return self.U.shape[1]

    @property
    def m(self) -> int:
        return self.V.shape[2]

    @property
    def models(self) -> list[LocalModel]:
        return models_from_stack(self.U, self.V)

    @property
    def global_state(self) -> GlobalState:
        return GlobalState(self.vbar)

    def client_vbar(self, i: int) -> np.ndarray:
        return self.history[int(self.client_version[i])]

    def noise_rng(self, i: int) -> np.random.Generator:
        rng = self.noise_rngs.get(i)
        if rng is None:
            rng = self.noise_rngs[i] = stream(self.seed, _NOISE, i)
        return rng


@dataclass
class StepOutcome:
    comm_events: list[CommEvent]
    zeta: int | None = None
    global_delta: float | None = None
    aggregated: bool = False
    skipped: bool = False


def init_state(cfg: TrainConfig, data) -> TrainerState:
    """Draw ``u_i``, ``V_(i)`` and ``V_bar`` i.i.d. from ``N(0, init_std^2)``."""
    obs = as_observations(data)
    n, m, d = obs.n, obs.m, cfg.d
    U = np.empty((n, d))
    V = np.empty((n, d, m))
    for i in range(n):
        rng = stream(cfg.seed, _INIT_CLIENT, i)
        U[i] = rng.normal(0.0, cfg.init_std, d)
        V[i] = rng.normal(0.0, cfg.init_std, (d, m))
    vbar = stream(cfg.seed, _INIT_GLOBAL).normal(0.0, cfg.init_std, (d, m))
    return TrainerState(U=U, V=V, vbar=vbar, seed=cfg.seed)


# --- building blocks --------------------------------------------------------


def _sample_cohort(state: TrainerState, rate: float) -> np.ndarray:
    if rate <= 0.0:
        return np.ones(state.n, dtype=bool)
    return state.dropout_rng.random(state.n) >= rate


def _relative_change(new: np.ndarray, old: np.ndarray) -> float:
    denom = np.linalg.norm(old)
    if denom == 0.0:
        return float("inf")
    return float(np.linalg.norm(new - old) / denom)


def _first_bad_client(state: TrainerState) -> int:
    bad = ~np.isfinite(state.U).all(axis=1)
    bad |= ~np.isfinite(state.V).all(axis=(1, 2))
    idx = np.flatnonzero(bad)
    return int(idx[0]) if idx.size else -1


def _check_finite(state: TrainerState, arr: np.ndarray, owners: np.ndarray | None = None,
                  what: str = "parameters") -> None:
    """Raise :class:`DivergenceError` naming the first client with a non-finite entry.

    ``owners[k]`` is the client of row ``k``; by default row ``k`` is client ``k``.
    ``-1`` is reported when the fault cannot be attributed (e.g. in ``V_bar``).
    """
    if np.all(np.isfinite(arr)):
        return
    if arr.ndim >= 2 and arr.shape[0] == (state.n if owners is None else owners.size):
        rows = np.flatnonzero(~np.isfinite(arr.reshape(arr.shape[0], -1)).all(axis=1))
        client = int(rows[0] if owners is None else owners[rows[0]])
    else:
        client = _first_bad_client(state)
    raise DivergenceError(client, state.iter, what)


def _loss_culprit(U: np.ndarray, V: np.ndarray, obs: Observations) -> int:
    """First client whose squared-error sum is non-finite (``-1`` if none)."""
    with np.errstate(all="ignore"):
        if V.ndim == 3:
            cols = V[obs.users, :, obs.items]
        else:
            cols = V[:, obs.items].T
        resid = obs.ratings - np.einsum("kd,kd->k", U[obs.users], cols)
        per_client = np.bincount(obs.users, weights=resid * resid, minlength=obs.n)
        per_client += np.sum(U * U, axis=1)
    bad = np.flatnonzero(~np.isfinite(per_client))
    return int(bad[0]) if bad.size else -1


def _task_step(state: TrainerState, obs: Observations, lambda_u: float, step: float) -> None:
    grad_u, grad_obs = batch_grad_f(state.U, state.V, obs, lambda_u)
    _check_finite(state, grad_u, what="gradient")
    _check_finite(state, grad_obs, obs.users, "gradient")
    state.U -= step * grad_u
    state.V[obs.users, :, obs.items] -= step * grad_obs
    _check_finite(state, state.U)
    state.fresh_work += 1


def _pull_to_average(state: TrainerState, coef: float, mask: np.ndarray | None = None) -> None:
    """``V_(i) <- V_(i) - coef * (V_(i) - V_bar_i)`` with each client's own copy.

    ``mask`` restricts the move to a subset of clients.
    """
    versions = state.client_version
    if (mask is None or mask.all()) and np.all(versions == state.version):
        state.V *= 1.0 - coef
        state.V += coef * state.vbar
        return
    if mask is None:
        mask = np.ones(state.n, dtype=bool)
    for ver in np.unique(versions[mask]):
        idx = np.flatnonzero((versions == ver) & mask)
        target = state.history[int(ver)]
        state.V[idx] = (1.0 - coef) * state.V[idx] + coef * target


def _upload_and_aggregate(state: TrainerState, cfg: TrainConfig) -> tuple[CommEvent, float | None]:
    """Participants upload (possibly perturbed) matrices; the server averages them."""
    cohort = _sample_cohort(state, cfg.dropout_rate)
    members = np.flatnonzero(cohort)
    state.last_cohort = cohort
    shape = (state.d, state.m)
    if members.size == 0:
        log.info("iteration %d: no participants, aggregation skipped", state.iter)
        return CommEvent(state.iter, UPLOAD, 0, shape, skipped=True), None

    if cfg.privacy is not None:
        acc = np.zeros(shape)
        for i in members:
            acc += perturb(state.V[i], cfg.privacy, state.noise_rng(int(i)))
        new = acc / members.size
    elif members.size == state.n:
        new = state.V.mean(axis=0)
    else:
        new = state.V[members].mean(axis=0)
    _check_finite(state, new, what="average")

    delta = _relative_change(new, state.vbar)
    if state.fresh_work == 0:
        # no local progress since the previous average: the uploads only echo
        # V_bar back, so the change carries no convergence signal
        delta = None
    state.fresh_work = 0
    state.version += 1
    state.vbar = new
    state.history[state.version] = new
    return CommEvent(state.iter, UPLOAD, int(members.size), shape), delta


def _distribute(state: TrainerState) -> CommEvent:
    """Send the latest average to the clients of the last aggregation cohort."""
    cohort = state.last_cohort
    state.client_version[cohort] = state.version
    live = set(np.unique(state.client_version).tolist()) | {state.version}
    for ver in list(state.history):
        if ver not in live:
            del state.history[ver]
    return CommEvent(state.iter, DOWNLOAD, int(cohort.sum()), (state.d, state.m))


# --- trainer steps ------------------------------------------------------------


def rfrec_step(state: TrainerState, cfg: TrainConfig, data) -> StepOutcome:
    """One RFRec iteration: full local gradient step on ``F_i``, upload, average, distribute."""
    cfg = cfg.for_kind("rfrec")
    obs = as_observations(data)
    grad_u, grad_obs = batch_grad_f(state.U, state.V, obs, cfg.lambda_u)
    _check_finite(state, grad_u, what="gradient")
    _check_finite(state, grad_obs, obs.users, "gradient")
    _pull_to_average(state, cfg.alpha * cfg.lam)
    state.U -= cfg.alpha * grad_u
    state.V[obs.users, :, obs.items] -= cfg.alpha * grad_obs
    _check_finite(state, state.U)
    state.fresh_work += 1

    up, delta = _upload_and_aggregate(state, cfg)
    down = _distribute(state)
    state.iter += 1
    return StepOutcome([up, down], None, delta, aggregated=not up.skipped, skipped=up.skipped)


def rfrecf_step(state: TrainerState, cfg: TrainConfig, data, zeta: int | None = None) -> StepOutcome:
    """One RFRecF iteration driven by a single shared Bernoulli(p) draw ``zeta``.

    ``zeta = 0`` after ``0`` (or at ``k = 0``): task step with ``alpha/(1-p)``.
    ``zeta = 0`` after ``1``: receive ``V_bar`` and move toward it with ``alpha*lam/p``.
    ``zeta = 1`` after ``0``: upload and aggregate.
    ``zeta = 1`` after ``1``: the server re-averages the uploads it already holds,
    which leaves ``V_bar`` unchanged.
    """
    cfg = cfg.for_kind("rfrecf")
    p = cfg.p
    if not 0.0 < p < 1.0:
        raise InvalidProbabilityError(f"p={p} must lie strictly inside (0, 1)")
    obs = as_observations(data)
    if zeta is None:
        zeta = int(state.zeta_rng.random() < p)
    elif zeta not in (0, 1):
        raise ValueError("zeta must be 0 or 1")
    prev = state.prev_zeta or 0

    events: list[CommEvent] = []
    delta = None
    skipped = False
    if zeta == 0:
        if prev == 1:
            # only clients that just received V_bar take the move-to-average step
            receivers = state.last_cohort.copy()
            events.append(_distribute(state))
            _pull_to_average(state, cfg.alpha * cfg.lam / p, receivers)
        else:
            _task_step(state, obs, cfg.lambda_u, cfg.alpha / (1.0 - p))
    elif prev == 0:
        up, delta = _upload_and_aggregate(state, cfg)
        events.append(up)
        skipped = up.skipped

    state.prev_zeta = zeta
    state.zeta_seq.append(zeta)
    state.iter += 1
    aggregated = zeta == 1 and prev == 0 and not skipped
    return StepOutcome(events, zeta, delta, aggregated=aggregated, skipped=skipped)


def stochastic_gradient(state: TrainerState, client_i: int, cfg: TrainConfig, zeta_branch: str, data):
    """Client ``i``'s share of the non-uniform stochastic gradient.

    ``"task"`` returns ``grad f_i / (1 - p)``; ``"regularizer"`` returns
    ``lam * grad psi_i / p`` (zero for the user vector).
    """
    p = cfg.p
    if not 0.0 < p < 1.0:
        raise InvalidProbabilityError(f"p={p} must lie strictly inside (0, 1)")
    if zeta_branch == "task":
        obs = as_observations(data)
        row = _row_of(obs, client_i)
        mdl = LocalModel(state.U[client_i], state.V[client_i])
        gu, gv = grad_f(mdl, row, cfg.lambda_u)
        return gu / (1.0 - p), gv / (1.0 - p)
    if zeta_branch == "regularizer":
        gv = state.V[client_i] - state.client_vbar(client_i)
        return np.zeros(state.d), cfg.lam * gv / p
    raise ValueError(f"zeta_branch must be 'task' or 'regularizer', got {zeta_branch!r}")


def _row_of(obs: Observations, i: int):
    from .model import RatingRow

    start = int(obs.counts[:i].sum())
    stop = start + int(obs.counts[i])
    return RatingRow(obs.items[start:stop], obs.ratings[start:stop])


# --- run loop -----------------------------------------------------------------


@dataclass
class MetricRow:
    iter: int
    loss: float
    mae: float | None
    rmse: float | None
    comm_rounds: int


@dataclass
class RunResult:
    kind: str
    user_vecs: np.ndarray
    global_state: GlobalState
    comm_log: CommLog
    history: list[MetricRow]
    iterations: int
    stop_reason: str
    final_delta: float | None
    state: object = field(repr=False, default=None)

    @property
    def converged(self) -> bool:
        return self.stop_reason == "stop_eps"

    @property
    def final_metrics(self) -> tuple[float | None, float | None]:
        if not self.history:
            return None, None
        return self.history[-1].mae, self.history[-1].rmse


def run(
    kind: str,
    cfg: TrainConfig,
    data,
    test=None,
    *,
    zeta: Iterable[int] | None = None,
    lambda_v: float = 0.1,
    track_loss: bool = True,
    callback: Callable[[object, StepOutcome], None] | None = None,
) -> RunResult:
    """Drive a trainer until ``max_iters``, the relative-change criterion, or the round cap.

    The stop criterion ``|V_bar_new - V_bar_old| / |V_bar_old| <= stop_eps`` is
    only checked at aggregations that received fresh uploads.  ``test`` (a
    :class:`~rfrec.data.RatingsDataset` aligned with ``data``) adds MAE/RMSE to
    the per-iteration history.  ``zeta`` forces the RFRecF draw sequence.
    """
    from .data import evaluate
    from .fcf import fcf_init, fcf_objective, fcf_round

    if kind not in KINDS:
        raise ValueError(f"unknown trainer kind {kind!r}; expected one of {KINDS}")
    cfg = cfg.for_kind(kind).validate(kind)
    obs = as_observations(data)
    forced = iter(zeta) if zeta is not None else None

    if kind == "fcf":
        state = fcf_init(cfg, obs, lambda_v=lambda_v)
    else:
        state = init_state(cfg, obs)
    comm = CommLog(kind, zeta_seq=[] if kind == "rfrecf" else None)
    history: list[MetricRow] = []
    stop_reason = "max_iters"
    last_delta = None

    for _ in range(cfg.max_iters):
        if kind == "rfrec":
            out = rfrec_step(state, cfg, obs)
        elif kind == "rfrecf":
            z = next(forced) if forced is not None else None
            out = rfrecf_step(state, cfg, obs, zeta=z)
            comm.zeta_seq.append(out.zeta)
        else:
            _, events = fcf_round(state, obs, cfg.alpha, dropout_rate=cfg.dropout_rate)
            out = StepOutcome(events, global_delta=state.last_delta, aggregated=True)
        comm.extend(out.comm_events)
        comm.iterations += 1
        if callback is not None:
            callback(state, out)

        # overflow here is reported below as a DivergenceError
        with np.errstate(over="ignore", invalid="ignore"):
            if kind == "fcf":
                loss = fcf_objective(state, obs) if track_loss else float("nan")
                U, vbar = state.U, state.V
            else:
                loss = (
                    batch_task_loss(state.U, state.V, obs, cfg.lambda_u)
                    + cfg.lam * batch_regularizer(state.V)
                    if track_loss
                    else float("nan")
                )
                U, vbar = state.U, state.vbar
        if track_loss and not np.isfinite(loss):
            raise DivergenceError(_loss_culprit(U, state.V, obs), comm.iterations - 1, "objective")
        mae = rmse = None
        if test is not None and test.n_observed:
            mae, rmse = evaluate(U, vbar, test, clip=cfg.clip_predictions)
        history.append(MetricRow(comm.iterations, loss, mae, rmse, comm.rounds))

        if out.global_delta is not None:
            last_delta = out.global_delta
            if out.global_delta <= cfg.stop_eps:
                stop_reason = "stop_eps"
                break
        if cfg.max_rounds is not None and comm.rounds >= cfg.max_rounds:
            stop_reason = "max_rounds"
            break

    comm.check()
    if kind == "fcf":
        U, vbar = state.U, state.V
    else:
        U, vbar = state.U, state.vbar
    return RunResult(
        kind=kind,
        user_vecs=U,
        global_state=GlobalState(vbar),
        comm_log=comm,
        history=history,
        iterations=comm.iterations,
        stop_reason=stop_reason,
        final_delta=last_delta,
        state=state,
    )

"""Numerical estimates of the smoothness/curvature constants and checks of the
convergence and communication guarantees on small instances.

A point ``x`` is a pair ``(U, V)`` with ``U`` of shape ``(n, d)`` and ``V`` of
shape ``(n, d, m)``.  The objective is invariant under a gauge group acting on
the latent space: ``u -> Q u, V -> Q V`` for orthogonal ``Q`` always, and
``u -> A^-T u, V -> A V`` for any invertible ``A`` when ``lambda_u = 0``.
Distances to a reference point are therefore measured after aligning the
reference to the point (see :func:`align`).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize

from .comm import CommLog
from .errors import ConvergenceError
from .model import (
    LocalModel,
    Observations,
    RatingRow,
    TrainConfig,
    batch_grad_F,
    batch_grad_f,
    batch_objective,
    grad_f,
)

# --- point helpers --------------------------------------------------------------


def flatten(x) -> np.ndarray:
    U, V = x
    return np.concatenate([U.ravel(), V.ravel()])


def unflatten(z: np.ndarray, n: int, d: int, m: int):
    k = n * d
    return z[:k].reshape(n, d), z[k:].reshape(n, d, m)


def sq_norm(x) -> float:
    U, V = x
    return float(np.sum(U * U) + np.sum(V * V))


def sub(x, y):
    return x[0] - y[0], x[1] - y[1]


def gauge_group(lambda_u: float) -> str:
    return "general" if lambda_u == 0 else "orthogonal"


def _procrustes(x_ref, x) -> np.ndarray:
    """Orthogonal ``Q`` minimising ``|x - Q x_ref|``."""
    n, d = x[0].shape
    X = np.concatenate([x[0].T, x[1].transpose(1, 0, 2).reshape(d, -1)], axis=1)
    Y = np.concatenate([x_ref[0].T, x_ref[1].transpose(1, 0, 2).reshape(d, -1)], axis=1)
    W, _, Zt = np.linalg.svd(X @ Y.T)
    return W @ Zt


def _apply(x_ref, A: np.ndarray, A_inv_t: np.ndarray):
    U, V = x_ref
    return U @ A_inv_t.T, np.einsum("ab,ibm->iam", A, V)


def align(x_ref, x, group: str = "orthogonal"):
    """Return the image of ``x_ref`` under the gauge element closest to ``x``."""
    Q = _procrustes(x_ref, x)
    if group == "orthogonal":
        return _apply(x_ref, Q, Q)
    if group != "general":
        raise ValueError(f"unknown gauge group {group!r}")
    d = Q.shape[0]

    def cost(a):
        A = a.reshape(d, d)
        try:
            A_inv_t = np.linalg.inv(A).T
        except np.linalg.LinAlgError:
            return 1e300
        return sq_norm(sub(x, _apply(x_ref, A, A_inv_t)))

    res = optimize.minimize(cost, Q.ravel(), method="BFGS", options={"gtol": 1e-12})
    A = res.x.reshape(d, d)
    if cost(res.x) > cost(Q.ravel()):
        A = Q
    return _apply(x_ref, A, np.linalg.inv(A).T)


def aligned_sq_dist(x, x_ref, group: str = "orthogonal") -> float:
    return sq_norm(sub(x, align(x_ref, x, group)))


def rows_of(obs: Observations) -> list[RatingRow]:
    bounds = np.concatenate([[0], np.cumsum(obs.counts)])
    return [RatingRow(obs.items[a:b], obs.ratings[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]


# --- constants --------------------------------------------------------------------


def expected_smoothness_const(smooth: float, lam: float, p: float) -> float:
    """Second-moment constant of the random-branch gradient: ``max(smooth / (1 - p), lam / p)``."""
    return max(smooth / (1.0 - p), lam / p)


def optimal_p(smooth: float, lam: float) -> float:
    return lam / (smooth + lam)


def rfrec_comm_constant(smooth: float, lam: float, curv: float) -> float:
    """Rounds per ``log(1/eps)`` for full-gradient local steps: ``2 (smooth + lam) / curv``."""
    return 2.0 * (smooth + lam) / curv


def rfrecf_comm_constant(p: float, smooth: float, lam: float, curv: float) -> float:
    """Expected rounds per ``log(1/eps)`` for the random schedule.

    Two rounds per transition at rate ``p (1 - p)`` over
    ``2 expected_smoothness_const / curv`` iterations reduce to
    ``4 max(smooth p, lam (1 - p)) / curv``.
    """
    return 4.0 * max(smooth * p, lam * (1.0 - p)) / curv


def norm_bounds(x, obs: Observations) -> tuple[float, float, float]:
    """``(M_u, M_v, M_r)``: largest user-vector, item-matrix and rating-row norms."""
    U, V = x
    m_u = float(np.max(np.linalg.norm(U, axis=1)))
    m_v = float(np.max(np.linalg.norm(V.reshape(V.shape[0], -1), axis=1)))
    row_sq = np.bincount(obs.users, weights=obs.ratings**2, minlength=obs.n)
    return m_u, m_v, float(np.sqrt(row_sq.max()))


def convexity_threshold(m_u: float, m_r: float, lambda_u: float) -> float:
    """``2 M_r^2 / lambda_u + 6 M_u^2`` (infinite when ``lambda_u = 0``)."""
    if lambda_u == 0:
        return math.inf
    return 2.0 * m_r**2 / lambda_u + 6.0 * m_u**2


def estimate_smoothness(
    data,
    sample_count: int = 32,
    seed: int = 0,
    *,
    cfg: TrainConfig | None = None,
    center=None,
    radius: float = 1.0,
    power_steps: int = 0,
    freeze_items: bool = False,
    d: int | None = None,
) -> float:
    """Largest secant ratio ``|grad f_i(x) - grad f_i(y)| / |x - y|`` over sampled pairs.

    Points are drawn uniformly from the box of half-width ``radius`` around
    ``center`` (the origin by default), independently per client; every pair
    among the first ``sample_count`` points is used, so growing the sample never
    lowers the estimate.  ``power_steps`` refines each pair by power iteration on
    gradient differences, which recovers the top Hessian eigenvalue for
    quadratics.  ``freeze_items`` perturbs only the user vector.
    """
    if sample_count < 2:
        raise ValueError("sample_count must be at least 2")
    cfg = cfg or TrainConfig()
    obs = data if isinstance(data, Observations) else data.obs
    d = d or (center[0].shape[1] if center is not None else cfg.d)
    n, m = obs.n, obs.m
    rows = rows_of(obs)
    best = 0.0
    for i in range(n):
        if len(rows[i]) == 0:
            continue
        # separate streams per client and block keep the first k points fixed as k grows
        u_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i, 0)))
        v_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i, 1)))
        cu = center[0][i] if center is not None else np.zeros(d)
        cv = center[1][i] if center is not None else np.zeros((d, m))
        us = cu + u_rng.uniform(-radius, radius, (sample_count, d))
        if freeze_items:
            vs = np.broadcast_to(cv + v_rng.uniform(-radius, radius, (d, m)), (sample_count, d, m))
        else:
            vs = cv + v_rng.uniform(-radius, radius, (sample_count * d, m)).reshape(sample_count, d, m)
        grads = [grad_f(LocalModel(us[a], vs[a]), rows[i], cfg.lambda_u) for a in range(sample_count)]
        if freeze_items:
            # frozen coordinates are not variables, so drop their gradient block
            grads = [(gu, np.zeros_like(gv)) for gu, gv in grads]
        for a in range(sample_count):
            for b in range(a + 1, sample_count):
                du, dv = us[b] - us[a], vs[b] - vs[a]
                dist = math.sqrt(float(du @ du + np.sum(dv * dv)))
                if dist == 0.0:
                    continue
                gu = grads[b][0] - grads[a][0]
                gv = grads[b][1] - grads[a][1]
                ratio = math.sqrt(float(gu @ gu + np.sum(gv * gv))) / dist
                best = max(best, ratio)
                for _ in range(power_steps):
                    gnorm = math.sqrt(float(gu @ gu + np.sum(gv * gv)))
                    if gnorm == 0.0:
                        break
                    # probe along the last gradient difference, keeping the pair distance
                    du = gu * (dist / gnorm)
                    dv = np.zeros_like(gv) if freeze_items else gv * (dist / gnorm)
                    step = math.sqrt(float(du @ du + np.sum(dv * dv)))
                    if step == 0.0:
                        break
                    gb = grad_f(LocalModel(us[a] + du, vs[a] + dv), rows[i], cfg.lambda_u)
                    gu = gb[0] - grads[a][0]
                    gv = np.zeros_like(gv) if freeze_items else gb[1] - grads[a][1]
                    best = max(best, math.sqrt(float(gu @ gu + np.sum(gv * gv))) / step)
    return best


def hessian_vec(x, direction, obs: Observations, cfg: TrainConfig, h: float = 1e-5) -> np.ndarray:
    """Central finite difference of ``grad F`` along ``direction`` (flattened)."""
    n, d = x[0].shape
    m = obs.m
    z = flatten(x)
    dz = direction / np.linalg.norm(direction)
    gp = flatten(batch_grad_F(*unflatten(z + h * dz, n, d, m), obs, cfg.lambda_u, cfg.lam))
    gm = flatten(batch_grad_F(*unflatten(z - h * dz, n, d, m), obs, cfg.lambda_u, cfg.lam))
    return (gp - gm) / (2.0 * h)


def estimate_curvature(
    x,
    obs: Observations,
    cfg: TrainConfig,
    *,
    directions=None,
    n_directions: int = 32,
    h: float = 1e-5,
    seed: int = 0,
) -> float:
    """Smallest Rayleigh quotient of the finite-difference Hessian of ``F`` at ``x``.

    ``directions`` (flattened vectors) replaces the random probe set, e.g. with
    the error directions of a trajectory.
    """
    if directions is None:
        rng = np.random.default_rng(seed)
        size = flatten(x).size
        directions = rng.normal(size=(n_directions, size))
    best = math.inf
    for v in directions:
        v = np.asarray(v, dtype=np.float64)
        nv = np.linalg.norm(v)
        if nv == 0:
            continue
        hv = hessian_vec(x, v, obs, cfg, h)
        best = min(best, float(hv @ (v / nv)))
    return best


# --- reference optimum --------------------------------------------------------------


@dataclass
class Optimum:
    U: np.ndarray
    V: np.ndarray
    grad_norm: float
    iterations: int
    objective: float

    @property
    def x(self):
        return self.U, self.V


def reference_optimum(
    data,
    cfg: TrainConfig,
    tol: float = 1e-8,
    *,
    init=None,
    max_iters: int = 50_000,
    seed: int = 0,
    init_std: float = 0.3,
) -> Optimum:
    """Gradient descent on ``F`` with backtracking (Armijo) until ``|grad F| <= tol``.

    Raises :class:`ConvergenceError` when the budget runs out, which happens
    whenever ``F`` does not attain its infimum.
    """
    obs = data if isinstance(data, Observations) else data.obs
    if init is None:
        rng = np.random.default_rng(seed)
        U = rng.normal(0.0, init_std, (obs.n, cfg.d))
        V = rng.normal(0.0, init_std, (obs.n, cfg.d, obs.m))
    else:
        U, V = init[0].copy(), init[1].copy()
    lu, lam = cfg.lambda_u, cfg.lam
    fx = batch_objective(U, V, obs, lu, lam)
    step = 1.0
    gnorm = math.inf
    for k in range(max_iters + 1):
        gu, gv = batch_grad_F(U, V, obs, lu, lam)
        g2 = float(np.sum(gu * gu) + np.sum(gv * gv))
        gnorm = math.sqrt(g2)
        if gnorm <= tol:
            return Optimum(U, V, gnorm, k, fx)
        if k == max_iters:
            break
        step *= 2.0
        while True:
            U2, V2 = U - step * gu, V - step * gv
            f2 = batch_objective(U2, V2, obs, lu, lam)
            if f2 <= fx - 0.5 * step * g2:
                break
            step *= 0.5
            if step < 1e-300:
                raise ConvergenceError(f"line search failed at iteration {k}")
        U, V, fx = U2, V2, f2
    raise ConvergenceError(
        f"|grad F| = {gnorm:.3e} > tol = {tol:.1e} after {max_iters} iterations; "
        "the objective may not attain its infimum on this instance"
    )


# --- rate fitting -----------------------------------------------------------------


@dataclass
class RateFit:
    rate: float
    intercept: float
    r2: float
    points_used: int

    @property
    def contracting(self) -> bool:
        return self.rate < 0


def fit_log_rate(errors, discard_frac: float = 0.1, floor: float = 1e-10) -> RateFit:
    """Least-squares slope of ``log e_k`` against ``k``.

    The first ``discard_frac`` of the sequence is dropped as transient, as is
    every value at or below ``floor``.
    """
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size < 10:
        raise ValueError(f"need at least 10 points, got {errors.size}")
    k = np.arange(errors.size)
    start = int(math.floor(discard_frac * errors.size))
    keep = (k >= start) & (errors > floor)
    if keep.sum() < 3:
        raise ValueError("fewer than 3 points survive the transient/floor filter")
    ks, ys = k[keep].astype(np.float64), np.log(errors[keep])
    slope, intercept = np.polyfit(ks, ys, 1)
    resid = ys - (slope * ks + intercept)
    ss_tot = float(np.sum((ys - ys.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 1.0
    return RateFit(float(slope), float(intercept), r2, int(keep.sum()))


def check_linear_rate(trajectory, x_ref, group: str = "orthogonal", **kw) -> RateFit:
    """Fit the decay of ``|x^k - x_ref|^2`` (gauge-aligned) along a trajectory."""
    if len(trajectory) < 10:
        raise ValueError(f"trajectory has {len(trajectory)} points; need at least 10")
    errors = [aligned_sq_dist(x, x_ref, group) for x in trajectory]
    return fit_log_rate(errors, **kw)


# --- stochastic gradient ------------------------------------------------------------


def gradient_parts(x, obs: Observations, cfg: TrainConfig):
    """Flattened ``grad f`` and ``grad psi`` at ``x`` (``V_bar`` the exact mean)."""
    U, V = x
    gu, gobs = batch_grad_f(U, V, obs, cfg.lambda_u)
    gvf = np.zeros_like(V)
    gvf[obs.users, :, obs.items] = gobs
    gf = np.concatenate([gu.ravel(), gvf.ravel()])
    gpsi = np.concatenate([np.zeros(U.size), (V - V.mean(axis=0)).ravel()])
    return gf, gpsi


def grad_noise_at_optimum(x_ref, obs: Observations, cfg: TrainConfig) -> float:
    """``sum_i |grad f_i|^2 / (1 - p) + lam^2 |V_(i) - V_bar|^2 / p`` at ``x_ref``."""
    gf, gpsi = gradient_parts(x_ref, obs, cfg)
    p = cfg.p
    return float(gf @ gf / (1 - p) + cfg.lam**2 * (gpsi @ gpsi) / p)


def sample_stochastic_grads(gf: np.ndarray, gpsi: np.ndarray, lam: float, p: float,
                            zetas: np.ndarray) -> np.ndarray:
    """Rows of ``G`` for each shared draw: ``grad f / (1-p)`` if 0, ``lam grad psi / p`` if 1."""
    task = gf / (1.0 - p)
    reg = lam * gpsi / p
    return np.where(zetas[:, None] == 1, reg[None, :], task[None, :])


@dataclass
class MeanCheck:
    max_abs_z: float
    passed: bool


def check_unbiased(x, obs: Observations, cfg: TrainConfig, draws: int = 100_000, seed: int = 0,
                   n_sigma: float = 3.0) -> MeanCheck:
    """Monte-Carlo mean of ``G(x)`` against ``grad F(x)``, per coordinate."""
    p = cfg.p
    gf, gpsi = gradient_parts(x, obs, cfg)
    full = gf + cfg.lam * gpsi
    rng = np.random.default_rng(seed)
    zetas = (rng.random(draws) < p).astype(np.int8)
    # two-valued per coordinate: accumulate sums from the draw count
    ones = int(zetas.sum())
    task, reg = gf / (1 - p), cfg.lam * gpsi / p
    mean = ((draws - ones) * task + ones * reg) / draws
    second = ((draws - ones) * task**2 + ones * reg**2) / draws
    var = np.maximum(second - mean**2, 0.0)
    se = np.sqrt(var / draws)
    dev = np.abs(mean - full)
    tiny = 1e-12 * max(1.0, float(np.max(np.abs(full))))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, dev / se, np.where(dev <= tiny, 0.0, np.inf))
    max_z = float(np.max(z)) if z.size else 0.0
    return MeanCheck(max_z, max_z <= n_sigma)


@dataclass
class SmoothnessCheck:
    lhs1: float
    rhs1: float
    se1: float
    lhs2: float
    rhs2: float
    se2: float
    expected_smoothness_const: float
    gap: float

    @property
    def passed1(self) -> bool:
        return self.lhs1 <= self.rhs1 + 3.0 * self.se1

    @property
    def passed2(self) -> bool:
        return self.lhs2 <= self.rhs2 + 3.0 * self.se2

    @property
    def passed(self) -> bool:
        return self.passed1 and self.passed2


def check_expected_smoothness(x, x_ref, cfg: TrainConfig, draws: int, *, obs: Observations,
                              smoothness: float, seed: int = 0, group: str | None = None) -> SmoothnessCheck:
    """Monte-Carlo estimates of both expected-smoothness inequalities at ``x``.

    ``x_ref`` (a minimiser) is first aligned to ``x`` so that both sit in the
    same gauge.
    """
    if draws < 2:
        raise ValueError("draws must be at least 2")
    group = group or gauge_group(cfg.lambda_u)
    x_star = align(x_ref, x, group)
    p, lam = cfg.p, cfg.lam
    gf, gpsi = gradient_parts(x, obs, cfg)
    gf0, gpsi0 = gradient_parts(x_star, obs, cfg)
    rng = np.random.default_rng(seed)
    zetas = (rng.random(draws) < p).astype(np.int8)

    d_task = np.sum((gf - gf0) ** 2) / (1 - p) ** 2
    d_reg = lam**2 * np.sum((gpsi - gpsi0) ** 2) / p**2
    s1 = np.where(zetas == 1, d_reg, d_task)
    g_task = np.sum(gf**2) / (1 - p) ** 2
    g_reg = lam**2 * np.sum(gpsi**2) / p**2
    s2 = np.where(zetas == 1, g_reg, g_task)

    const = expected_smoothness_const(smoothness, lam, p)
    gap = batch_objective(*x, obs, cfg.lambda_u, lam) - batch_objective(*x_star, obs, cfg.lambda_u, lam)
    noise_opt = grad_noise_at_optimum(x_star, obs, cfg)
    return SmoothnessCheck(
        lhs1=float(s1.mean()),
        rhs1=2.0 * const * gap,
        se1=float(s1.std(ddof=1) / math.sqrt(draws)),
        lhs2=float(s2.mean()),
        rhs2=4.0 * const * gap + 2.0 * noise_opt,
        se2=float(s2.std(ddof=1) / math.sqrt(draws)),
        expected_smoothness_const=const,
        gap=gap,
    )


# --- communication schedule -----------------------------------------------------------


@dataclass
class CommStats:
    empirical_rate: float
    expected_rate: float
    z_score: float
    iterations: int
    events: int


def transition_moments(p: float, T: int) -> tuple[float, float]:
    """Mean and exact variance of the number of ``zeta`` transitions in ``T`` steps.

    ``I_0 = zeta_0`` and ``I_k = [zeta_{k-1} != zeta_k]``; neighbouring indicators
    share one draw, those further apart are independent.
    """
    q = 2.0 * p * (1.0 - p)
    pq = p * (1.0 - p)
    if T <= 0:
        return 0.0, 0.0
    mean = p + (T - 1) * q
    var = pq + (T - 1) * q * (1 - q)
    if T >= 2:
        var += 2.0 * (pq - p * q)
        var += 2.0 * (T - 2) * (pq - q * q)
    return mean, var


def comm_schedule_stats(comm_log: CommLog, p: float) -> CommStats:
    """Empirical communication rate against its expectation, with a z-score."""
    T = comm_log.iterations
    if T == 0:
        raise ValueError("empty communication log")
    events = comm_log.rounds
    if comm_log.kind == "rfrec":
        return CommStats(events / T, 2.0, 0.0 if events == 2 * T else math.inf, T, events)
    if comm_log.kind != "rfrecf":
        raise ValueError(f"schedule statistics are defined for rfrec/rfrecf logs, not {comm_log.kind!r}")
    mean, var = transition_moments(p, T)
    z = (events - mean) / math.sqrt(var) if var > 0 else 0.0
    return CommStats(events / T, 2.0 * p * (1.0 - p), z, T, events)


# --- report ---------------------------------------------------------------------------


@dataclass
class CheckRecord:
    name: str
    lhs: float
    rhs: float
    margin: float
    passed: bool
    note: str = ""


@dataclass
class TheoryReport:
    records: list[CheckRecord] = field(default_factory=list)

    def add(self, name, lhs, rhs, passed, note="") -> CheckRecord:
        rec = CheckRecord(name, float(lhs), float(rhs), float(rhs) - float(lhs), bool(passed), note)
        self.records.append(rec)
        return rec

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.records)

    def to_json(self) -> str:
        def clean(v):
            return None if isinstance(v, float) and not math.isfinite(v) else v

        return json.dumps(
            [{k: clean(v) for k, v in asdict(r).items()} for r in self.records], indent=2
        )

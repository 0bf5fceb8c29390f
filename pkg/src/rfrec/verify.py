"""Ready-made theory checks on planted desk instances.

Two instance families are used:

* ``lambda_u = 0`` on exactly low-rank ratings with every entry observed.  The
  objective attains its minimum (zero, on a consensus factorisation), so every
  check that needs a minimiser runs here.
* ``lambda_u > 0`` with ``lambda`` above the strong-convexity threshold
  ``2 M_r^2 / lambda_u + 6 M_u^2``.  Shrinking every ``u_i`` by ``c`` and growing
  every ``V_(i)`` by ``c`` at a consensus point keeps the residuals and ``psi``
  fixed while the ridge term decays like ``1/c^2``, so the infimum is not
  attained and the reference solver reports non-convergence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError
from .model import TrainConfig, batch_objective
from .privacy import PrivacyConfig, perturb
from .synthetic import planted_instance
from .theory import (
    Optimum,
    RateFit,
    TheoryReport,
    aligned_sq_dist,
    align,
    check_expected_smoothness,
    check_unbiased,
    comm_schedule_stats,
    convexity_threshold,
    estimate_smoothness,
    estimate_curvature,
    fit_log_rate,
    flatten,
    norm_bounds,
    optimal_p,
    reference_optimum,
    rfrec_comm_constant,
    rfrecf_comm_constant,
    expected_smoothness_const,
    sub,
)
from .trainers import init_state, rfrec_step, run

DESK_SHAPE = dict(n=4, m=6, d=2)


@dataclass
class Desk:
    data: object
    cfg: TrainConfig
    optimum: Optimum
    smoothness: float

    @property
    def obs(self):
        return self.data.obs

    @property
    def x_ref(self):
        return self.optimum.x


def consensus_desk(seed: int = 0, lam: float = 10.0, p: float = 0.5, scale: float = 0.5,
                   radius: float = 0.5) -> Desk:
    """Exactly-fit planted instance with ``lambda_u = 0`` and its minimiser."""
    inst = planted_instance(**DESK_SHAPE, scale=scale, seed=seed)
    cfg = TrainConfig(d=DESK_SHAPE["d"], lam=lam, lambda_u=0.0, p=p, init_std=0.3, seed=seed)
    opt = reference_optimum(inst.data, cfg, tol=1e-10, seed=seed)
    smooth = estimate_smoothness(inst.data, 16, seed, cfg=cfg, center=opt.x, radius=radius, power_steps=5)
    return Desk(inst.data, cfg, opt, smooth)


def rfrec_trajectory(desk: Desk, cfg: TrainConfig, iters: int, every: int = 1):
    state = init_state(cfg, desk.obs)
    traj = [(state.U.copy(), state.V.copy())]
    for k in range(1, iters + 1):
        rfrec_step(state, cfg, desk.obs)
        if k % every == 0:
            traj.append((state.U.copy(), state.V.copy()))
    return traj


@dataclass
class RateOutcome:
    fit: RateFit
    alpha: float
    curvature: float
    bound: float
    passed: bool


def rate_check(desk: Desk, iters: int = 3000, every: int = 10, slack: float = 0.2) -> RateOutcome:
    """RFRec at ``alpha = 1/(smoothness + lam)``: fitted log-error slope against the contraction bound.

    ``curvature`` is the smallest curvature along the trajectory's own error
    directions.  Squared errors contract at ``ln(1 - alpha curv)`` per step; the
    check asks for at least ``(1 - slack)`` of half that slope.
    """
    alpha = 1.0 / (desk.smoothness + desk.cfg.lam)
    cfg = desk.cfg.with_(alpha=alpha)
    traj = rfrec_trajectory(desk, cfg, iters, every)
    group = "general" if cfg.lambda_u == 0 else "orthogonal"
    errors = []
    directions = []
    for x in traj:
        ref = align(desk.x_ref, x, group)
        diff = flatten(sub(x, ref))
        errors.append(float(diff @ diff))
        if 1e-8 < errors[-1] < 1e-2:
            directions.append(diff)
    fit = fit_log_rate(np.array(errors))
    curv = estimate_curvature(desk.x_ref, desk.obs, cfg, directions=directions[:16])
    bound = math.log(1.0 - alpha * curv) / 2.0 if 0 < alpha * curv < 1 else -math.inf
    per_step = fit.rate / every
    passed = fit.contracting and fit.r2 >= 0.99 and per_step <= (1.0 - slack) * bound
    return RateOutcome(fit, alpha, curv, bound, passed)


@dataclass
class ThresholdOutcome:
    lam: float
    threshold: float
    realized_threshold: float | None
    fit: RateFit | None
    passed: bool
    reason: str


def threshold_rate_check(seed: int = 0, lambda_u: float = 0.1, margin: float = 1.25,
                         iters: int = 3000, ref_iters: int = 50_000) -> ThresholdOutcome:
    """Linear-rate check with ``lambda`` above the strong-convexity threshold.

    ``lambda`` is set to ``margin`` times the threshold evaluated at the planted
    parameters.  A reference minimiser is required to measure errors; when the
    solver cannot find one the check fails with that reason.
    """
    inst = planted_instance(**DESK_SHAPE, scale=0.5, seed=seed)
    obs = inst.data.obs
    m_u0 = float(np.max(np.linalg.norm(inst.user_vecs, axis=1)))
    _, _, m_r = norm_bounds((inst.user_vecs, np.zeros((obs.n, DESK_SHAPE["d"], obs.m))), obs)
    thr = convexity_threshold(m_u0, m_r, lambda_u)
    lam = margin * thr
    cfg = TrainConfig(d=DESK_SHAPE["d"], lam=lam, lambda_u=lambda_u, init_std=0.3, seed=seed)
    try:
        opt = reference_optimum(inst.data, cfg, tol=1e-8, max_iters=ref_iters, seed=seed)
    except ConvergenceError as exc:
        return ThresholdOutcome(lam, thr, None, None, False, f"no reference minimiser: {exc}")
    smooth = estimate_smoothness(inst.data, 16, seed, cfg=cfg, center=opt.x, radius=0.5, power_steps=5)
    desk = Desk(inst.data, cfg, opt, smooth)
    traj = rfrec_trajectory(desk, cfg.with_(alpha=1.0 / (smooth + lam)), iters, 10)
    realized = max(convexity_threshold(norm_bounds(x, obs)[0], m_r, lambda_u) for x in traj)
    errors = [aligned_sq_dist(x, opt.x, "orthogonal") for x in traj]
    fit = fit_log_rate(errors)
    passed = fit.contracting and fit.r2 >= 0.99
    return ThresholdOutcome(lam, thr, realized, fit, passed, "" if passed else "fit not linear")


def scaling_path(x, obs, cfg: TrainConfig, factors=(1.0, 2.0, 4.0, 8.0)) -> list[float]:
    """``F(u / c, c V)`` for each ``c``; strictly decreasing at consensus when ``lambda_u > 0``."""
    U, V = x
    return [batch_objective(U / c, V * c, obs, cfg.lambda_u, cfg.lam) for c in factors]


@dataclass
class SmoothnessSweep:
    p: float
    worst_margin1: float
    worst_margin2: float
    passed: bool


def smoothness_sweep(desk: Desk, ps=(0.1, 0.5, 0.9), points: int = 20, draws: int = 10_000,
                     radius: float = 0.05, seed: int = 0) -> list[SmoothnessSweep]:
    """Both expected-smoothness inequalities at random points near the minimiser."""
    smooth = estimate_smoothness(desk.obs, 16, seed, cfg=desk.cfg, center=desk.x_ref, radius=radius,
                                 power_steps=5)
    out = []
    for p in ps:
        cfg = desk.cfg.with_(p=p)
        rng = np.random.default_rng(seed)
        w1 = w2 = math.inf
        ok = True
        for k in range(points):
            U0, V0 = desk.x_ref
            x = (U0 + rng.uniform(-radius, radius, U0.shape), V0 + rng.uniform(-radius, radius, V0.shape))
            r = check_expected_smoothness(x, desk.x_ref, cfg, draws, obs=desk.obs, smoothness=smooth,
                                          seed=seed + k)
            w1 = min(w1, r.rhs1 + 3 * r.se1 - r.lhs1)
            w2 = min(w2, r.rhs2 + 3 * r.se2 - r.lhs2)
            ok &= r.passed
        out.append(SmoothnessSweep(p, w1, w2, ok))
    return out


def unbiasedness(points: int = 10, draws: int = 100_000, seed: int = 0) -> list[float]:
    """Largest per-coordinate z-score of the Monte-Carlo mean of ``G`` at random points."""
    from .synthetic import random_desk_instance

    zs = []
    for k in range(points):
        data, U, V = random_desk_instance(seed + k)
        cfg = TrainConfig(d=U.shape[1], lam=10.0, lambda_u=0.1, p=0.5)
        zs.append(check_unbiased((U, V), data.obs, cfg, draws, seed=seed + k).max_abs_z)
    return zs


def noise_plateaus(desk: Desk, scales=(0.02, 0.04, 0.08), delta: float = 5.0, iters: int = 4000,
                   tail_from: int = 2000, every: int = 20) -> list[float]:
    """Tail-averaged aligned squared error of RFRec for each Laplace scale.

    ``delta`` is chosen above every parameter magnitude so that only the noise,
    not the clamp, moves the fixed point.
    """
    alpha = 1.0 / (desk.smoothness + desk.cfg.lam)
    group = "general" if desk.cfg.lambda_u == 0 else "orthogonal"
    plateaus = []
    for s in scales:
        cfg = desk.cfg.with_(alpha=alpha, privacy=PrivacyConfig(delta, s))
        state = init_state(cfg, desk.obs)
        errs = []
        for k in range(1, iters + 1):
            rfrec_step(state, cfg, desk.obs)
            if k > tail_from and k % every == 0:
                errs.append(aligned_sq_dist((state.U, state.V), desk.x_ref, group))
        plateaus.append(float(np.mean(errs)))
    return plateaus


def comm_frequency(p: float = 0.5, iters: int = 10_000, seed: int = 0):
    """RFRecF schedule statistics over ``iters`` steps on the desk instance."""
    inst = planted_instance(**DESK_SHAPE, scale=0.5, seed=seed)
    cfg = TrainConfig(d=DESK_SHAPE["d"], alpha=0.01, lam=10.0, lambda_u=0.1, p=p, max_iters=iters,
                      stop_eps=1e-300, seed=seed, init_std=0.3)
    res = run("rfrecf", cfg, inst.data, track_loss=False)
    return comm_schedule_stats(res.comm_log, p)


def aggregation_noise_variance(n: int, scale: float, delta: float = 1.0, shape=(20, 50),
                               seed: int = 0) -> float:
    """Per-entry variance of the mean of ``n`` independent perturbations of a fixed matrix."""
    rng = np.random.default_rng(seed)
    base = np.clip(rng.normal(0.0, 0.1, shape), -delta, delta)
    cfg = PrivacyConfig(delta, scale)
    mean = np.zeros(shape)
    for _ in range(n):
        mean += perturb(base, cfg, rng)
    mean /= n
    return float(np.var(mean - base, ddof=1))


def run_suite(seed: int = 0, draws: int = 10_000, quick: bool = False) -> TheoryReport:
    """Every theory check as one machine-readable report."""
    report = TheoryReport()
    desk = consensus_desk(seed)
    lam, smooth = desk.cfg.lam, desk.smoothness

    for p in (0.1, 0.5, 0.9):
        const = expected_smoothness_const(smooth, lam, p)
        report.add(f"expected_smoothness_const>=smooth+lam(p={p})", smooth + lam, const,
                   const >= smooth + lam - 1e-9)
    p_star = optimal_p(smooth, lam)
    at_star = expected_smoothness_const(smooth, lam, p_star)
    report.add("expected_smoothness_const_at_p*", smooth + lam, at_star,
               abs(at_star - (smooth + lam)) <= 1e-9 * (smooth + lam))

    rate = rate_check(desk, iters=1500 if quick else 3000)
    report.add("linear_rate_slope", rate.fit.rate / 10, rate.bound * 0.8, rate.passed,
               f"r2={rate.fit.r2:.6f} curvature={rate.curvature:.4g} alpha={rate.alpha:.4g}")
    curv = rate.curvature
    random_const = rfrecf_comm_constant(p_star, smooth, lam, curv)
    half_full = rfrec_comm_constant(smooth, lam, curv) / 2.0
    report.add("comm_constant_ordering", random_const, half_full, random_const <= half_full + 1e-12)

    thr = threshold_rate_check(seed, ref_iters=5_000 if quick else 50_000)
    report.add("linear_rate_above_threshold", thr.lam, thr.threshold, thr.passed, thr.reason)

    for sw in smoothness_sweep(desk, points=5 if quick else 20, draws=draws, seed=seed):
        report.add(f"expected_smoothness(p={sw.p})", 0.0, min(sw.worst_margin1, sw.worst_margin2),
                   sw.passed)

    zs = unbiasedness(points=3 if quick else 10, draws=draws * 10, seed=seed)
    report.add("unbiased_G", max(zs), 3.0, max(zs) <= 3.0)

    plateaus = noise_plateaus(desk, iters=2000 if quick else 4000, tail_from=1000 if quick else 2000)
    report.add("noise_plateau_ordering", plateaus[0], plateaus[-1],
               all(a < b for a, b in zip(plateaus, plateaus[1:])), f"plateaus={plateaus}")

    stats = comm_frequency(iters=2000 if quick else 10_000, seed=seed)
    report.add("comm_rate_z", abs(stats.z_score), 3.0, abs(stats.z_score) <= 3.0,
               f"rate={stats.empirical_rate:.4f} expected={stats.expected_rate}")
    return report

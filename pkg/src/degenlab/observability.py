"""Empirical observability constants and the interpolation pipeline behind them.

Every constant here is a *fitted* or *lower-bound* quantity: the ratio
``||y(T)|| / int_D |y|`` is maximized over the K-mode span, never bounded
from above, and constants of the analytic and propagation-of-smallness
estimates are read off sampled data with their residuals reported.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.optimize import brentq, minimize

from .geometry import GeometryError, IntervalSet, SpaceTimeSet, as_fraction
from .pde import ContractError, TimeGrid, abs_quadrature, set_gram, support_weights
from .spectral import DegenerateOperatorSpec, EigenSystem, eigen_fd


class HypothesisError(ValueError):
    """An input violates a stated hypothesis of the estimate being probed."""


def default_mu(alpha: float) -> float:
    # alpha = 1 admits 3/(2 gamma) for any gamma in (0, 2); 0.76 is one admissible value
    return 0.76 if alpha == 1.0 else 0.75


@dataclass(frozen=True)
class ObservabilityConfig:
    alpha: float
    D: SpaceTimeSet
    grid: TimeGrid
    seed: int
    K: int = 8
    mu: float | None = None
    restarts: int = 32
    n_cells: int = 400
    grading: float = 2.0
    max_iter: int = 200

    def __post_init__(self):
        if self.mu is None:
            object.__setattr__(self, "mu", default_mu(self.alpha))
        if not 0.0 < self.mu < 1.0:
            raise ContractError(f"mu must lie in (0, 1), got {self.mu}")
        if self.seed is None:
            raise ContractError("a seed is required")
        if self.K < 1 or self.restarts < 0:
            raise ContractError("K must be >= 1 and restarts >= 0")


@dataclass
class ConstantEstimate:
    c_lower: float
    extremal_y0: np.ndarray
    restart_ratios: list
    converged: list
    running_max: float
    evaluations: int
    K: int
    T: float

    def to_json(self, config: dict | None = None) -> dict:
        return {
            "config": config or {},
            "c_lower": self.c_lower,
            "extremal_y0": [float(v) for v in self.extremal_y0],
            "restarts": [
                {"index": i, "ratio": r, "converged": c}
                for i, (r, c) in enumerate(zip(self.restart_ratios, self.converged))
            ],
            "evaluations": self.evaluations,
            "K": self.K,
            "T": self.T,
        }


# -- observation operators -------------------------------------------------


@dataclass(frozen=True, eq=False)
class AbsObservation:
    """``a -> int_D |y(x, t; a)|`` as ``sum_r w_r |(L a)_r|`` with exact modal time dependence."""

    L: np.ndarray
    w: np.ndarray

    def __call__(self, a) -> float:
        return float(self.w @ np.abs(self.L @ a))

    def subgradient(self, a) -> np.ndarray:
        return self.L.T @ (self.w * np.sign(self.L @ a))


def abs_observation(sys: EigenSystem, pieces) -> AbsObservation:
    """Stack trapezoid nodes ``(times, weights, section)`` into one operator."""
    blocks, weights = [], []
    E = sys.eigenfunctions
    for taus, tw, section in pieces:
        cw = sys.mass * support_weights(sys, section)
        act = cw > 0
        if not act.any():
            continue
        Ea = E[:, act].T
        for tau, wt in zip(taus, tw):
            if wt == 0:
                continue
            blocks.append(Ea * np.exp(-sys.eigenvalues * tau))
            weights.append(wt * cw[act])
    if not blocks:
        return AbsObservation(np.zeros((0, sys.K)), np.zeros(0))
    return AbsObservation(np.vstack(blocks), np.concatenate(weights))


class _RatioTracker:
    """Ratio ``||e^{-w T} a|| / obs(a)`` that records the best value ever evaluated."""

    def __init__(self, sys: EigenSystem, obs: AbsObservation, T: float):
        self.decay = np.exp(-sys.eigenvalues * T)
        self.obs = obs
        self.best = -np.inf
        self.best_a = None
        self.count = 0

    def ratio(self, a) -> float:
        den = self.obs(a)
        num = float(np.linalg.norm(self.decay * a))
        r = num / den if den > 0 else np.inf
        self.count += 1
        if r > self.best:
            self.best, self.best_a = r, np.array(a, dtype=float)
        return r

    def grad(self, a) -> np.ndarray:
        den = self.obs(a)
        ya = self.decay * a
        num = float(np.linalg.norm(ya))
        gnum = self.decay * ya / num
        return (gnum * den - num * self.obs.subgradient(a)) / den**2


def _ascend(tracker: _RatioTracker, a0, max_iter: int, gtol: float = 1e-10):
    """Projected gradient ascent on the unit sphere with Armijo backtracking."""
    a = a0 / np.linalg.norm(a0)
    r = tracker.ratio(a)
    step = 0.5
    for _ in range(max_iter):
        if not np.isfinite(r):
            return a, r, False
        g = tracker.grad(a)
        g -= (g @ a) * a
        gn = float(np.linalg.norm(g))
        if gn <= gtol * r:
            return a, r, True
        d = g / gn
        step = min(1.0, 2.0 * step)
        while True:
            trial = a + step * d
            trial /= np.linalg.norm(trial)
            rt = tracker.ratio(trial)
            if rt >= r + 1e-4 * step * gn:
                a, r = trial, rt
                break
            step *= 0.5
            if step < 1e-12:
                return a, r, True
    return a, r, False


def estimate_obs_constant(
    cfg: ObservabilityConfig,
    sys: EigenSystem | None = None,
    init_probes=None,
    workers: int = 1,
) -> ConstantEstimate:
    """Best ratio ``||y(T)|| / int_D |y|`` over unit initial data in the K-mode span.

    Restarts draw from independent streams spawned from ``cfg.seed``;
    ``init_probes`` are extra starting vectors (zero-padded to K) tried
    first. The reported ``c_lower`` is the maximum over every evaluated
    ratio, hence a certified lower bound at truncation K.
    """
    if cfg.D.measure == 0:
        raise GeometryError("D has zero measure")
    if sys is None:
        spec = DegenerateOperatorSpec(cfg.alpha, cfg.n_cells, cfg.grading)
        sys = eigen_fd(spec, cfg.K)
    elif sys.K != cfg.K:
        sys = sys.truncate(cfg.K)
    obs = abs_observation(sys, abs_quadrature(cfg.D, cfg.grid))
    if obs.L.shape[0] == 0:
        raise GeometryError("D does not meet the mesh")

    starts = []
    for p in init_probes or ():
        p = np.asarray(p, dtype=float)
        pad = np.zeros(sys.K)
        pad[: min(p.size, sys.K)] = p[: sys.K]
        if np.linalg.norm(pad) > 0:
            starts.append(pad)
    for child in np.random.SeedSequence(cfg.seed).spawn(cfg.restarts):
        starts.append(np.random.default_rng(child).standard_normal(sys.K))
    if not starts:
        starts.append(np.eye(sys.K)[0])

    def one(a0):
        tr = _RatioTracker(sys, obs, cfg.grid.T)
        a, r, ok = _ascend(tr, a0, cfg.max_iter)
        return tr.best, tr.best_a, ok, tr.count

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(one, starts))
    else:
        results = [one(a0) for a0 in starts]

    best = max(range(len(results)), key=lambda i: results[i][0])
    c = results[best][0]
    if not np.isfinite(c):
        raise ContractError("observation vanishes on some initial datum; ratio is unbounded")
    return ConstantEstimate(
        c_lower=float(c),
        extremal_y0=results[best][1],
        restart_ratios=[float(r[0]) for r in results],
        converged=[bool(r[2]) for r in results],
        running_max=float(c),
        evaluations=int(sum(r[3] for r in results)),
        K=sys.K,
        T=cfg.grid.T,
    )


def probe_ratio(sys: EigenSystem, D: SpaceTimeSet, grid: TimeGrid, y0) -> float:
    """Ratio for a single initial datum, on the estimator's quadrature."""
    tr = _RatioTracker(sys, abs_observation(sys, abs_quadrature(D, grid)), grid.T)
    y0 = np.asarray(y0, dtype=float)
    a = np.zeros(sys.K)
    a[: y0.size] = y0
    return tr.ratio(a)


# -- adjoint form ----------------------------------------------------------


def _gauss_pieces(E: IntervalSet, T: float, n_sub: int, order: int):
    """Gauss-Legendre nodes/weights covering ``E ∩ (0, T)``."""
    xg, wg = np.polynomial.legendre.leggauss(order)
    ts, ws = [], []
    for a, b in E.intersect(IntervalSet.interval(0, as_fraction(T))):
        edges = np.linspace(float(a), float(b), n_sub + 1)
        for lo, hi in zip(edges[:-1], edges[1:]):
            ts.append(0.5 * (hi - lo) * xg + 0.5 * (hi + lo))
            ws.append(0.5 * (hi - lo) * wg)
    if not ts:
        return np.zeros(0), np.zeros(0)
    return np.concatenate(ts), np.concatenate(ws)


@dataclass
class AdjointCheck:
    worst_ratio: float
    worst_zT: np.ndarray
    ratios: np.ndarray


def adjoint_ratio(sys, omega, E, T, zT, n_sub=8, order=16) -> float:
    """``||z(0)|| / int_E ||chi_omega z(t)|| dt`` for one terminal datum."""
    Q = set_gram(sys, omega)
    ts, ws = _gauss_pieces(E, T, n_sub, order)
    zT = np.asarray(zT, dtype=float)
    Z = zT * np.exp(-np.outer(T - ts, sys.eigenvalues[: zT.size]))
    K = zT.size
    den = ws @ np.sqrt(np.maximum(np.einsum("qk,kl,ql->q", Z, Q[:K, :K], Z), 0.0))
    return float(np.linalg.norm(zT * np.exp(-sys.eigenvalues[:K] * T)) / den)


def adjoint_obs_check(sys: EigenSystem, omega: IntervalSet, E: IntervalSet, T: float, samples: int = 64, seed: int = 0) -> AdjointCheck:
    """Worst ratio over coordinate probes and ``samples`` random unit ``z_T``."""
    if omega.measure == 0 or E.measure == 0:
        raise GeometryError("omega and E must have positive measure")
    rng = np.random.default_rng(seed)
    probes = list(np.eye(sys.K))
    for _ in range(samples):
        v = rng.standard_normal(sys.K)
        probes.append(v / np.linalg.norm(v))
    ratios = np.array([adjoint_ratio(sys, omega, E, T, p) for p in probes])
    i = int(np.argmax(ratios))
    return AdjointCheck(float(ratios[i]), probes[i], ratios)


# -- open-set scaling ------------------------------------------------------


@dataclass
class BlowupFit:
    slope: float
    intercept: float
    residual: float
    T: list
    c_lower: list
    mu: float


def blowup_exponent_fit(
    alpha: float,
    omega: IntervalSet,
    mu: float | None,
    T_list,
    K: int = 8,
    restarts: int = 8,
    seed: int = 0,
    n_steps: int = 40,
    sys: EigenSystem | None = None,
) -> BlowupFit:
    """Least-squares fit of ``log c_lower(T)`` against ``T^(-mu/(1-mu))``.

    Horizons are processed from longest to shortest, each run seeded with the
    previous extremal datum, so the estimates inherit the per-probe
    monotonicity in T.
    """
    T_list = [float(t) for t in T_list]
    if len(T_list) < 4:
        raise ContractError("at least 4 horizons are needed")
    if any(t <= 0 for t in T_list):
        raise ContractError("horizons must be positive")
    mu = default_mu(alpha) if mu is None else mu
    if sys is None:
        sys = eigen_fd(DegenerateOperatorSpec(alpha), K)
    order = sorted(range(len(T_list)), key=lambda i: -T_list[i])
    c = [0.0] * len(T_list)
    probe = None
    for i in order:
        T = T_list[i]
        D = SpaceTimeSet.product(omega, IntervalSet.interval(0, as_fraction(T)))
        cfg = ObservabilityConfig(alpha, D, TimeGrid(T, n_steps), seed=seed, K=K, mu=mu, restarts=restarts)
        est = estimate_obs_constant(cfg, sys, init_probes=None if probe is None else [probe])
        c[i] = est.c_lower
        probe = est.extremal_y0
    x = np.array(T_list) ** (-mu / (1.0 - mu))
    y = np.log(c)
    A = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = float(np.linalg.norm(A @ coef - y))
    return BlowupFit(float(coef[1]), float(coef[0]), resid, T_list, c, mu)


def fit_log_linear(T_list, c_list, mu):
    """The regression step of :func:`blowup_exponent_fit` on given data."""
    x = np.asarray(T_list, dtype=float) ** (-mu / (1.0 - mu))
    y = np.log(np.asarray(c_list, dtype=float))
    A = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return float(coef[1]), float(coef[0]), float(np.linalg.norm(A @ coef - y))


# -- analytic growth -------------------------------------------------------


def fornberg_weights(z: float, x, m: int) -> np.ndarray:
    """Finite-difference weights at ``z`` on nodes ``x`` for derivatives ``0..m``.

    Returns an array of shape ``(m + 1, len(x))``.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    c = np.zeros((n, m + 1))
    c1, c4 = 1.0, x[0] - z
    c[0, 0] = 1.0
    for i in range(1, n):
        mn = min(i, m)
        c2, c5, c4 = 1.0, c4, x[i] - z
        for j in range(i):
            c3 = x[i] - x[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    c[i, k] = c1 * (k * c[i - 1, k - 1] - c5 * c[i - 1, k]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for k in range(mn, 0, -1):
                c[j, k] = (c4 * c[j, k] - k * c[j, k - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c.T


def _space_derivatives(sys: EigenSystem, nodes: np.ndarray, max_order: int, width: int):
    """``D[a][i, k] = d^a e_k / dx^a`` at interior ``nodes`` (centred stencils)."""
    x = sys.mesh
    n = x.size
    half = width // 2
    out = np.zeros((max_order + 1, nodes.size, sys.K))
    for r, i in enumerate(nodes):
        lo = max(0, min(i - half, n - width))
        st = np.arange(lo, lo + width)
        W = fornberg_weights(x[i], x[st], max_order)
        out[:, r, :] = W @ sys.eigenfunctions[:, st].T
    return out


@dataclass
class GrowthFit:
    C: float
    rho: float
    tau: float
    table: list  # rows (a, gamma, observed, bound)

    @property
    def min_margin(self) -> float:
        return min(b - o for _, _, o, b in self.table)


def _solve_C(target: float, tau: float) -> float:
    """Smallest ``C >= 1`` with ``C exp(C / tau) >= target``."""
    if target <= math.e ** (1.0 / tau):
        return 1.0
    f = lambda C: math.log(C) + C / tau - math.log(target)  # noqa: E731
    hi = 2.0
    while f(hi) < 0:
        hi *= 2.0
    return brentq(f, 1.0, hi, xtol=1e-14, rtol=1e-14)


def analytic_growth_check(
    sys: EigenSystem,
    omega: IntervalSet,
    y0,
    t: float,
    s: float = 0.0,
    max_order: int = 4,
    rho: float | None = None,
    rho_grid=None,
    width: int | None = None,
) -> GrowthFit:
    """Fit ``(C, rho)`` in ``|d_x^a d_t^g y| <= C e^{C/tau} a! g! / (rho^a (tau/2)^g) ||y(s)||``.

    ``y0`` is the state at time ``s`` (mode vector), ``tau = t - s``.
    Time derivatives are exact (``(-w^2)^g`` per mode); space derivatives use
    Fornberg stencils on the mesh nodes inside ``omega``. For fixed ``rho``
    the minimal ``C >= 1`` is solved exactly; otherwise ``rho`` is chosen on
    ``rho_grid`` to minimize ``log C + log(1/rho)``.
    """
    if omega.is_empty or omega.lower <= 0:
        raise HypothesisError("closure of omega must exclude 0")
    if not 0 <= s < t:
        raise ContractError("need 0 <= s < t")
    tau = t - s
    y0 = np.asarray(y0, dtype=float)
    y0 = np.concatenate([y0, np.zeros(sys.K - y0.size)])[: sys.K]
    norm0 = float(np.linalg.norm(y0))
    if norm0 == 0:
        raise ContractError("y(s) must be nonzero")
    width = width or max_order + 5
    x = sys.mesh
    inside = np.array([i for i in range(x.size) if omega.contains(Fraction(x[i]))])
    inside = inside[(inside >= width // 2) & (inside < x.size - width // 2)]
    if inside.size == 0:
        raise ContractError("omega contains no interior mesh nodes")
    Dx = _space_derivatives(sys, inside, max_order, width)
    lam = sys.eigenvalues
    a_t = y0 * np.exp(-lam * tau)
    obs = {}
    for a in range(max_order + 1):
        for g in range(max_order + 1 - a):
            vals = Dx[a] @ (a_t * (-lam) ** g)
            obs[(a, g)] = float(np.abs(vals).max()) / norm0

    def fit(r):
        target = max(
            o * r**a * (tau / 2) ** g / (math.factorial(a) * math.factorial(g))
            for (a, g), o in obs.items()
        )
        return _solve_C(max(target, 1e-300), tau)

    if rho is None:
        grid = np.linspace(0.05, 1.0, 20) if rho_grid is None else np.asarray(rho_grid, float)
        scores = [(math.log(fit(r)) + math.log(1.0 / r), r) for r in grid]
        rho = min(scores)[1]
    C = fit(rho)
    scale = C * math.exp(C / tau)
    table = [
        (a, g, o, scale * math.factorial(a) * math.factorial(g) / (rho**a * (tau / 2) ** g))
        for (a, g), o in sorted(obs.items())
    ]
    return GrowthFit(C, float(rho), tau, table)


# -- propagation of smallness ---------------------------------------------


@dataclass
class SmallnessCheck:
    sup: float
    average: float
    M: float
    rho: float | None
    thetas: np.ndarray
    C_min: np.ndarray
    holds: np.ndarray
    theta_fit: float | None

    @property
    def any_holds(self) -> bool:
        return bool(self.holds.any())


def smallness_propagation_check(
    f,
    a: float,
    s: float,
    F: IntervalSet,
    M: float,
    rho: float | None = None,
    thetas=None,
    n_dense: int = 4001,
    order: int = 16,
) -> SmallnessCheck:
    """Minimal ``C(theta)`` with ``sup|f| <= C M^(1-theta) (avg_F |f|)^theta``.

    ``f`` is a vectorized callable on ``[a, a + s]``; the sup is taken on a
    dense grid plus the Gauss nodes, the average by Gauss-Legendre on each
    interval of ``F``.
    """
    if F.measure == 0:
        raise GeometryError("F has zero measure")
    if not F.is_subset_of(IntervalSet.interval(as_fraction(a), as_fraction(a) + as_fraction(s))):
        raise ContractError("F must lie inside [a, a + s]")
    if M <= 0:
        raise ContractError("M must be positive")
    xg, wg = np.polynomial.legendre.leggauss(order)
    integral = 0.0
    gauss = []
    for lo, hi in F:
        lo, hi = float(lo), float(hi)
        pts = 0.5 * (hi - lo) * xg + 0.5 * (hi + lo)
        integral += float(0.5 * (hi - lo) * wg @ np.abs(f(pts)))
        gauss.append(pts)
    avg = integral / float(F.measure)
    dense = np.concatenate([np.linspace(a, a + s, n_dense)] + gauss)
    sup = float(np.abs(f(dense)).max())
    thetas = np.linspace(0.01, 0.99, 99) if thetas is None else np.asarray(thetas, float)
    if avg == 0:
        C = np.where(sup == 0, 0.0, np.inf) * np.ones_like(thetas)
    else:
        C = sup / (M ** (1 - thetas) * avg**thetas)
    holds = C <= 1.0 + 1e-12
    theta_fit = float(thetas[holds].max()) if holds.any() else None
    return SmallnessCheck(sup, avg, M, rho, thetas, C, holds, theta_fit)


# -- interpolation inequality ---------------------------------------------


@dataclass
class InterpFit:
    C: float
    theta: float
    violations: int
    holdout: int
    calibration: int
    slack: float
    log_lhs: np.ndarray = field(repr=False)
    log_obs: np.ndarray = field(repr=False)
    kappa: float = 0.0


def _restrict_time(D: SpaceTimeSet, E: IntervalSet) -> SpaceTimeSet:
    rects = []
    for x0, x1, t0, t1 in D.cells:
        for e0, e1 in E:
            lo, hi = max(t0, e0), min(t1, e1)
            if hi > lo:
                rects.append((x0, x1, lo, hi))
    return SpaceTimeSet.of(rects)


def _sup_need(Y, log_lhs, log_obs, decay, obs, theta, kappa, n_starts: int = 8) -> float:
    """Sup over unit data of ``(log ||y(t2)|| - theta log obs) / ((1 - theta) kappa)``.

    Local ascent from the ``n_starts`` worst calibration draws; the objective
    is homogeneous, so it is maximized over unnormalized coefficients.
    """
    d2 = decay**2

    def neg(a):
        na2 = float(a @ a)
        la = obs.L @ a
        o = float(np.abs(la) @ obs.w)
        lhs2 = float(d2 @ (a * a))
        if o <= 0 or lhs2 <= 0:
            return 0.0, np.zeros_like(a)
        f = 0.5 * math.log(lhs2) - theta * math.log(o) - 0.5 * (1 - theta) * math.log(na2)
        g = d2 * a / lhs2 - theta * ((obs.w * np.sign(la)) @ obs.L) / o - (1 - theta) * a / na2
        return -f, -g

    need = (log_lhs - theta * log_obs) / ((1 - theta) * kappa)
    best = float(need.max())
    for i in np.argsort(need)[::-1][:n_starts]:
        res = minimize(neg, Y[i], jac=True, method="L-BFGS-B")
        a = res.x
        if np.linalg.norm(a) > 0:
            best = max(best, -neg(a)[0] / ((1 - theta) * kappa))
    return best


def interp_inequality_fit(
    sys: EigenSystem,
    t1: float,
    t2: float,
    E: IntervalSet,
    D: SpaceTimeSet,
    omega: IntervalSet,
    sample_count: int = 500,
    seed: int = 0,
    mu: float | None = None,
    eta: float = 1 / 3,
    sigma: float | None = None,
    n_sub: int = 64,
    inflate: float = 1.05,
) -> InterpFit:
    """Fit ``(C, theta)`` in ``||y(t2)|| <= obs^theta (e^{C kappa} ||y(t1)||)^(1-theta)``.

    ``obs = int_{t1}^{t2} chi_E ||y||_{L^1(D_t)} dt`` and
    ``kappa = (t2 - t1)^(-mu/(1-mu))``. Unit ``y(t1)`` are drawn from the
    seed; the first half calibrates (minimal ``C >= 1`` per ``theta``, then
    the ``theta`` of least mean log-slack, then ``C`` raised to the sup over
    the unit sphere by local ascent from the worst draws), the second half
    counts violations at ``inflate * C``.
    """
    if not 0 <= t1 < t2 < 1:
        raise HypothesisError("need 0 <= t1 < t2 < 1")
    mu = default_mu(sys.alpha) if mu is None else mu
    sigma = float(omega.measure) / 2 if sigma is None else sigma
    win = E.intersect(IntervalSet.interval(as_fraction(t1), as_fraction(t2)))
    if float(win.measure) < eta * (t2 - t1):
        raise HypothesisError(f"|E ∩ (t1, t2)| = {float(win.measure):.6g} < eta (t2 - t1)")
    Dw = _restrict_time(D, win)
    if not Dw.space_support().is_subset_of(omega):
        raise HypothesisError("slices D_t must lie in omega")
    covered = Dw.time_support()
    if covered.measure != win.measure:
        raise HypothesisError("some t in E has an empty slice D_t (sigma hypothesis)")
    for _, _, section in Dw.time_pieces():
        if float(section.measure) < sigma:
            raise HypothesisError(f"slice measure {float(section.measure):.6g} < sigma = {sigma:.6g}")
    if sample_count < 2:
        raise ContractError("sample_count must be >= 2")

    # times measured from t1: y(t) = e^{-w (t - t1)} y(t1)
    shifted = SpaceTimeSet.of([(x0, x1, s0 - as_fraction(t1), s1 - as_fraction(t1)) for x0, x1, s0, s1 in Dw.cells])
    span = t2 - t1
    obs = abs_observation(sys, abs_quadrature(shifted, TimeGrid(span, n_sub)))
    decay = np.exp(-sys.eigenvalues * span)

    rng = np.random.default_rng(seed)
    Y = rng.standard_normal((sample_count, sys.K))
    Y /= np.linalg.norm(Y, axis=1, keepdims=True)
    log_lhs = np.log(np.linalg.norm(Y * decay, axis=1))
    log_obs = np.log(np.abs(Y @ obs.L.T) @ obs.w)
    kappa = span ** (-mu / (1.0 - mu))

    n_cal = sample_count // 2
    cal = slice(0, n_cal)
    thetas = np.linspace(0.01, 0.99, 99)
    best = None
    for th in thetas:
        need = (log_lhs[cal] - th * log_obs[cal]) / ((1 - th) * kappa)
        C = max(1.0, float(need.max()))
        rhs = th * log_obs[cal] + (1 - th) * C * kappa
        slack = float(np.mean(rhs - log_lhs[cal]))
        if best is None or slack < best[2]:
            best = (C, float(th), slack)
    C, th, slack = best
    C = max(C, _sup_need(Y[cal], log_lhs[cal], log_obs[cal], decay, obs, th, kappa))
    hold = slice(n_cal, sample_count)
    rhs = th * log_obs[hold] + (1 - th) * inflate * C * kappa
    violations = int(np.sum(log_lhs[hold] > rhs))
    return InterpFit(C, th, violations, sample_count - n_cal, n_cal, slack, log_lhs, log_obs, kappa)


# -- reports ---------------------------------------------------------------


def write_report(est: ConstantEstimate, path, config: dict | None = None) -> Path:
    path = Path(path)
    path.write_text(json.dumps(est.to_json(config), indent=2, sort_keys=True))
    return path


def scaling_csv(T_list, c_list, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["T", "c_lower"])
        for T, c in zip(T_list, c_list):
            w.writerow([repr(float(T)), repr(float(c))])
    return path

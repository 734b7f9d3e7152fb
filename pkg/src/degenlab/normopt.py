"""Norm-optimal leader control through its dual variational problem.

For a terminal adjoint datum ``z`` the observation on time cell ``j`` is the
cell integral ``Zc_j = Phi_j * z`` restricted to ``omega``; with
``n_j(z) = ||chi_omega Zc_j||`` the dual functional is

    J(z) = 1/2 (sum_j n_j(z))^2 + <y_free(T), z>,

where ``y_free(T)`` is the terminal state produced by ``y0`` and the fixed
followers alone. For piecewise-constant leaders this is exactly the dual of
``min max_j ||g_j||`` subject to ``y(T) = 0``, so ``min J = -N^2 / 2``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky
from scipy.optimize import minimize
from scipy.special import logsumexp

from .geometry import IntervalSet
from .pde import Control, ContractError, TimeGrid, set_gram, terminal_weights
from .spectral import EigenSystem, NumericalError

DEFAULT_EPS = tuple(10.0 ** -k for k in range(2, 9))


@dataclass(eq=False)
class LeaderProblem:
    """Leader steering ``y0`` to rest on ``omega`` while the followers act as given."""

    sys: EigenSystem
    grid: TimeGrid
    omega: IntervalSet
    y0: np.ndarray
    u1: Control | None = None
    u2: Control | None = None
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        y0 = np.asarray(self.y0, dtype=float)
        if y0.size > self.sys.K:
            raise ContractError(f"y0 has {y0.size} modes, system has {self.sys.K}")
        self.y0 = np.concatenate([y0, np.zeros(self.sys.K - y0.size)])
        if self.omega.measure == 0:
            raise ContractError("omega must have positive measure")
        for u in (self.u1, self.u2):
            if u is not None and u.grid != self.grid:
                raise ContractError("follower control defined on a different time grid")

    @property
    def phi(self) -> np.ndarray:
        if "phi" not in self._cache:
            self._cache["phi"] = terminal_weights(self.sys, self.grid)
        return self._cache["phi"]

    @property
    def Q(self) -> np.ndarray:
        if "Q" not in self._cache:
            self._cache["Q"] = set_gram(self.sys, self.omega)
        return self._cache["Q"]

    @property
    def free_terminal(self) -> np.ndarray:
        if "free" not in self._cache:
            yT = self.y0 * np.exp(-self.sys.eigenvalues * self.grid.T)
            for u in (self.u1, self.u2):
                if u is not None:
                    yT = yT + np.einsum("jk,jk->k", self.phi, u.source_modes(self.sys))
            self._cache["free"] = yT
        return self._cache["free"]

    def terminal(self, g: Control | None) -> np.ndarray:
        yT = self.free_terminal
        if g is not None:
            if g.grid != self.grid:
                raise ContractError("leader control defined on a different time grid")
            yT = yT + np.einsum("jk,jk->k", self.phi, g.source_modes(self.sys))
        return yT

    def with_y0(self, y0) -> "LeaderProblem":
        return LeaderProblem(self.sys, self.grid, self.omega, y0, self.u1, self.u2)


@dataclass
class DualVariable:
    zT_coeffs: np.ndarray
    _obs: np.ndarray | None = field(default=None, repr=False)

    def observation(self, prob: LeaderProblem) -> np.ndarray:
        """Cell-integrated adjoint modes ``Zc`` (rows = time cells)."""
        if self._obs is None or self._obs.shape != prob.phi.shape:
            self._obs = prob.phi * self.zT_coeffs
        return self._obs

    def cell_norms(self, prob: LeaderProblem) -> np.ndarray:
        Zc = self.observation(prob)
        return np.sqrt(np.maximum(np.einsum("jk,kl,jl->j", Zc, prob.Q, Zc), 0.0))


def _as_dual(prob: LeaderProblem, z) -> DualVariable:
    if isinstance(z, DualVariable):
        return z
    z = np.asarray(z, dtype=float)
    return DualVariable(np.concatenate([z, np.zeros(prob.sys.K - z.size)]))


def dual_J(prob: LeaderProblem, z) -> float:
    """``1/2 (sum_j ||chi_omega Zc_j||)^2 + <y0, z(0)> + <follower forcing, z>``."""
    z = _as_dual(prob, z)
    S = float(z.cell_norms(prob).sum())
    return 0.5 * S * S + float(prob.free_terminal @ z.zT_coeffs)


def _smoothed(prob: LeaderProblem, z: np.ndarray, eps: float, hessian: bool = True):
    """Value, gradient and Hessian of ``J`` with ``n_j -> sqrt(n_j^2 + eps^2)``."""
    P = prob.phi
    Zc = P * z
    QZ = Zc @ prob.Q
    s = np.sqrt(np.einsum("jk,jk->j", Zc, QZ) + eps * eps)
    N = float(s.sum())
    A = P * QZ  # d n_j^2 / dz / 2, row j
    gN = np.einsum("jk,j->k", A, 1.0 / s)
    val = 0.5 * N * N + float(prob.free_terminal @ z)
    grad = N * gN + prob.free_terminal
    if not hessian:
        return val, grad, None
    H = np.einsum("jk,j,jl->kl", P, 1.0 / s, P) * prob.Q
    H -= np.einsum("jk,j,jl->kl", A, 1.0 / s**3, A)
    H = N * H + np.outer(gN, gN)
    return val, grad, H


@dataclass
class DualSolution:
    z: DualVariable
    V: float
    zero_case: bool
    eps_path: list  # (eps, smoothed minimum, newton iterations)
    status: str


def _newton(prob: LeaderProblem, z: np.ndarray, eps: float, tol: float, max_iter: int):
    """Damped Newton; converged on a small gradient or a machine-level Newton decrement."""
    val, grad, H = _smoothed(prob, z, eps)
    scale = max(float(np.linalg.norm(prob.free_terminal)), 1e-300)
    for it in range(1, max_iter + 1):
        gn = float(np.linalg.norm(grad))
        if gn <= tol * scale:
            return z, val, it - 1, True
        try:
            step = -cho_solve(cho_factor(H), grad)
        except np.linalg.LinAlgError:
            step = -np.linalg.lstsq(H, grad, rcond=None)[0]
        slope = float(grad @ step)
        if slope >= 0:
            step, slope = -grad, -gn * gn
        if -slope <= 1e-15 * abs(val):
            return z, val, it - 1, True
        t = 1.0
        while True:
            zt = z + t * step
            vt = _smoothed(prob, zt, eps, hessian=False)[0]
            if vt <= val + 1e-4 * t * slope:
                break
            t *= 0.5
            if t < 1e-16:
                return z, val, it, -slope <= 1e-13 * abs(val)
        if vt >= val:  # no representable decrease left
            return z, val, it, -slope <= 1e-13 * abs(val)
        z = zt
        val, grad, H = _smoothed(prob, z, eps)
    return z, val, max_iter, float(np.linalg.norm(grad)) <= tol * scale


def dual_minimize(
    prob: LeaderProblem,
    eps_schedule=DEFAULT_EPS,
    tol: float = 1e-10,
    zero_tol: float = 1e-12,
    max_iter: int = 200,
    z0=None,
) -> DualSolution:
    """Minimize ``J`` by damped Newton on smoothed surrogates, warm-started down ``eps_schedule``.

    A last unsmoothed Newton pass runs when no cell norm vanishes (``J`` is
    smooth there) and is kept only if it lowers ``J``; it is logged in
    ``eps_path`` with ``eps = 0``.

    Raises :class:`NumericalError` (carrying the last iterate as ``.z``) if a
    level stagnates with its gradient above tolerance.
    """
    eps_schedule = [float(e) for e in eps_schedule]
    if not eps_schedule or any(e <= 0 for e in eps_schedule):
        raise ContractError("eps_schedule must be a nonempty list of positive values")
    if np.linalg.norm(prob.free_terminal) == 0:
        z = DualVariable(np.zeros(prob.sys.K))
        return DualSolution(z, 0.0, True, [(e, 0.0, 0) for e in eps_schedule], "zero")
    z = np.zeros(prob.sys.K) if z0 is None else np.array(z0, dtype=float)
    path = []
    for eps in eps_schedule:
        z, val, iters, ok = _newton(prob, z, eps, tol, max_iter)
        path.append((eps, float(val), iters))
        if not ok:
            err = NumericalError(f"dual descent stagnated at eps={eps:g}")
            err.z = z
            raise err
    # J itself is smooth where no cell norm vanishes: finish without smoothing
    n = DualVariable(z).cell_norms(prob)
    if n.min() > 1e-12 * max(n.max(), 1e-300):
        zp, _, iters, ok = _newton(prob, z, 0.0, tol, max_iter)
        if ok and np.all(np.isfinite(zp)) and dual_J(prob, zp) <= dual_J(prob, z):
            z = zp
            path.append((0.0, float(dual_J(prob, z)), iters))
    dz = DualVariable(z)
    zero = float(np.linalg.norm(z)) <= zero_tol
    if zero:
        dz = DualVariable(np.zeros(prob.sys.K))
    return DualSolution(dz, dual_J(prob, dz), zero, path, "zero" if zero else "converged")


def recover_leader(prob: LeaderProblem, sol: DualSolution | DualVariable, zero_case: bool | None = None) -> Control:
    """``g_j = S chi_omega Zc_j / ||chi_omega Zc_j||`` with ``S = sum_j ||chi_omega Zc_j||``."""
    if isinstance(sol, DualSolution):
        z, zero_case = sol.z, sol.zero_case if zero_case is None else zero_case
    else:
        z = sol
    sys = prob.sys
    if zero_case:
        return Control.zeros(sys, prob.grid, prob.omega)
    # normalize with the grid norm itself so every cell lands on S to rounding
    obs = Control.make(sys, prob.grid, prob.omega, z.observation(prob) @ sys.eigenfunctions)
    n = obs.cell_norms()
    bad = np.flatnonzero(n < 1e-14)
    if bad.size:
        raise NumericalError(f"||chi_omega z*|| vanishes on time cell {int(bad[0])}")
    S = float(n.sum())
    return obs.with_values(obs.values * (S / n)[:, None])


# -- independent primal estimate --------------------------------------------


@dataclass
class PrimalSolution:
    N: float
    g: Control
    residual: float
    feasible: bool


def _epigraph_refine(A, yf, h, n, K, cell):
    """Sharpen the surrogate optimum: ``min t`` s.t. ``||h_j||^2 <= t^2``, ``A h = -yf`` (SLSQP).

    The refined point replaces ``h`` only if it stays on the constraint and
    lowers the max cell norm.
    """
    yn = float(np.linalg.norm(yf))
    blocks = np.kron(np.eye(n), np.ones((1, K)))
    e_t = np.zeros(n * K + 1)
    e_t[-1] = 1.0
    cons = [
        {
            "type": "ineq",
            "fun": lambda x: x[-1] ** 2 - np.einsum("jk,jk->j", x[:-1].reshape(n, K), x[:-1].reshape(n, K)),
            "jac": lambda x: np.hstack([-2.0 * blocks * x[:-1], 2.0 * x[-1] * np.ones((n, 1))]),
        },
        {
            "type": "eq",
            "fun": lambda x: (A @ x[:-1] + yf) / yn,
            "jac": lambda x: np.hstack([A, np.zeros((A.shape[0], 1))]) / yn,
        },
    ]
    x0 = np.append(h, cell(h).max())
    res = minimize(lambda x: (x[-1], e_t), x0, jac=True, method="SLSQP", constraints=cons,
                   options={"ftol": 1e-16, "maxiter": 500})
    hr = res.x[:-1]
    hr = hr - np.linalg.lstsq(A, A @ hr + yf, rcond=None)[0]
    if np.all(np.isfinite(hr)) and cell(hr).max() < cell(h).max():
        return hr
    return h


def primal_norm(
    prob: LeaderProblem,
    delta: float | None = None,
    penalty_schedule=(1e2, 1e3, 1e4, 1e5, 1e6, 1e7, 1e8),
    temperatures=(1e-1, 3e-2, 1e-2, 3e-3, 1e-3, 3e-4, 1e-4),
    max_iter: int = 2000,
) -> PrimalSolution:
    """Smallest ``max_j ||g_j||`` with ``||y(T)|| <= delta``, without the dual.

    ``g_j = chi_omega sum_k b_jk e_k`` is parametrized by ``h_j = R b_j``,
    ``Q_omega = R^T R``, so ``||g_j|| = ||h_j||``. The max over cells is
    replaced by a log-sum-exp at decreasing temperature (relative to the
    current norm level) and the terminal constraint by an augmented
    Lagrangian with increasing penalty. An SLSQP pass on the epigraph form
    then sharpens the max, and a least-norm correction puts the terminal
    residual at rounding level.
    """
    yf = prob.free_terminal
    if delta is None:
        delta = 1e-8 * float(np.linalg.norm(prob.y0))
    if not delta > 0:
        if np.linalg.norm(yf) == 0:
            return PrimalSolution(0.0, Control.zeros(prob.sys, prob.grid, prob.omega), 0.0, True)
        raise ContractError("delta must be positive")
    sys = prob.sys
    K, n = sys.K, prob.grid.n_steps
    if np.linalg.norm(yf) == 0:
        return PrimalSolution(0.0, Control.zeros(sys, prob.grid, prob.omega), 0.0, True)
    R = cholesky(prob.Q)  # upper: Q = R^T R
    # response of h: sum_j phi_j * (R^T h_j)
    A = np.einsum("jk,lk->kjl", prob.phi, R).reshape(K, n * K)
    h, *_ = np.linalg.lstsq(A, -yf, rcond=None)

    def cell(hv):
        return np.sqrt(np.einsum("jk,jk->j", hv.reshape(n, K), hv.reshape(n, K)) + 1e-300)

    scale = float(cell(h).max())
    lam = np.zeros(K)
    for rho, tau_rel in zip(penalty_schedule, temperatures):
        tau = tau_rel * scale
        rho_s = rho * scale / max(float(yf @ yf), 1e-300)

        def f(hv):
            H = hv.reshape(n, K)
            nr = cell(hv)
            lse = tau * logsumexp(nr / tau)
            w = np.exp(nr / tau - lse / tau)
            c = A @ hv + yf
            val = lse + lam @ c + 0.5 * rho_s * (c @ c)
            gr = (H * (w / nr)[:, None]).ravel() + A.T @ (lam + rho_s * c)
            return val, gr

        res = minimize(f, h, jac=True, method="L-BFGS-B", options={"maxiter": max_iter, "gtol": 1e-14, "ftol": 1e-16})
        h = res.x
        lam = lam + rho_s * (A @ h + yf)
        scale = float(cell(h).max())
    c = A @ h + yf
    h = h - np.linalg.lstsq(A, c, rcond=None)[0]
    h = _epigraph_refine(A, yf, h, n, K, cell)
    coef = np.linalg.solve(R, h.reshape(n, K).T).T  # b_j = R^{-1} h_j
    g = Control.make(sys, prob.grid, prob.omega, coef @ sys.eigenfunctions)
    true_resid = float(np.linalg.norm(prob.terminal(g)))
    return PrimalSolution(g.linf_l2, g, true_resid, true_resid <= delta)


# -- reports -----------------------------------------------------------------


@dataclass
class NormOptReport:
    V: float
    N_dual: float
    N_primal: float | None
    g_star: Control
    z_star: DualVariable
    duality_gap: float | None
    zero_case: bool
    reach_residual: float
    eps_path: list
    primal_feasible: bool | None
    weak_duality_ok: bool | None = None

    def to_json(self) -> dict:
        return {
            "V": self.V,
            "N_dual": self.N_dual,
            "N_primal": self.N_primal,
            "duality_gap": self.duality_gap,
            "zero_case": self.zero_case,
            "reach_residual": self.reach_residual,
            "primal_feasible": self.primal_feasible,
            "weak_duality_ok": self.weak_duality_ok,
            "z_star": [float(v) for v in self.z_star.zT_coeffs],
            "eps_path": [{"eps": e, "value": v, "iterations": i} for e, v, i in self.eps_path],
            "g_norms": [float(v) for v in self.g_star.cell_norms()],
        }

    def write_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))
        return path

    def leader_csv(self, prob: LeaderProblem, path) -> Path:
        """Rows ``t, ||g*(t)||, z*_k(t)`` at the left node of each cell."""
        path = Path(path)
        z = self.z_star.zT_coeffs
        nodes = prob.grid.nodes
        norms = self.g_star.cell_norms()
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "g_norm"] + [f"z{k + 1}" for k in range(z.size)])
            for j in range(prob.grid.n_steps):
                zt = z * np.exp(-prob.sys.eigenvalues * (prob.grid.T - nodes[j]))
                w.writerow([repr(float(nodes[j])), repr(float(norms[j]))] + [repr(float(v)) for v in zt])
        return path


def reach_zero_check(prob: LeaderProblem, g: Control) -> float:
    """``||y(T; y0, g, u1, u2)||``."""
    return float(np.linalg.norm(prob.terminal(g)))


def weak_duality_violations(prob: LeaderProblem, probes, g: Control, delta: float) -> list:
    """Probes where ``J(z) < -||g||^2/2 - delta ||z||`` (must be empty for feasible ``g``)."""
    bound = -0.5 * g.linf_l2**2
    bad = []
    for z in probes:
        z = np.asarray(z, dtype=float)
        if dual_J(prob, z) < bound - delta * float(np.linalg.norm(z)) - 1e-12 * (1 + abs(bound)):
            bad.append(z)
    return bad


def duality_check(report: NormOptReport) -> float:
    """``|V + N_primal^2 / 2| / max(N_primal^2 / 2, 1e-12)``; the 0/0 case reads 0."""
    if report.N_primal is None:
        raise ContractError("primal norm missing")
    half = 0.5 * report.N_primal**2
    num = abs(report.V + half)
    if num == 0:
        return 0.0
    return num / max(half, 1e-12)


def solve_normopt(
    prob: LeaderProblem,
    eps_schedule=DEFAULT_EPS,
    tol: float = 1e-10,
    delta: float | None = None,
    primal: bool = True,
    probes: int = 32,
    seed: int = 0,
) -> NormOptReport:
    """Dual solve, leader recovery, independent primal estimate and duality checks."""
    sol = dual_minimize(prob, eps_schedule, tol)
    g = recover_leader(prob, sol)
    N_dual = float(np.sqrt(max(-2.0 * sol.V, 0.0)))
    report = NormOptReport(
        V=sol.V,
        N_dual=N_dual,
        N_primal=None,
        g_star=g,
        z_star=sol.z,
        duality_gap=None,
        zero_case=sol.zero_case,
        reach_residual=reach_zero_check(prob, g),
        eps_path=sol.eps_path,
        primal_feasible=None,
    )
    if primal:
        if delta is None:
            delta = max(1e-8 * float(np.linalg.norm(prob.y0)), 1e-300)
        ps = primal_norm(prob, delta)
        report.N_primal = ps.N
        report.primal_feasible = ps.feasible
        report.duality_gap = duality_check(report)
        rng = np.random.default_rng(seed)
        zs = [sol.z.zT_coeffs] + [rng.standard_normal(prob.sys.K) * (1 + np.linalg.norm(sol.z.zT_coeffs)) for _ in range(probes)]
        report.weak_duality_ok = ps.feasible and not weak_duality_violations(prob, zs, ps.g, delta)
    return report


def game_followers(game_spec) -> tuple:
    """Leader-independent followers: each steers toward its own target from rest."""
    from .game import null_target_follower

    return null_target_follower(1, game_spec), null_target_follower(2, game_spec)


def leader_follower_alternation(game_spec, rounds: int = 5, eps_schedule=DEFAULT_EPS, **nash_kw):
    """Exploratory fixed-point loop ``g -> Nash(g) -> g``; returns the history of reports."""
    from dataclasses import replace

    from .game import nash_solve

    spec = game_spec
    u1, u2 = game_followers(spec)
    history = []
    for _ in range(rounds):
        prob = LeaderProblem(spec.sys, spec.grid, spec.omega, spec.y0, u1, u2)
        rep = solve_normopt(prob, eps_schedule, primal=False)
        g = rep.g_star
        if g.linf_l2 > spec.M0 > 0:
            g = g.with_values(g.values * (spec.M0 / g.linf_l2))
        spec = replace(spec, g=g)
        eq = nash_solve(spec, **nash_kw)
        history.append((rep, eq))
        u1, u2 = eq.u1, eq.u2
    return history

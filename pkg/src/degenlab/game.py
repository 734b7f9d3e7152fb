"""Two-follower Nash games steered by a fixed leader control.

Follower ``i`` minimizes ``J_i = ||y(T) - yT^i||_{L^2(G_i)}`` over controls
supported on ``omega_i`` with ``||u_i(t)||_2 <= M_i`` on every time cell.
Best responses are computed by conditional gradient on ``J_i^2 / 2``; its
linear minimization oracle is the per-cell normalized adjoint
``M chi z / ||chi z||``, so every iterate and every reported optimum is built
from the same adjoint quantity that appears in the optimality condition.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import IntervalSet
from .pde import (
    Control,
    ContractError,
    TimeGrid,
    set_gram,
    support_weights,
    terminal_weights,
)
from .spectral import EigenSystem

ZERO_NORM = 1e-14


class SingularNormalization(ArithmeticError):
    def __init__(self, message, cell=None):
        super().__init__(message)
        self.cell = cell


def _modes(sys: EigenSystem, v) -> np.ndarray:
    v = np.zeros(sys.K) if v is None else np.asarray(v, dtype=float)
    if v.size > sys.K:
        raise ContractError(f"mode vector of length {v.size} exceeds K={sys.K}")
    return np.concatenate([v, np.zeros(sys.K - v.size)])


@dataclass(eq=False)
class GameSpec:
    sys: EigenSystem
    grid: TimeGrid
    omega: IntervalSet
    omega1: IntervalSet
    omega2: IntervalSet
    G1: IntervalSet
    G2: IntervalSet
    M0: float
    M1: float
    M2: float
    y0: np.ndarray
    yT1: np.ndarray
    yT2: np.ndarray
    g: Control | None = None
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        sys = self.sys
        self.y0, self.yT1, self.yT2 = (_modes(sys, v) for v in (self.y0, self.yT1, self.yT2))
        if np.linalg.norm(self.yT1 - self.yT2) <= 1e-12:
            raise ContractError("targets yT1 and yT2 must differ")
        for name, w, G in (("omega1", self.omega1, self.G1), ("omega2", self.omega2, self.G2)):
            if w.measure == 0:
                raise ContractError(f"{name} must have positive measure")
            if not w.is_subset_of(G):
                raise ContractError(f"{name} must be contained in its observation set")
        if min(self.M0, self.M1, self.M2) < 0:
            raise ContractError("control bounds must be nonnegative")
        if self.g is not None:
            if self.g.grid != self.grid:
                raise ContractError("leader control defined on a different time grid")
            if self.g.linf_l2 > self.M0 * (1 + 1e-12) + 1e-15:
                raise ContractError(f"leader norm {self.g.linf_l2} exceeds M0 = {self.M0}")

    def target(self, i: int) -> np.ndarray:
        return self.yT1 if i == 1 else self.yT2

    def bound(self, i: int) -> float:
        return self.M1 if i == 1 else self.M2

    def support(self, i: int) -> IntervalSet:
        return self.omega1 if i == 1 else self.omega2

    def obs_set(self, i: int) -> IntervalSet:
        return self.G1 if i == 1 else self.G2

    @property
    def phi(self) -> np.ndarray:
        if "phi" not in self._cache:
            self._cache["phi"] = terminal_weights(self.sys, self.grid)
        return self._cache["phi"]

    def weights(self, i: int) -> np.ndarray:
        key = ("w", i)
        if key not in self._cache:
            self._cache[key] = support_weights(self.sys, self.support(i))
        return self._cache[key]

    def gram_support(self, i: int) -> np.ndarray:
        key = ("Qw", i)
        if key not in self._cache:
            self._cache[key] = set_gram(self.sys, self.support(i))
        return self._cache[key]

    def gram_obs(self, i: int) -> np.ndarray:
        key = ("QG", i)
        if key not in self._cache:
            self._cache[key] = set_gram(self.sys, self.obs_set(i))
        return self._cache[key]

    def free_terminal(self) -> np.ndarray:
        """``y(T)`` with both followers switched off."""
        if "free" not in self._cache:
            yT = self.y0 * np.exp(-self.sys.eigenvalues * self.grid.T)
            if self.g is not None:
                yT = yT + np.einsum("jk,jk->k", self.phi, self.g.source_modes(self.sys))
            self._cache["free"] = yT
        return self._cache["free"]

    def response(self, ctrl: Control | None) -> np.ndarray:
        """Contribution of one control to ``y(T)``."""
        if ctrl is None:
            return np.zeros(self.sys.K)
        if ctrl.grid != self.grid:
            raise ContractError("control defined on a different time grid")
        return np.einsum("jk,jk->k", self.phi, ctrl.source_modes(self.sys))

    def terminal(self, u1: Control | None, u2: Control | None) -> np.ndarray:
        return self.free_terminal() + self.response(u1) + self.response(u2)

    def zero_control(self, i: int) -> Control:
        return Control.zeros(self.sys, self.grid, self.support(i))


def cost_J(i: int, spec: GameSpec, u1: Control | None, u2: Control | None) -> float:
    """``||y(T) - yT^i||_{L^2(G_i)}``."""
    if i not in (1, 2):
        raise ContractError("follower index must be 1 or 2")
    r = spec.terminal(u1, u2) - spec.target(i)
    return float(np.sqrt(max(r @ spec.gram_obs(i) @ r, 0.0)))


# -- best response ---------------------------------------------------------


def _lmo(spec: GameSpec, i: int, zT: np.ndarray, warn: bool = True):
    """Per-cell maximizer of ``<chi z, v>`` over ``||v(t)|| <= M``.

    Returns ``(V, Vsrc, znorm, Zc)``: grid values, source modes, per-cell
    norms ``||chi_omega Zc_j||`` and cell-integrated adjoint modes ``Zc``.
    """
    M = spec.bound(i)
    Zc = spec.phi * zT
    Q = spec.gram_support(i)
    znorm = np.sqrt(np.maximum(np.einsum("jk,kl,jl->j", Zc, Q, Zc), 0.0))
    small = znorm < ZERO_NORM
    if warn and small.any() and np.any(zT != 0):
        warnings.warn(
            f"adjoint vanishes on {int(small.sum())} time cell(s); zero control emitted there",
            RuntimeWarning,
            stacklevel=3,
        )
    scale = np.where(small, 0.0, M / np.where(small, 1.0, znorm))
    coef = Zc * scale[:, None]
    V = coef @ spec.sys.eigenfunctions
    Vsrc = coef @ Q
    return V, Vsrc, znorm, Zc


@dataclass
class BestResponse:
    control: Control
    vi_residual: float
    status: str  # "converged", "reachable", "max_iter"
    iterations: int
    J: float


def min_energy_control(spec: GameSpec, i: int, residual: np.ndarray, rcond: float = 1e-13):
    """Least-``L^2`` control on ``omega_i`` whose response equals ``residual``.

    Uses the Gramian ``W = Q_omega ⊙ (Phi^T Phi)``; returns ``(control, miss)``
    with ``miss`` the mode-space residual of the steering.
    """
    Q = spec.gram_support(i)
    phi = spec.phi
    W = Q * (phi.T @ phi)
    mu, *_ = np.linalg.lstsq(W, residual, rcond=rcond)
    coef = phi * mu
    ctrl = Control.make(spec.sys, spec.grid, spec.support(i), coef @ spec.sys.eigenfunctions)
    miss = float(np.linalg.norm(spec.response(ctrl) - residual))
    return ctrl, miss


def best_response(
    i: int,
    spec: GameSpec,
    other: Control | None,
    tol: float = 1e-8,
    max_iter: int = 20000,
    init: Control | None = None,
    reach_tol: float = 1e-10,
) -> BestResponse:
    """Conditional-gradient minimization of ``J_i^2 / 2`` over the ``L^inf L^2`` ball.

    ``vi_residual`` is the final Frank-Wolfe gap
    ``sum_j (M ||chi Zc_j|| - <chi Zc_j, u_j>)``, which bounds
    ``J_i(u)^2/2 - min J_i^2/2`` from above.
    """
    if i not in (1, 2):
        raise ContractError("follower index must be 1 or 2")
    sys = spec.sys
    M = spec.bound(i)
    QG = spec.gram_obs(i)
    base = spec.free_terminal() + spec.response(other) - spec.target(i)

    if M == 0:
        u = spec.zero_control(i)
        return BestResponse(u, 0.0, "converged", 0, cost_J(i, spec, *((u, other) if i == 1 else (other, u))))

    # reachable target: the minimal-energy steering is optimal if it fits in the ball
    if np.linalg.norm(base) > 0:
        u_me, miss = min_energy_control(spec, i, -base)
        r = base + spec.response(u_me)
        J_me = float(np.sqrt(max(r @ QG @ r, 0.0)))
        if u_me.linf_l2 <= M and J_me <= reach_tol * max(1.0, np.linalg.norm(base)):
            return BestResponse(u_me, 0.0, "reachable", 0, J_me)

    u = spec.zero_control(i) if init is None else init
    U = np.array(u.values)
    src = u.source_modes(sys)
    resp = np.einsum("jk,jk->k", spec.phi, src)
    status, gap, it = "max_iter", np.inf, 0
    for it in range(1, max_iter + 1):
        r = base + resp
        zT = -(QG @ r)
        V, Vsrc, znorm, Zc = _lmo(spec, i, zT, warn=(it == 1))
        gap = float(M * znorm.sum() - np.einsum("jk,jk->", Zc, src))
        if gap <= tol:
            status = "converged"
            break
        dresp = np.einsum("jk,jk->k", spec.phi, Vsrc - src)
        curv = float(dresp @ QG @ dresp)
        if curv <= 0:
            status = "converged"
            break
        lam = min(1.0, max(0.0, -float(r @ QG @ dresp) / curv))
        if lam == 0.0:
            status = "converged"
            break
        U += lam * (V - U)
        src += lam * (Vsrc - src)
        resp += lam * dresp
    u = u.with_values(U)
    r = base + resp
    if status == "converged" and np.any(QG @ r):
        polished = _polish(spec, i, base, -(QG @ r))
        if polished is not None:
            gap_p = _gap_at_response(spec, i, base, polished)
            if gap_p <= max(gap, tol):
                u, gap = polished, gap_p
                r = base + spec.response(u)
    return BestResponse(u, max(gap, 0.0), status, it, float(np.sqrt(max(r @ QG @ r, 0.0))))


def _vertex_response(spec: GameSpec, i: int, z: np.ndarray):
    """Response of the vertex ``M chi Zc / ||chi Zc||`` and its Jacobian in ``z``."""
    phi, Q, M = spec.phi, spec.gram_support(i), spec.bound(i)
    S = phi * z
    QS = S @ Q
    nu = np.sqrt(np.maximum(np.einsum("jk,jk->j", S, QS), 0.0))
    if nu.min() <= 1e-12 * max(nu.max(), 1e-300):
        return None, None
    resp = M * np.einsum("jk,jk->k", phi, QS / nu[:, None])
    # d/dz of phi_j * M Q s_j / nu_j, s_j = phi_j * z
    jac = np.zeros((z.size, z.size))
    for j in range(phi.shape[0]):
        P = phi[j]
        inner = Q - np.outer(QS[j], QS[j]) / nu[j] ** 2
        jac += (M / nu[j]) * (P[:, None] * inner * P[None, :])
    return resp, jac


def _polish(spec: GameSpec, i: int, base: np.ndarray, z: np.ndarray, max_iter: int = 30):
    """Newton solve of ``z = -Q_G (base + response(vertex(z)))``.

    The optimal control of an unreachable target is the vertex of its own
    adjoint; Frank-Wolfe iterates approach it only at ``O(sqrt(gap))`` in
    direction, this fixed point pins it to rounding level.
    """
    QG = spec.gram_obs(i)
    scale = max(float(np.linalg.norm(z)), 1e-300)
    for _ in range(max_iter):
        resp, jac = _vertex_response(spec, i, z)
        if resp is None:
            return None
        F = z + QG @ (base + resp)
        if np.linalg.norm(F) <= 1e-15 * scale:
            break
        try:
            step = np.linalg.solve(np.eye(z.size) + QG @ jac, F)
        except np.linalg.LinAlgError:
            return None
        z = z - step
        if np.linalg.norm(step) <= 1e-15 * scale:
            break
    if _vertex_response(spec, i, z)[0] is None:
        return None
    return normalized_adjoint_control(spec, i, z)


def _gap_at_response(spec: GameSpec, i: int, base: np.ndarray, u: Control) -> float:
    src = u.source_modes(spec.sys)
    r = base + np.einsum("jk,jk->k", spec.phi, src)
    _, _, znorm, Zc = _lmo(spec, i, -(spec.gram_obs(i) @ r), warn=False)
    return max(0.0, float(spec.bound(i) * znorm.sum() - np.einsum("jk,jk->", Zc, src)))


# -- equilibria ------------------------------------------------------------


@dataclass
class EquilibriumReport:
    u1: Control
    u2: Control
    cls: str
    bangbang_residual: tuple
    bangbang_fraction: tuple
    nash_gaps: tuple
    vi_residuals: tuple
    iterations: int
    converged: bool
    status: str
    J: tuple
    distances: tuple

    def to_json(self) -> dict:
        return {
            "class": self.cls,
            "converged": self.converged,
            "status": self.status,
            "iterations": self.iterations,
            "bangbang_residual": list(self.bangbang_residual),
            "bangbang_fraction": list(self.bangbang_fraction),
            "nash_gaps": list(self.nash_gaps),
            "vi_residuals": list(self.vi_residuals),
            "J": list(self.J),
            "distances": list(self.distances),
            "u1_norms": [float(v) for v in self.u1.cell_norms()],
            "u2_norms": [float(v) for v in self.u2.cell_norms()],
        }

    def norms_csv(self, path) -> Path:
        path = Path(path)
        n1, n2 = self.u1.cell_norms(), self.u2.cell_norms()
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "u1_norm", "u2_norm"])
            for t, a, b in zip(self.u1.grid.nodes[:-1], n1, n2):
                w.writerow([repr(float(t)), repr(float(a)), repr(float(b))])
        return path

    def write_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))
        return path


def bangbang_stats(ctrl: Control, M: float, tol: float = 1e-6):
    """``(max_j | ||u_j|| - M |, fraction of cells within tol)``."""
    dev = np.abs(ctrl.cell_norms() - M)
    return float(dev.max()), float(np.mean(dev <= tol))


def classify(spec: GameSpec, u1: Control | None, u2: Control | None, tol_class: float | None = None) -> str:
    sep = float(np.linalg.norm(spec.yT1 - spec.yT2))
    tol = 1e-6 * sep if tol_class is None else tol_class
    if tol >= sep / 2:
        raise ContractError(f"tol_class = {tol} must be below ||yT1 - yT2|| / 2 = {sep / 2}")
    yT = spec.terminal(u1, u2)
    d1 = np.linalg.norm(yT - spec.yT1) <= tol
    d2 = np.linalg.norm(yT - spec.yT2) <= tol
    if d1 and d2:
        return "unclassified"
    if d1:
        return "N1"
    if d2:
        return "N2"
    return "N0"


def _l1l2_diff(a: Control, b: Control) -> float:
    d = a.values - b.values
    return float(np.sqrt(np.einsum("jn,n->j", d**2, a.mass * a.weights)).sum() * a.grid.dt)


def nash_solve(
    spec: GameSpec,
    tol: float = 1e-8,
    max_rounds: int = 200,
    br_tol: float = 1e-8,
    br_max_iter: int = 20000,
    verify_probes: int = 200,
    verify_tol: float = 1e-6,
    seed: int = 0,
    tol_class: float | None = None,
) -> EquilibriumReport:
    """Gauss-Seidel alternation of best responses from ``u1 = u2 = 0``.

    Stops when both controls move by at most ``tol`` in ``L^1(0,T;L^2)``.
    The report only claims an equilibrium (``converged``) when the
    alternation stopped, both best responses met their gap tolerance and the
    probing verification found no improving deviation above ``verify_tol``.
    """
    u1, u2 = spec.zero_control(1), spec.zero_control(2)
    rounds, moved = 0, True
    for rounds in range(1, max_rounds + 1):
        br1 = best_response(1, spec, u2, br_tol, br_max_iter, init=u1)
        br2 = best_response(2, spec, br1.control, br_tol, br_max_iter, init=u2)
        change = max(_l1l2_diff(br1.control, u1), _l1l2_diff(br2.control, u2))
        u1, u2 = br1.control, br2.control
        if change <= tol:
            moved = False
            break
    vi = (_gap_at(spec, 1, u1, u2), _gap_at(spec, 2, u1, u2))
    gaps = nash_verify(spec, u1, u2, probes=verify_probes, seed=seed)
    ok = (not moved) and max(vi) <= br_tol and max(gaps) <= verify_tol
    status = "converged" if ok else ("max_rounds" if moved else "unverified")
    cls = classify(spec, u1, u2, tol_class) if ok else "unclassified"
    s1, s2 = bangbang_stats(u1, spec.M1), bangbang_stats(u2, spec.M2)
    return EquilibriumReport(
        u1=u1,
        u2=u2,
        cls=cls,
        bangbang_residual=(s1[0], s2[0]),
        bangbang_fraction=(s1[1], s2[1]),
        nash_gaps=tuple(gaps),
        vi_residuals=vi,
        iterations=rounds,
        converged=ok,
        status=status,
        J=(cost_J(1, spec, u1, u2), cost_J(2, spec, u1, u2)),
        distances=tuple(float(np.linalg.norm(spec.terminal(u1, u2) - t)) for t in (spec.yT1, spec.yT2)),
    )


def _gap_at(spec: GameSpec, i: int, u1: Control, u2: Control) -> float:
    """Frank-Wolfe gap of follower ``i`` at the pair."""
    u, other = (u1, u2) if i == 1 else (u2, u1)
    base = spec.free_terminal() + spec.response(other) - spec.target(i)
    return _gap_at_response(spec, i, base, u)


def _random_sources(spec: GameSpec, i: int, rng, n: int, extreme: bool) -> np.ndarray:
    """Source modes of ``n`` random feasible controls in the span of ``chi e_k``."""
    Q = spec.gram_support(i)
    M = spec.bound(i)
    coef = rng.standard_normal((n, spec.grid.n_steps, spec.sys.K))
    nrm = np.sqrt(np.maximum(np.einsum("pjk,kl,pjl->pj", coef, Q, coef), 0.0))
    nrm = np.where(nrm > 0, nrm, 1.0)
    radius = M if extreme else M * rng.uniform(0.0, 1.0, (n, spec.grid.n_steps))
    coef *= (radius / nrm)[..., None]
    return coef @ Q


def nash_verify(spec: GameSpec, u1: Control, u2: Control, probes: int = 200, seed: int = 0):
    """Worst improvement ``J_i(u*) - J_i(v)`` over probing deviations ``v``.

    Probes mix random ball points, random extreme points, the
    conditional-gradient vertex ``v`` and points ``u* + lam (v - u*)`` on the
    segments towards every probe.
    """
    if probes < 1:
        raise ContractError("probes must be >= 1")
    rng = np.random.default_rng(seed)
    phi = spec.phi
    out = []
    for i in (1, 2):
        u = u1 if i == 1 else u2
        other = u2 if i == 1 else u1
        QG = spec.gram_obs(i)
        base = spec.free_terminal() + spec.response(other) - spec.target(i)
        src_u = u.source_modes(spec.sys)
        r_u = base + np.einsum("jk,jk->k", phi, src_u)
        J_u = float(np.sqrt(max(r_u @ QG @ r_u, 0.0)))

        n_ball = probes // 2
        n_ext = probes - n_ball - 1
        parts = []
        if n_ball:
            parts.append(_random_sources(spec, i, rng, n_ball, extreme=False))
        if n_ext > 0:
            parts.append(_random_sources(spec, i, rng, n_ext, extreme=True))
        _, Vsrc, _, _ = _lmo(spec, i, -(QG @ r_u), warn=False)
        parts.append(Vsrc[None])
        S = np.concatenate(parts, axis=0)  # (P, n_steps, K)
        resp = np.einsum("jk,pjk->pk", phi, S)
        cand = [resp]
        u_resp = r_u - base
        for lam in (1e-3, 1e-2, 0.1, 0.5):
            cand.append(u_resp + lam * (resp - u_resp))
        R = base + np.concatenate(cand, axis=0)
        J = np.sqrt(np.maximum(np.einsum("pk,kl,pl->p", R, QG, R), 0.0))
        out.append(float(J_u - J.min()))
    return tuple(out)


# -- closed-form followers ---------------------------------------------------


def normalized_adjoint_control(spec: GameSpec, i: int, zT, M: float | None = None) -> Control:
    """``M chi_omega_i Zc / ||chi_omega_i Zc||`` per cell, ``Zc`` the cell-integrated adjoint."""
    sys = spec.sys
    M = spec.bound(i) if M is None else M
    Zc = spec.phi * _modes(sys, zT)
    Q = spec.gram_support(i)
    znorm = np.sqrt(np.maximum(np.einsum("jk,kl,jl->j", Zc, Q, Zc), 0.0))
    bad = np.flatnonzero(znorm < ZERO_NORM)
    if bad.size:
        raise SingularNormalization(
            f"||chi_omega z|| vanishes on time cell {int(bad[0])}", cell=int(bad[0])
        )
    coef = Zc * (M / znorm)[:, None]
    return Control.make(sys, spec.grid, spec.support(i), coef @ sys.eigenfunctions)


def explicit_follower(i: int, spec: GameSpec, restrict: bool = True) -> Control:
    """Closed-form follower when the other follower's target is hit exactly.

    The adjoint runs from ``yT^i - yT^j`` (``j`` the other follower), restricted
    to ``G_i`` when ``restrict`` (the terminal datum of follower ``i``'s own
    optimality condition); with ``G_i = (0, 1)`` both readings coincide.
    """
    if i not in (1, 2):
        raise ContractError("follower index must be 1 or 2")
    d = spec.target(i) - spec.target(3 - i)
    if restrict:
        d = spec.gram_obs(i) @ d
    return normalized_adjoint_control(spec, i, d)


def null_target_follower(i: int, spec: GameSpec) -> Control:
    """Follower driven by its own target from a state at rest, independent of the leader."""
    d = spec.gram_obs(i) @ spec.target(i)
    return normalized_adjoint_control(spec, i, d)


@dataclass
class N1Report:
    precondition_met: bool
    distance: float
    gaps: tuple | None
    passes: bool | None


def n1_consistency_check(
    spec: GameSpec,
    u1: Control,
    tol: float = 1e-8,
    probes: int = 200,
    seed: int = 0,
    gap_tol: float = 1e-6,
) -> N1Report:
    """If ``(u1, explicit u2)`` steers to ``yT1``, the pair must pass :func:`nash_verify`."""
    u2 = explicit_follower(2, spec)
    dist = float(np.linalg.norm(spec.terminal(u1, u2) - spec.yT1))
    if dist > tol or u1.linf_l2 > spec.M1 * (1 + 1e-12):
        return N1Report(False, dist, None, None)
    gaps = nash_verify(spec, u1, u2, probes, seed)
    return N1Report(True, dist, gaps, max(gaps) <= gap_tol)

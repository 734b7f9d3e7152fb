"""Controlled forward and adjoint solves on the truncated eigenbasis.

Controls are piecewise constant in time: on time cell ``j`` a control is a
grid function ``u_j`` on the mesh, acting through ``chi_S u_j`` where ``S`` is
its support set. A grid function is read as piecewise constant on the control
volumes, so ``chi_S`` enters only through the overlap fraction ``c_S(n)`` of
each volume with ``S``:

    <chi_S u, e_k> = sum_n m_n c_S(n) u_n e_k(x_n),   ||chi_S u||^2 = sum_n m_n c_S(n) u_n^2.

With this reading the per-mode Duhamel formula is exact for every cell, and
so is the adjoint pairing identity.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import IntervalSet, SpaceTimeSet, as_fraction
from .spectral import EigenSystem

FULL = IntervalSet.interval(0, 1)


class ContractError(ValueError):
    """Inputs violate an operation's preconditions."""


@dataclass(frozen=True)
class TimeGrid:
    T: float
    n_steps: int

    def __post_init__(self):
        if not self.T > 0:
            raise ContractError(f"T must be positive, got {self.T}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 2:
            raise ContractError(f"n_steps must be an integer >= 2, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * (self.T / self.n_steps)


def support_weights(sys: EigenSystem, S: IntervalSet | None) -> np.ndarray:
    """Overlap fraction of each node's control volume with ``S`` (``None`` = whole interval)."""
    if S is None or S == FULL:
        return np.ones(sys.n_nodes)
    return S.node_weights(sys.volume_edges)


def set_gram(sys: EigenSystem, S: IntervalSet | None) -> np.ndarray:
    """Gram matrix of the basis restricted to ``S``; exactly ``I`` for the whole interval."""
    if S is None or S == FULL:
        return np.eye(sys.K)
    return sys.gram(support_weights(sys, S))


@dataclass(frozen=True, eq=False)
class Control:
    """Piecewise-constant-in-time control with grid values per time cell.

    ``values`` has shape ``(n_steps, n_nodes)``; values on nodes whose control
    volume misses ``support`` are zeroed on construction.
    """

    grid: TimeGrid
    values: np.ndarray
    support: IntervalSet
    mass: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)

    @classmethod
    def make(cls, sys: EigenSystem, grid: TimeGrid, support: IntervalSet | None, values) -> "Control":
        support = FULL if support is None else support
        w = support_weights(sys, support)
        values = np.array(values, dtype=float)
        if values.ndim == 1:
            values = np.broadcast_to(values, (grid.n_steps, values.size)).copy()
        if values.shape != (grid.n_steps, sys.n_nodes):
            raise ContractError(
                f"control values must have shape {(grid.n_steps, sys.n_nodes)}, got {values.shape}"
            )
        values[:, w == 0] = 0.0
        values.setflags(write=False)
        return cls(grid, values, support, sys.mass, w)

    @classmethod
    def zeros(cls, sys, grid, support=None) -> "Control":
        return cls.make(sys, grid, support, np.zeros((grid.n_steps, sys.n_nodes)))

    @classmethod
    def from_modes(cls, sys, grid, support, coeffs) -> "Control":
        """Grid values synthesized from per-cell mode coefficients ``(n_steps, K)``."""
        coeffs = np.atleast_2d(np.asarray(coeffs, dtype=float))
        if coeffs.shape[0] == 1:
            coeffs = np.repeat(coeffs, grid.n_steps, axis=0)
        K = coeffs.shape[1]
        return cls.make(sys, grid, support, coeffs @ sys.eigenfunctions[:K])

    def with_values(self, values) -> "Control":
        values = np.array(values, dtype=float)
        values[:, self.weights == 0] = 0.0
        values.setflags(write=False)
        return Control(self.grid, values, self.support, self.mass, self.weights)

    def cell_norms(self) -> np.ndarray:
        """``||chi_S u_j||_2`` for every time cell."""
        return np.sqrt(np.einsum("jn,n->j", self.values**2, self.mass * self.weights))

    @property
    def linf_l2(self) -> float:
        return float(self.cell_norms().max())

    @property
    def l1_l2(self) -> float:
        return float(self.cell_norms().sum() * self.grid.dt)

    def source_modes(self, sys: EigenSystem) -> np.ndarray:
        """``<chi_S u_j, e_k>`` as an ``(n_steps, K)`` array."""
        return (self.values * (self.mass * self.weights)) @ sys.eigenfunctions.T


@dataclass(frozen=True, eq=False)
class Trajectory:
    grid: TimeGrid
    states: np.ndarray  # (n_steps + 1, K) mode coefficients at the grid nodes

    @property
    def terminal_state(self) -> np.ndarray:
        return self.states[-1]

    @property
    def initial_state(self) -> np.ndarray:
        return self.states[0]

    def grid_values(self, sys: EigenSystem) -> np.ndarray:
        return sys.to_grid(self.states)

    def state_at(self, t: float) -> np.ndarray:
        """Linear interpolation in time between grid nodes."""
        g = self.grid
        s = np.clip(t / g.dt, 0.0, g.n_steps)
        j = min(int(np.floor(s)), g.n_steps - 1)
        theta = s - j
        return (1.0 - theta) * self.states[j] + theta * self.states[j + 1]


# -- time-cell kernels -----------------------------------------------------


def cell_kernels(sys: EigenSystem, grid: TimeGrid, K: int | None = None):
    """Per-mode decay ``exp(-w^2 dt)`` and cell integral ``(1 - exp(-w^2 dt)) / w^2``."""
    lam = sys.eigenvalues[: (K or sys.K)]
    decay = np.exp(-lam * grid.dt)
    integral = -np.expm1(-lam * grid.dt) / lam
    return decay, integral


def terminal_weights(sys: EigenSystem, grid: TimeGrid, K: int | None = None) -> np.ndarray:
    """``Phi[j, k] = int_{cell j} exp(-w_k^2 (T - s)) ds``.

    Both the contribution of a unit source on cell ``j`` to ``a_k(T)`` and the
    cell integral of an adjoint ``z_k(t) = z_k(T) exp(-w_k^2 (T - t))``.
    """
    lam = sys.eigenvalues[: (K or sys.K)]
    _, integral = cell_kernels(sys, grid, K)
    ends = grid.nodes[1:]
    return np.exp(-np.outer(grid.T - ends, lam)) * integral


def _pad(sys: EigenSystem, v) -> np.ndarray:
    v = np.zeros(sys.K) if v is None else np.asarray(v, dtype=float)
    if v.shape[-1] > sys.K:
        raise ContractError(f"mode vector of length {v.shape[-1]} exceeds K={sys.K}")
    if v.shape[-1] < sys.K:
        v = np.concatenate([v, np.zeros(sys.K - v.shape[-1])])
    return v


def total_source(sys: EigenSystem, grid: TimeGrid, *controls) -> np.ndarray:
    src = np.zeros((grid.n_steps, sys.K))
    for c in controls:
        if c is None:
            continue
        if c.grid != grid:
            raise ContractError("control defined on a different time grid")
        if c.values.shape[1] != sys.n_nodes:
            raise ContractError("control defined on a different mesh")
        src += c.source_modes(sys)
    return src


def solve_forward(sys: EigenSystem, y0, g: Control | None, u1: Control | None, u2: Control | None, grid: TimeGrid) -> Trajectory:
    """Exact per-mode Duhamel integration of piecewise-constant sources."""
    src = total_source(sys, grid, g, u1, u2)
    decay, integral = cell_kernels(sys, grid)
    states = np.empty((grid.n_steps + 1, sys.K))
    states[0] = _pad(sys, y0)
    for j in range(grid.n_steps):
        states[j + 1] = states[j] * decay + src[j] * integral
    return Trajectory(grid, states)


def terminal_state(sys: EigenSystem, y0, grid: TimeGrid, *controls) -> np.ndarray:
    """``y(T)`` in closed form (no intermediate states)."""
    src = total_source(sys, grid, *controls)
    free = _pad(sys, y0) * np.exp(-sys.eigenvalues * grid.T)
    return free + np.einsum("jk,jk->k", terminal_weights(sys, grid), src)


def solve_adjoint(sys: EigenSystem, zT, grid: TimeGrid) -> Trajectory:
    """``z(t) = exp(A (T - t)) z_T`` sampled on the grid."""
    zT = _pad(sys, zT)
    states = zT * np.exp(-np.outer(grid.T - grid.nodes, sys.eigenvalues))
    return Trajectory(grid, states)


def pairing_residual(sys, y0, g, u1, u2, zT, grid) -> float:
    """``|<y(T), z_T> - <y0, z(0)> - int_0^T <sources, z(t)> dt|``.

    The time integral is evaluated per cell in closed form against the
    exponential adjoint modes, independently of the forward recursion.
    """
    traj = solve_forward(sys, y0, g, u1, u2, grid)
    zT = _pad(sys, zT)
    z0 = zT * np.exp(-sys.eigenvalues * grid.T)
    src = total_source(sys, grid, g, u1, u2)
    # int_{t_j}^{t_{j+1}} exp(-w^2 (T - t)) dt, written out directly
    lam = sys.eigenvalues
    nodes = grid.nodes
    cell_int = (np.exp(-np.outer(grid.T - nodes[1:], lam)) - np.exp(-np.outer(grid.T - nodes[:-1], lam))) / lam
    forcing = float(np.sum(src * cell_int * zT))
    lhs = float(traj.terminal_state @ zT)
    return abs(lhs - float(_pad(sys, y0) @ z0) - forcing)


# -- norm suite ------------------------------------------------------------


def l2_space(sys: EigenSystem, v) -> float:
    """``||v||_{L^2(0,1)}`` of a grid function (midpoint rule on control volumes)."""
    v = np.asarray(v, dtype=float)
    return float(np.sqrt(np.sum(sys.mass * v**2)))


def l2_on(sys: EigenSystem, G: IntervalSet | None, v) -> float:
    """``||v||_{L^2(G)}``, partial volumes weighted by their overlap fraction."""
    v = np.asarray(v, dtype=float)
    return float(np.sqrt(np.sum(sys.mass * support_weights(sys, G) * v**2)))


def l2_on_modes(sys: EigenSystem, G: IntervalSet | None, coeffs) -> float:
    """``||v||_{L^2(G)}`` for ``v`` given by mode coefficients."""
    c = _pad(sys, coeffs)
    return float(np.sqrt(max(c @ set_gram(sys, G) @ c, 0.0)))


def l1t_l2x(obj, sys: EigenSystem | None = None) -> float:
    """``int_0^T ||.||_2 dt``: exact cell sum for a Control, trapezoid for a Trajectory."""
    if isinstance(obj, Control):
        return obj.l1_l2
    if isinstance(obj, Trajectory):
        norms = np.linalg.norm(obj.states, axis=1)
        return float(obj.grid.dt * (norms.sum() - 0.5 * (norms[0] + norms[-1])))
    raise TypeError(f"unsupported object {type(obj).__name__}")


def linf_t_l2x(ctrl: Control) -> float:
    return ctrl.linf_l2


def weighted_gradient_norm(sys: EigenSystem, v) -> float:
    """``||x^(alpha/2) v_x||_{L^2}`` from face differences."""
    v = np.asarray(v, dtype=float)
    x = sys.mesh
    h = np.diff(x)
    faces = 0.5 * (x[1:] + x[:-1])
    return float(np.sqrt(np.sum(faces**sys.alpha * (np.diff(v) / h) ** 2 * h)))


def abs_quadrature(D: SpaceTimeSet, grid: TimeGrid):
    """Trapezoid nodes for ``int_D |y|``.

    Each time piece of ``D`` (constant cross-section) is cut at the grid
    nodes inside it. Returns a list of ``(times, weights, section)``.
    """
    T = as_fraction(grid.T)
    out = []
    nodes = grid.nodes
    for t0, t1, section in D.clip_time(0, T).time_pieces():
        a, b = float(t0), float(t1)
        inner = nodes[(nodes > a) & (nodes < b)]
        taus = np.concatenate(([a], inner, [b]))
        h = np.diff(taus)
        w = np.zeros_like(taus)
        w[:-1] += 0.5 * h
        w[1:] += 0.5 * h
        out.append((taus, w, section))
    return out


def integral_abs_over(sys: EigenSystem, D: SpaceTimeSet, traj: Trajectory) -> float:
    """``int_D |y(x, t)| dx dt``: trapezoid in time over exact-overlap slice integrals."""
    total = 0.0
    for taus, w, section in abs_quadrature(D, traj.grid):
        cw = sys.mass * support_weights(sys, section)
        states = np.array([traj.state_at(t) for t in taus])
        vals = np.abs(sys.to_grid(states)) @ cw
        total += float(w @ vals)
    return total


# -- CSV export ------------------------------------------------------------


def trajectory_to_csv(traj: Trajectory, path, sys: EigenSystem | None = None) -> Path:
    """One row per time node: ``t`` then mode coefficients (or grid values if ``sys``)."""
    path = Path(path)
    data = traj.states if sys is None else traj.grid_values(sys)
    prefix = "a" if sys is None else "x"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        if sys is None:
            w.writerow(["t"] + [f"{prefix}{k + 1}" for k in range(data.shape[1])])
        else:
            w.writerow(["t"] + [repr(float(x)) for x in sys.mesh])
        for t, row in zip(traj.grid.nodes, data):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in row])
    return path


def control_to_csv(ctrl: Control, path, sys: EigenSystem) -> Path:
    """One row per time cell (left node): ``t``, ``||u(t)||_2``, then grid values."""
    path = Path(path)
    norms = ctrl.cell_norms()
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "norm"] + [repr(float(x)) for x in sys.mesh])
        for t, nrm, row in zip(ctrl.grid.nodes[:-1], norms, ctrl.values):
            w.writerow([repr(float(t)), repr(float(nrm))] + [repr(float(v)) for v in row])
    return path

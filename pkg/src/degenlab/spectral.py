"""Eigensystem of the degenerate operator ``A v = (x^alpha v_x)_x`` on (0, 1).

Two independent routes are provided:

* :func:`eigen_closed_form` -- eigenvalues ``((2 - alpha)/2)^2 j_{nu,k}^2`` from
  the zeros of the Bessel function ``J_nu``, ``nu = |1 - alpha| / (2 - alpha)``,
  with ``J_nu`` summed from its power series in multiprecision arithmetic.
* :func:`eigen_fd` -- a symmetric flux-form finite-difference discretization on
  a graded mesh, solved as a generalized tridiagonal eigenproblem with a
  lumped (diagonal) mass.

All downstream solvers work on the truncated, mass-orthonormal basis returned
by :func:`eigen_fd`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import mpmath
import numpy as np
from scipy.linalg import eigh_tridiagonal


class SpectralError(ValueError):
    """Invalid operator parameters (outside the admissible degeneracy range)."""


class NumericalError(RuntimeError):
    """A numerical routine failed to produce a trustworthy result."""


@dataclass(frozen=True)
class DegenerateOperatorSpec:
    """Discretization parameters for the degenerate operator.

    ``alpha = 0`` (the classical Laplacian) is only accepted with
    ``validation=True``; it serves as a cross-check against the sine basis.
    """

    alpha: float
    n_cells: int = 400
    grading: float = 2.0
    validation: bool = False

    def __post_init__(self):
        if not 0.0 < self.alpha < 2.0:
            if not (self.alpha == 0.0 and self.validation):
                raise SpectralError(
                    f"alpha must lie in (0, 2), got {self.alpha}"
                    + (" (alpha = 0 needs validation=True)" if self.alpha == 0.0 else "")
                )
        if int(self.n_cells) != self.n_cells or self.n_cells < 16:
            raise SpectralError(f"n_cells must be an integer >= 16, got {self.n_cells}")
        if self.grading < 1.0:
            raise SpectralError(f"grading must be >= 1, got {self.grading}")

    def mesh(self) -> np.ndarray:
        i = np.arange(self.n_cells + 1, dtype=float)
        return (i / self.n_cells) ** self.grading


@dataclass(frozen=True, eq=False)
class EigenSystem:
    """Truncated mass-orthonormal eigenbasis of ``-A``.

    Attributes
    ----------
    eigenvalues : (K,) array
        ``w_k^2`` in ascending order.
    eigenfunctions : (K, n_nodes) array
        ``e_k`` sampled at every mesh node (zeros at Dirichlet nodes).
    mesh : (n_nodes,) array
        Node coordinates, ``mesh[0] = 0`` and ``mesh[-1] = 1``.
    mass : (n_nodes,) array
        Lumped mass: length of each node's control volume. Sums to one.
    """

    alpha: float
    bessel_order: float
    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray
    mesh: np.ndarray
    mass: np.ndarray
    spec: DegenerateOperatorSpec | None = field(default=None, repr=False)

    @property
    def K(self) -> int:
        return int(self.eigenvalues.shape[0])

    @property
    def n_nodes(self) -> int:
        return int(self.mesh.shape[0])

    @property
    def volume_edges(self) -> np.ndarray:
        """Control-volume boundaries: 0, midpoints between nodes, 1."""
        x = self.mesh
        return np.concatenate(([0.0], 0.5 * (x[1:] + x[:-1]), [1.0]))

    def truncate(self, K: int) -> "EigenSystem":
        if not 1 <= K <= self.K:
            raise SpectralError(f"cannot truncate {self.K} modes to K={K}")
        if K == self.K:
            return self
        return EigenSystem(
            self.alpha,
            self.bessel_order,
            self.eigenvalues[:K],
            self.eigenfunctions[:K],
            self.mesh,
            self.mass,
            self.spec,
        )

    def to_grid(self, coeffs) -> np.ndarray:
        """Synthesize grid values from mode coefficients (last axis = leading modes)."""
        coeffs = np.asarray(coeffs, dtype=float)
        return coeffs @ self.eigenfunctions[: coeffs.shape[-1]]

    def to_modes(self, values) -> np.ndarray:
        """Mass-weighted projection of grid values onto the basis."""
        return (np.asarray(values, dtype=float) * self.mass) @ self.eigenfunctions.T

    def gram(self, weights=None) -> np.ndarray:
        """``G_jk = sum_n m_n c_n e_j(x_n) e_k(x_n)`` for node weights ``c``."""
        w = self.mass if weights is None else self.mass * weights
        return (self.eigenfunctions * w) @ self.eigenfunctions.T


def bessel_order(alpha: float) -> float:
    """Order of the Bessel function generating the eigenfunctions."""
    if alpha >= 2.0 or alpha < 0.0:
        raise SpectralError(f"alpha must lie in [0, 2), got {alpha}")
    return abs(1.0 - alpha) / (2.0 - alpha)


def _bessel_j_series(nu, x, dps: int):
    """J_nu(x) from its power series at ``dps`` decimal digits.

    Terms are added until they fall below 1e-16 of the running sum once past
    the peak term (index > x/2).
    """
    with mpmath.workdps(dps):
        nu = mpmath.mpf(nu)
        x = mpmath.mpf(x)
        half = x / 2
        term = half**nu / mpmath.gamma(nu + 1)
        total = term
        q = -(half * half)
        m = 0
        while True:
            m += 1
            term = term * q / (m * (m + nu))
            total += term
            if m > half and abs(term) <= mpmath.mpf("1e-16") * abs(total):
                break
            if m > 100000:
                raise NumericalError(f"Bessel series failed to converge at x={x}")
        return total


def _series_dps(x: float) -> int:
    # peak term ~ e^x / x: keep ~x*log10(e) guard digits beyond double precision
    return 25 + int(0.45 * x)


@lru_cache(maxsize=64)
def bessel_zeros(nu: float, K: int, tol: float = 1e-12, step: float = 0.1, x_max: float | None = None):
    """First ``K`` positive zeros of ``J_nu`` by scan + bisection."""
    if x_max is None:
        # McMahon: j_{nu,k} ~ (k + nu/2 - 1/4) pi
        x_max = (K + nu / 2.0 + 2.0) * np.pi + 10.0
    f = lambda x: _bessel_j_series(nu, x, _series_dps(x))  # noqa: E731
    zeros = []
    a = step
    fa = f(a)
    while len(zeros) < K:
        b = a + step
        if b > x_max:
            raise NumericalError(
                f"found only {len(zeros)} of {K} zeros of J_{nu} below x={x_max:.2f}; "
                "series scan did not bracket the remaining roots"
            )
        fb = f(b)
        if fa == 0:
            zeros.append(a)
        elif fa * fb < 0:
            lo, hi, flo = a, b, fa
            while hi - lo > tol:
                mid = 0.5 * (lo + hi)
                fm = f(mid)
                if fm == 0:
                    lo = hi = mid
                    break
                if (fm > 0) == (flo > 0):
                    lo, flo = mid, fm
                else:
                    hi = mid
            zeros.append(0.5 * (lo + hi))
        a, fa = b, fb
    return tuple(float(z) for z in zeros[:K])


def eigen_closed_form(alpha: float, K: int, tol: float = 1e-12) -> np.ndarray:
    """Eigenvalues ``((2 - alpha)/2)^2 j_{nu,k}^2``, ``k = 1..K``."""
    if K < 1:
        raise SpectralError("K must be >= 1")
    if tol <= 0:
        raise SpectralError("tol must be positive")
    nu = bessel_order(alpha)
    j = np.array(bessel_zeros(nu, int(K), float(tol)))
    return ((2.0 - alpha) / 2.0) ** 2 * j**2


def _assemble(spec: DegenerateOperatorSpec):
    x = spec.mesh()
    h = np.diff(x)
    faces = 0.5 * (x[1:] + x[:-1])
    cond = faces**spec.alpha / h
    mass = np.zeros_like(x)
    mass[1:] += 0.5 * h
    mass[:-1] += 0.5 * h
    diag = np.zeros_like(x)
    diag[:-1] += cond
    diag[1:] += cond
    # Dirichlet at x = 1 always; at x = 0 only in the weakly degenerate case
    first = 1 if spec.alpha < 1.0 else 0
    idx = np.arange(first, spec.n_cells)
    return x, mass, idx, diag[idx], -cond[idx[:-1]]


def eigen_fd(spec: DegenerateOperatorSpec, K: int = 32) -> EigenSystem:
    """Smallest ``K`` eigenpairs of the flux-form discretization of ``-A``.

    Eigenvectors are mass-orthonormal, and each is signed so that it is
    positive on its first arch away from ``x = 0``.
    """
    x, mass, idx, d, off = _assemble(spec)
    if not 1 <= K <= min(len(idx), spec.n_cells - 1):
        raise SpectralError(f"K={K} too large for n_cells={spec.n_cells}")
    s = 1.0 / np.sqrt(mass[idx])
    try:
        lam, vec = eigh_tridiagonal(
            d * s * s, off * s[:-1] * s[1:], select="i", select_range=(0, K - 1)
        )
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"tridiagonal eigensolver failed: {exc}") from exc
    if not np.all(np.isfinite(lam)) or np.any(lam <= 0):
        raise NumericalError("eigensolver returned non-positive or non-finite eigenvalues")
    funcs = np.zeros((K, x.size))
    funcs[:, idx] = (vec * s[:, None]).T
    for k in range(K):
        row = funcs[k]
        big = np.flatnonzero(np.abs(row) > 1e-8 * np.abs(row).max())
        if row[big[0]] < 0:
            funcs[k] = -row
    return EigenSystem(
        alpha=spec.alpha,
        bessel_order=bessel_order(spec.alpha),
        eigenvalues=lam,
        eigenfunctions=funcs,
        mesh=x,
        mass=mass,
        spec=spec,
    )


def fd_operator(spec: DegenerateOperatorSpec):
    """Sparse pieces of the discretization: ``(stiffness, mass, active_nodes)``.

    ``stiffness`` is the symmetric tridiagonal matrix of ``-A`` on the active
    nodes (``scipy.sparse`` CSR); ``mass`` is the matching diagonal.
    Used by independent time-stepping oracles.
    """
    from scipy.sparse import diags

    x, mass, idx, d, off = _assemble(spec)
    stiff = diags([off, d, off], [-1, 0, 1], format="csr")
    return stiff, mass[idx], idx


def propagate(sys: EigenSystem, coeffs, t: float) -> np.ndarray:
    """Exact semigroup action ``a_k -> a_k exp(-w_k^2 t)`` on mode vectors."""
    if t < 0:
        raise SpectralError("propagate is forward in time only (t >= 0)")
    coeffs = np.asarray(coeffs, dtype=float)
    K = coeffs.shape[-1]
    return coeffs * np.exp(-sys.eigenvalues[:K] * t)

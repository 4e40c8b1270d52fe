"""Per-particle radial diffusion: r^2-weighted P1 matrices and tridiagonal solves.

Every macro element of an electrode carries one radial vector ``C`` whose last
entry is the surface value.  One backward Euler step of the particle reads
``A C = M C_prev - Jh e_N`` with ``A = M + tau K``.  Because ``Rs`` and ``k2``
are constant per electrode, a single :class:`RadialOperator` serves all
particles of that electrode.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .mesh import RadialGrid

__all__ = [
    "radial_matrices",
    "tdma",
    "dense_tridiag",
    "RadialOperator",
    "surface_scalars",
    "backward_recover",
    "particle_mass",
]

# 3-point Gauss-Legendre on [0, 1]; exact through degree 5
_GX = 0.5 + 0.5 * np.array([-np.sqrt(0.6), 0.0, np.sqrt(0.6)])
_GW = np.array([5.0, 8.0, 5.0]) / 18.0


def radial_matrices(grid: RadialGrid, k2: float):
    """Tridiagonal mass and stiffness matrices with weight r^2.

    Returns
    -------
    (m_diag, m_off), (k_diag, k_off) : tuple of tuples of ndarray
        Main diagonals of length N and first off-diagonals of length N-1.
        All integrands are polynomials of degree <= 4, integrated exactly.
    """
    r = np.asarray(grid.nodes, dtype=float)
    r0, r1 = r[:-1], r[1:]
    h = r1 - r0
    q = r0[:, None] + h[:, None] * _GX[None, :]
    w = h[:, None] * _GW[None, :] * q**2
    psi_r = (q - r0[:, None]) / h[:, None]
    psi_l = 1.0 - psi_r
    m_ll = (w * psi_l * psi_l).sum(1)
    m_lr = (w * psi_l * psi_r).sum(1)
    m_rr = (w * psi_r * psi_r).sum(1)
    r2int = (r1**3 - r0**3) / 3.0
    kk = k2 * r2int / h**2

    n = r.size
    m_diag = np.zeros(n)
    m_diag[:-1] += m_ll
    m_diag[1:] += m_rr
    k_diag = np.zeros(n)
    k_diag[:-1] += kk
    k_diag[1:] += kk
    return (m_diag, m_lr), (k_diag, -kk)


def tdma(lower, diag, upper, rhs):
    """Solve a tridiagonal system with the Thomas algorithm.

    Parameters
    ----------
    lower, upper : (n-1,) array
        Sub- and super-diagonal.
    diag : (n,) array
    rhs : (n,) or (n, k) array
        One or several right-hand sides (columns).

    Returns
    -------
    x : ndarray, same shape as ``rhs``

    Notes
    -----
    No pivoting; intended for symmetric positive definite or diagonally
    dominant matrices.
    """
    lower = np.asarray(lower, dtype=float)
    diag = np.asarray(diag, dtype=float)
    upper = np.asarray(upper, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    n = diag.size
    if lower.size != n - 1 or upper.size != n - 1 or rhs.shape[0] != n:
        raise ValueError("inconsistent tridiagonal system shapes")
    cp = np.empty(max(n - 1, 0))
    dp = np.empty_like(rhs)
    den = diag[0]
    if den == 0.0:
        raise ZeroDivisionError("zero pivot in tridiagonal solve")
    if n > 1:
        cp[0] = upper[0] / den
    dp[0] = rhs[0] / den
    for i in range(1, n):
        den = diag[i] - lower[i - 1] * cp[i - 1]
        if den == 0.0:
            raise ZeroDivisionError("zero pivot in tridiagonal solve")
        if i < n - 1:
            cp[i] = upper[i] / den
        dp[i] = (rhs[i] - lower[i - 1] * dp[i - 1]) / den
    x = dp
    for i in range(n - 2, -1, -1):
        x[i] = x[i] - cp[i] * x[i + 1]
    return x


def dense_tridiag(diag, off) -> np.ndarray:
    """Dense symmetric tridiagonal matrix (test and fallback use)."""
    return np.diag(diag) + np.diag(off, 1) + np.diag(off, -1)


@dataclass(frozen=True, eq=False)
class RadialOperator:
    """Factorized ``A = M + tau K`` for one electrode.

    Attributes
    ----------
    grid : RadialGrid
    k2 : float
    tau : float
    """

    grid: RadialGrid
    k2: float
    tau: float

    def __post_init__(self):
        if not self.tau > 0.0:
            raise ValueError("tau must be positive")
        if not self.k2 >= 0.0:
            raise ValueError("k2 must be non-negative")

    @cached_property
    def _mats(self):
        return radial_matrices(self.grid, self.k2)

    @property
    def M(self):
        return self._mats[0]

    @property
    def K(self):
        return self._mats[1]

    @cached_property
    def A(self):
        (md, mo), (kd, ko) = self._mats
        return md + self.tau * kd, mo + self.tau * ko

    @property
    def n(self) -> int:
        return self.grid.n_nodes

    def solve(self, rhs):
        """A^{-1} rhs for rhs of shape (N,) or (N, k)."""
        d, o = self.A
        return tdma(o, d, o, rhs)

    def apply_M(self, x):
        d, o = self.M
        return _tri_matvec(d, o, x)

    def apply_K(self, x):
        d, o = self.K
        return _tri_matvec(d, o, x)

    def apply_A(self, x):
        d, o = self.A
        return _tri_matvec(d, o, x)

    @cached_property
    def _surface(self):
        e = np.zeros(self.n)
        e[-1] = 1.0
        g = self.solve(e)
        return float(g[-1]), self.apply_M(g)

    @property
    def surface_response(self) -> float:
        """e_N^T A^{-1} e_N."""
        return self._surface[0]

    @property
    def history_map(self) -> np.ndarray:
        """Row vector e_N^T A^{-1} M (equal to M A^{-1} e_N by symmetry)."""
        return self._surface[1]

    def sparse(self, which: str = "A") -> sp.csr_matrix:
        d, o = {"A": self.A, "M": self.M, "K": self.K}[which]
        return sp.diags([o, d, o], [-1, 0, 1], format="csr")


def _tri_matvec(d, o, x):
    x = np.asarray(x, dtype=float)
    y = d.reshape((-1,) + (1,) * (x.ndim - 1)) * x
    oo = o.reshape((-1,) + (1,) * (x.ndim - 1))
    y[:-1] += oo * x[1:]
    y[1:] += oo * x[:-1]
    return y


def surface_scalars(op: RadialOperator):
    """Return ``(surface_response, history_map)`` of a radial operator."""
    return op.surface_response, op.history_map


def backward_recover(op: RadialOperator, C_prev, J_hi):
    """Solve ``A C = M C_prev - J_hi e_N`` for one or many particles.

    Parameters
    ----------
    op : RadialOperator
    C_prev : (N,) or (n_particles, N) array
    J_hi : float or (n_particles,) array
        Scaled source ``(tau/|e|) int_e Rs^2 J / F dx`` of each particle.

    Returns
    -------
    ndarray, same shape as ``C_prev``
    """
    C_prev = np.asarray(C_prev, dtype=float)
    rhs = op.apply_M(C_prev.T).copy()
    rhs[-1] = rhs[-1] - J_hi
    return op.solve(rhs).T


def particle_mass(op: RadialOperator, C):
    """Lithium content 4 pi int_0^Rs c r^2 dr of one or many particles."""
    C = np.asarray(C, dtype=float)
    d, o = op.M
    col = d.copy()
    col[:-1] += o
    col[1:] += o
    return 4.0 * np.pi * (C @ col)

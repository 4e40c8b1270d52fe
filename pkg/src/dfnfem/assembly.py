"""Finite element spaces, quadrature and residual/Jacobian assembly.

Unknowns are ordered ``[c1 | phi1 | phi2 | c2s]``: P1 electrolyte
concentration and potential on every vertex, P1 electrode potential on the
vertices touching an electrode, and one particle-surface concentration per
electrode element.  In the "full" radial mode the last block is replaced by
every radial node of every particle.

Reaction-rate arguments can be bound to a lagged state per *role* so the
same kernel serves every nonlinear Gauss-Seidel recipe:

========== =========================================================
role        argument
========== =========================================================
c1_J        electrolyte concentration inside the reaction rate
c2_J        surface concentration in the kinetic prefactor
c2_U        surface concentration inside the open-circuit potential
phi1_J      electrolyte potential inside the overpotential
phi2_J      electrode potential inside the overpotential
c1_kappa    c1 inside kappa1, kappa2 and grad ln c1
========== =========================================================
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping

import numpy as np
import scipy.sparse as sp

from .mesh import CellMesh, FacetTag, RadialGrid
from .microsolver import RadialOperator
from .params import (
    ELECTRODES,
    DomainError,
    ParameterSet,
    SubdomainTag,
    butler_volmer,
    kappa_pair,
    ocp_pair,
)

__all__ = [
    "ROLES",
    "MACRO_FIELDS",
    "quadrature_rules",
    "DofMap",
    "DiscreteState",
    "BlockJacobian",
    "SystemEval",
    "Discretization",
    "assemble_residual",
    "assemble_jacobian",
    "discrete_source_balance",
    "project_current",
]

ROLES = ("c1_J", "c2_J", "c2_U", "phi1_J", "phi2_J", "c1_kappa")
MACRO_FIELDS = ("c1", "phi1", "phi2")


# quadrature -----------------------------------------------------------------

MAX_QUAD_DEGREE = 21


def quadrature_rules(dim: int, degree: int):
    """Points and weights on the reference simplex.

    The reference element is [0, 1] in 1D and the triangle with vertices
    (0,0), (1,0), (0,1) in 2D.  Rules are Gauss-Legendre in 1D and collapsed
    (Duffy) tensor Gauss in 2D.

    Returns
    -------
    points : (nq, dim) ndarray
    weights : (nq,) ndarray, summing to the reference measure
    """
    if dim not in (1, 2):
        raise ValueError("dim must be 1 or 2")
    if degree < 0 or degree > MAX_QUAD_DEGREE:
        raise ValueError(f"unsupported quadrature degree {degree} (max {MAX_QUAD_DEGREE})")
    n = max(1, math.ceil((degree + 1) / 2))
    x, w = np.polynomial.legendre.leggauss(n)
    x, w = 0.5 * (x + 1.0), 0.5 * w
    if dim == 1:
        return x[:, None], w
    # the Duffy Jacobian (1 - u) raises the degree in u by one
    nu = max(1, math.ceil((degree + 2) / 2))
    u, wu = np.polynomial.legendre.leggauss(nu)
    u, wu = 0.5 * (u + 1.0), 0.5 * wu
    U, V = np.meshgrid(u, x, indexing="ij")
    W = np.outer(wu * (1.0 - u), w)
    pts = np.column_stack([U.ravel(), (V * (1.0 - U)).ravel()])
    return pts, W.ravel()


def _p1_basis(points: np.ndarray) -> np.ndarray:
    if points.shape[1] == 1:
        x = points[:, 0]
        return np.column_stack([1.0 - x, x])
    x, y = points[:, 0], points[:, 1]
    return np.column_stack([1.0 - x - y, x, y])


# dofs and state -------------------------------------------------------------

class DofMap:
    """Global numbering for the reduced and the full radial systems."""

    def __init__(self, mesh: CellMesh, radial: Mapping[SubdomainTag, RadialGrid]):
        self.nv = mesh.n_vertices
        self.phi2_vertices = mesh.electrode_vertices
        self.nv2 = self.phi2_vertices.size
        self.phi2_of_vertex = np.full(self.nv, -1, dtype=np.int64)
        self.phi2_of_vertex[self.phi2_vertices] = np.arange(self.nv2)
        self.e2 = mesh.electrode_elements
        self.ne2 = self.e2.size
        self.e2_tag = mesh.tags[self.e2].copy()
        self.e2_row = np.empty(self.ne2, dtype=np.int64)
        self.rows_of = {}
        for tag in ELECTRODES:
            sel = np.flatnonzero(self.e2_tag == int(tag))
            self.e2_row[sel] = np.arange(sel.size)
            self.rows_of[tag] = sel
        self.n_radial = {tag: radial[tag].n_nodes for tag in ELECTRODES}

        self.offset = {"c1": 0, "phi1": self.nv, "phi2": 2 * self.nv, "c2s": 2 * self.nv + self.nv2}
        self.n_macro = 2 * self.nv + self.nv2
        self.n_reduced = self.n_macro + self.ne2
        sizes = np.array([self.n_radial[SubdomainTag(t)] for t in self.e2_tag], dtype=np.int64)
        self.radial_size = sizes
        self.radial_base = self.n_macro + np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        self.n_full = self.n_macro + int(sizes.sum())

    def size(self, name: str) -> int:
        return {"c1": self.nv, "phi1": self.nv, "phi2": self.nv2, "c2s": self.ne2,
                "c2": self.n_full - self.n_macro}[name]

    def slice(self, name: str) -> slice:
        if name == "c2":
            return slice(self.n_macro, self.n_full)
        o = self.offset[name]
        return slice(o, o + self.size(name))

    @property
    def surface_index_full(self) -> np.ndarray:
        """Full-system index of each particle's surface node."""
        return self.radial_base + self.radial_size - 1

    @property
    def interior_counts(self) -> int:
        return int((self.radial_size - 1).sum())


@dataclass
class DiscreteState:
    """DOF vectors of one time level.

    ``c2[tag]`` has one row per element of that electrode (ascending element
    index) and one column per radial node; the last column is the surface.
    """

    c1: np.ndarray
    phi1: np.ndarray
    phi2: np.ndarray
    c2: dict

    def copy(self) -> "DiscreteState":
        return DiscreteState(self.c1.copy(), self.phi1.copy(), self.phi2.copy(),
                             {k: v.copy() for k, v in self.c2.items()})

    def surface(self, dm: DofMap) -> np.ndarray:
        out = np.empty(dm.ne2)
        for tag in ELECTRODES:
            out[dm.rows_of[tag]] = self.c2[tag][:, -1]
        return out

    def set_surface(self, dm: DofMap, values) -> None:
        for tag in ELECTRODES:
            self.c2[tag][:, -1] = values[dm.rows_of[tag]]

    def radial_flat(self, dm: DofMap) -> np.ndarray:
        """All radial nodes in full-system order (electrode element order)."""
        parts = [None] * dm.ne2
        for tag in ELECTRODES:
            for j, i in enumerate(dm.rows_of[tag]):
                parts[i] = self.c2[tag][j]
        return np.concatenate(parts) if parts else np.zeros(0)

    def set_radial_flat(self, dm: DofMap, flat) -> None:
        for tag in ELECTRODES:
            rows = dm.rows_of[tag]
            n = dm.n_radial[tag]
            if rows.size:
                idx = (dm.radial_base[rows] - dm.n_macro)[:, None] + np.arange(n)[None, :]
                self.c2[tag][:] = flat[idx]

    def pack(self, dm: DofMap, radial: str = "surface") -> np.ndarray:
        tail = self.surface(dm) if radial == "surface" else self.radial_flat(dm)
        return np.concatenate([self.c1, self.phi1, self.phi2, tail])

    def unpack(self, dm: DofMap, x, radial: str = "surface") -> "DiscreteState":
        out = self.copy()
        out.c1[:] = x[dm.slice("c1")]
        out.phi1[:] = x[dm.slice("phi1")]
        out.phi2[:] = x[dm.slice("phi2")]
        if radial == "surface":
            out.set_surface(dm, x[dm.slice("c2s")])
        else:
            out.set_radial_flat(dm, x[dm.slice("c2")])
        return out

    def max_abs_diff(self, other: "DiscreteState") -> dict:
        d = {
            "c1": float(np.max(np.abs(self.c1 - other.c1), initial=0.0)),
            "phi1": float(np.max(np.abs(self.phi1 - other.phi1), initial=0.0)),
            "phi2": float(np.max(np.abs(self.phi2 - other.phi2), initial=0.0)),
        }
        d["c2"] = max(float(np.max(np.abs(self.c2[t] - other.c2[t]), initial=0.0)) for t in self.c2)
        return d


@dataclass
class BlockJacobian:
    """Jacobian of the reduced system in 2x2 block form.

    ``J_macro`` acts on ``[c1|phi1|phi2]``; ``U_src`` holds one column per
    electrode element (derivative of the macro rows w.r.t. that surface
    value); ``V_bdry`` one row per element; ``D_micro`` the diagonal.
    ``u_loc``/``v_loc`` are the same columns/rows restricted to the
    element's own macro dofs ``macro_dofs``.
    """

    J_macro: sp.csr_matrix
    U_src: sp.csr_matrix
    V_bdry: sp.csr_matrix
    D_micro: np.ndarray
    u_loc: np.ndarray
    v_loc: np.ndarray
    macro_dofs: np.ndarray

    def full(self) -> sp.csr_matrix:
        return sp.bmat([[self.J_macro, self.U_src], [self.V_bdry, sp.diags(self.D_micro)]], format="csr")

    def schur(self) -> sp.csr_matrix:
        """J_macro - U D^{-1} V, formed element by element."""
        n = self.J_macro.shape[0]
        coef = self.u_loc / self.D_micro[:, None]
        rows = np.repeat(self.macro_dofs, self.macro_dofs.shape[1], axis=1)
        cols = np.tile(self.macro_dofs, (1, self.macro_dofs.shape[1]))
        vals = -(coef[:, :, None] * self.v_loc[:, None, :]).reshape(rows.shape)
        ok = (rows >= 0) & (cols >= 0)
        upd = sp.coo_matrix((vals[ok], (rows[ok], cols[ok])), shape=(n, n))
        return (self.J_macro + upd).tocsr()


@dataclass
class SystemEval:
    """Residual blocks and (optionally) Jacobian of one evaluation."""

    residual: dict
    jacobian: sp.csr_matrix | None = None
    u_loc: np.ndarray | None = None
    v_loc: np.ndarray | None = None
    w: np.ndarray | None = None
    source_balance: float = 0.0
    source_scale: float = 0.0
    Jh: np.ndarray | None = None

    def vector(self, fields) -> np.ndarray:
        return np.concatenate([self.residual[f] for f in fields])


# discretization ---------------------------------------------------------------

def _p1_gradients(mesh: CellMesh) -> np.ndarray:
    x = mesh.vertices[mesh.elements]
    if mesh.dim == 1:
        h = x[:, 1, 0] - x[:, 0, 0]
        g = np.stack([-1.0 / h, 1.0 / h], axis=1)
        return g[:, :, None]
    B = np.stack([x[:, 1] - x[:, 0], x[:, 2] - x[:, 0]], axis=2)  # columns are edge vectors
    ref = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    Binv = np.linalg.inv(B)
    return np.einsum("ad,edk->eak", ref, Binv)


def project_current(values, measures=None) -> np.ndarray:
    """Remove the measure-weighted mean from per-facet current densities.

    With unit measures (the 1D point convention) this subtracts the plain
    mean, so ``sum(I* * measures) == 0`` up to rounding.
    """
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("empty current-collector boundary")
    measures = np.ones_like(values) if measures is None else np.asarray(measures, dtype=float)
    return values - (values * measures).sum() / measures.sum()


class Discretization:
    """Precomputed geometry and operators for one (mesh, radial grids, tau).

    Parameters
    ----------
    ps : ParameterSet
    mesh : CellMesh
    radial : mapping from electrode tag to RadialGrid
    tau : float
        Time step (s).
    quad_degree : int
        Quadrature degree for terms with chemistry nonlinearities.
    chemistry : bool
        If False, the reaction rate is replaced by zero (test hook).
    """

    def __init__(self, ps: ParameterSet, mesh: CellMesh, radial, tau: float,
                 quad_degree: int = 4, chemistry: bool = True):
        if not tau > 0.0:
            raise ValueError("tau must be positive")
        self.ps, self.mesh, self.tau = ps, mesh, float(tau)
        self.radial = {SubdomainTag(k): v for k, v in radial.items()}
        self.chemistry = chemistry
        self.dm = DofMap(mesh, self.radial)
        self.ops = {t: RadialOperator(self.radial[t], ps.electrode(t).k2, self.tau) for t in ELECTRODES}

        el = mesh.elements
        self.nloc = el.shape[1]
        self.vol = mesh.volumes
        self.grads = _p1_gradients(mesh)
        self.G = self.vol[:, None, None] * np.einsum("eak,ebk->eab", self.grads, self.grads)
        ref_measure = 1.0 if mesh.dim == 1 else 0.5
        pts, wts = quadrature_rules(mesh.dim, quad_degree)
        self.Nq = _p1_basis(pts)
        self.wq = wts[None, :] * (self.vol / ref_measure)[:, None]
        self.NN = np.einsum("qa,qb->qab", self.Nq, self.Nq)
        nl = self.nloc
        self.Mref = (np.ones((nl, nl)) + np.eye(nl)) / ((nl) * (nl + 1))

        tags = mesh.tags
        reg = {t: ps.region(t) for t in SubdomainTag}
        self.eps1_e = np.array([reg[SubdomainTag(t)].eps1 for t in tags])
        self.k1_e = np.array([reg[SubdomainTag(t)].k1 for t in tags])

        dm = self.dm
        e2 = dm.e2
        self.el2 = el[e2]
        self.el2_phi2 = dm.phi2_of_vertex[self.el2]
        elec = {t: ps.electrode(t) for t in ELECTRODES}
        t2 = [SubdomainTag(t) for t in dm.e2_tag]
        self.a1_e = np.array([elec[t].a1 for t in t2])
        self.a2_e = np.array([elec[t].a2 for t in t2])
        self.sigma_e = np.array([elec[t].sigma for t in t2])
        self.s_e = np.array([self.ops[t].surface_response for t in t2])
        self.rho_e = np.array([self.tau * elec[t].Rs**2 / ps.F for t in t2]) / self.vol[e2]
        self.radial_scale_e = np.array([3.0 / elec[t].Rs**3 for t in t2])

        # exact linear operators
        nv = dm.nv
        mass_loc = (self.eps1_e * self.vol)[:, None, None] * self.Mref[None]
        self.M_eps = self._scatter(el, el, mass_loc, nv, nv)
        self.K_k1 = self._scatter(el, el, self.k1_e[:, None, None] * self.G, nv, nv)
        self.K_sigma = self._scatter(self.el2_phi2, self.el2_phi2,
                                     self.sigma_e[:, None, None] * self.G[e2], dm.nv2, dm.nv2)
        self.mass_P1 = self._scatter(el, el, self.vol[:, None, None] * self.Mref[None], nv, nv)

        # boundary load pattern
        fac, meas, sign = [], [], []
        for ftag, sgn in ((FacetTag.GAMMA_N, -1.0), (FacetTag.GAMMA_P, 1.0)):
            f, m = mesh.gamma(ftag)
            fac.append(f)
            meas.append(m)
            sign.append(np.full(len(m), sgn))
        self.gamma_facets = np.concatenate(fac)
        self.gamma_measures = np.concatenate(meas)
        self.gamma_sign = np.concatenate(sign)
        if self.gamma_measures.size == 0:
            raise ValueError("mesh has no current-collector facets")
        if np.any(dm.phi2_of_vertex[self.gamma_facets] < 0):
            raise ValueError("current-collector facet outside the electrodes")

        # macro dofs of each electrode element, local order [c1 | phi1 | phi2]
        self.macro_dofs_e2 = np.concatenate(
            [self.el2, nv + self.el2, 2 * nv + self.el2_phi2], axis=1
        )

    @staticmethod
    def _scatter(rows, cols, vals, n, m):
        nl_r, nl_c = rows.shape[1], cols.shape[1]
        R = np.repeat(rows, nl_c, axis=1).ravel()
        C = np.tile(cols, (1, nl_r)).ravel()
        return sp.coo_matrix((vals.ravel(), (R, C)), shape=(n, m)).tocsr()

    # -- current ---------------------------------------------------------------
    def facet_current(self, t: float) -> np.ndarray:
        """Projected current density I* on each Gamma facet (discharge > 0)."""
        raw = self.gamma_sign * self.ps.current(t)
        return project_current(raw, self.gamma_measures)

    def gamma_load(self, t: float) -> np.ndarray:
        """Vector of int_Gamma I* v over the phi2 dofs."""
        I = self.facet_current(t)
        out = np.zeros(self.dm.nv2)
        nfv = self.gamma_facets.shape[1]
        share = (I * self.gamma_measures / nfv)[:, None]
        np.add.at(out, self.dm.phi2_of_vertex[self.gamma_facets], np.broadcast_to(share, self.gamma_facets.shape))
        return out

    # -- state helpers -------------------------------------------------------
    def initial_state(self) -> DiscreteState:
        dm, ps = self.dm, self.ps
        c1 = np.empty(dm.nv)
        # vertex value from the last element touching it; interfaces take the
        # right-hand region, which is exact when c1_0 is uniform
        for tag in SubdomainTag:
            c1[self.mesh.elements[self.mesh.tags == int(tag)].ravel()] = ps.region(tag).c1_0
        c2 = {t: np.full((dm.rows_of[t].size, dm.n_radial[t]), ps.electrode(t).c2_0) for t in ELECTRODES}
        return DiscreteState(c1, np.zeros(dm.nv), np.zeros(dm.nv2), c2)

    def integrate_p1(self, values) -> float:
        """Exact integral over Omega of a P1 field."""
        return float(self.mass_P1.dot(values).sum())

    def phi1_mean(self, phi1) -> float:
        return self.integrate_p1(phi1) / float(self.vol.sum())

    # -- kernel --------------------------------------------------------------
    def _role_fields(self, state: DiscreteState, lag):
        lag = lag or {}
        bad = set(lag) - set(ROLES)
        if bad:
            raise ValueError(f"unknown lag roles: {sorted(bad)}")
        src = {r: lag.get(r, state) for r in ROLES}
        return src, {r: r not in lag for r in ROLES}

    @staticmethod
    def _proj_grad(el, values, grads):
        """grad N_a . grad u per element, with the gradient built from vertex
        differences so large constant offsets do not cost accuracy."""
        loc = values[el]
        loc = loc - loc[:, :1]
        g = np.einsum("eak,ea->ek", grads, loc)
        return np.einsum("eak,ek->ea", grads, g)

    def _kappa_terms(self, c1k):
        """Integrals of kappa1 and kappa2/c1 per element and their c1 derivatives."""
        el = self.mesh.elements
        c1q = c1k[el] @ self.Nq.T
        bad = ~(c1q > 0.0)
        if bad.any():
            e = int(np.flatnonzero(bad.any(axis=1))[0])
            raise DomainError(f"c1 not positive in element {e}", SubdomainTag(self.mesh.tags[e]), "c1", e)
        k1 = np.empty_like(c1q)
        dk1 = np.empty_like(c1q)
        k2 = np.empty_like(c1q)
        dk2 = np.empty_like(c1q)
        for tag in SubdomainTag:
            sel = self.mesh.tags == int(tag)
            if sel.any():
                (a, b), (da, db) = kappa_pair(self.ps, tag, c1q[sel])
                k1[sel], k2[sel], dk1[sel], dk2[sel] = a, b, da, db
        g = k2 / c1q
        dg = dk2 / c1q - k2 / c1q**2
        w = self.wq
        return (w * k1).sum(1), (w * dk1) @ self.Nq, (w * g).sum(1), (w * dg) @ self.Nq

    def _reaction(self, src, live_roles):
        """Reaction-rate integrals over electrode elements."""
        dm = self.dm
        ne2, nq = dm.ne2, self.Nq.shape[0]
        if not self.chemistry:
            z = np.zeros((ne2, nq))
            return z, z, z, z, np.zeros((ne2, nq))
        el2 = self.el2
        c1q = src["c1_J"].c1[el2] @ self.Nq.T
        phi1q = src["phi1_J"].phi1[el2] @ self.Nq.T
        phi2q = src["phi2_J"].phi2[self.el2_phi2] @ self.Nq.T
        c2J = src["c2_J"].surface(dm)
        c2U = src["c2_U"].surface(dm)
        J = np.empty((ne2, nq))
        Jc1, Jc2, Jeta, dUq = (np.empty((ne2, nq)) for _ in range(4))
        for tag in ELECTRODES:
            rows = dm.rows_of[tag]
            if rows.size == 0:
                continue
            elec = self.ps.electrode(tag)
            for name, vals in (("c2_surf", c2U[rows]), ("c2_surf", c2J[rows])):
                bad = ~((vals > 0.0) & (vals < elec.c2max))
                if bad.any():
                    e = int(dm.e2[rows][np.flatnonzero(bad)[0]])
                    raise DomainError(f"surface concentration out of (0, c2max) in element {e}", tag, name, e)
            bad = ~(c1q[rows] > 0.0)
            if bad.any():
                e = int(dm.e2[rows][np.flatnonzero(bad.any(axis=1))[0]])
                raise DomainError(f"c1 not positive in element {e}", tag, "c1", e)
            u, du = ocp_pair(self.ps, tag, c2U[rows])
            eta = phi2q[rows] - phi1q[rows] - u[:, None]
            try:
                res = butler_volmer(self.ps, tag, c1q[rows], c2J[rows][:, None], eta)
            except DomainError as exc:
                raise DomainError(f"{exc} in {tag.key} electrode", tag, exc.variable) from None
            J[rows], Jc1[rows], Jc2[rows], Jeta[rows] = res
            dUq[rows] = du[:, None]
        return J, Jc1, Jc2, Jeta, dUq

    def evaluate(self, state: DiscreteState, prev: DiscreteState, t: float,
                 lag: Mapping[str, DiscreteState] | None = None,
                 radial: str = "surface", jacobian: bool = True) -> SystemEval:
        """Residual (and Jacobian) of the backward Euler step at ``state``.

        Parameters
        ----------
        state, prev : DiscreteState
            Current iterate and previous time level.
        t : float
            Time of the new level (selects the applied current).
        lag : mapping role -> DiscreteState, optional
            Roles whose arguments are read from a frozen state; their
            derivatives are dropped from the Jacobian.
        radial : {"surface", "full"}
            Surface-only scalar equations, or every radial node.
        jacobian : bool
            Also assemble the Jacobian over the whole numbering of ``radial``.
        """
        if radial not in ("surface", "full"):
            raise ValueError("radial must be 'surface' or 'full'")
        dm, tau = self.dm, self.tau
        nv, nl = dm.nv, self.nloc
        el = self.mesh.elements
        src, cur = self._role_fields(state, lag)

        Kb1, dKb1, Kb2, dKb2 = self._kappa_terms(src["c1_kappa"].c1)
        c1k = src["c1_kappa"].c1
        proj_phi1 = self._proj_grad(el, state.phi1, self.grads)   # grad N_a . grad phi1
        proj_c1 = self._proj_grad(el, c1k, self.grads)
        gg = self.G / self.vol[:, None, None]                     # grad N_a . grad N_b

        J, Jc1, Jc2, Jeta, dUq = self._reaction(src, cur)
        w2 = self.wq[dm.e2]
        src_int = (w2 * J) @ self.Nq                       # int J N_a
        J_int = (w2 * J).sum(1)                            # int J

        # residuals
        r_c1 = self.M_eps.dot(state.c1 - prev.c1) / tau
        np.add.at(r_c1, el, (self.k1_e * self.vol)[:, None] * self._proj_grad(el, state.c1, self.grads))
        np.add.at(r_c1, self.el2, -self.a1_e[:, None] * src_int)
        loc_phi1 = Kb1[:, None] * proj_phi1 - Kb2[:, None] * proj_c1
        r_phi1 = np.zeros(nv)
        np.add.at(r_phi1, el, loc_phi1)
        np.add.at(r_phi1, self.el2, -self.a2_e[:, None] * src_int)
        r_phi2 = self.gamma_load(t)
        np.add.at(r_phi2, self.el2_phi2, (self.sigma_e * self.vol[dm.e2])[:, None]
                  * self._proj_grad(self.el2_phi2, state.phi2, self.grads[dm.e2]))
        np.add.at(r_phi2, self.el2_phi2, self.a2_e[:, None] * src_int)
        Jh = self.rho_e * J_int
        residual = {"c1": r_c1, "phi1": r_phi1, "phi2": r_phi2}
        if radial == "surface":
            hist = np.empty(dm.ne2)
            for tag in ELECTRODES:
                rows = dm.rows_of[tag]
                hist[rows] = prev.c2[tag] @ self.ops[tag].history_map
            residual["c2s"] = state.surface(dm) + self.s_e * Jh - hist
        else:
            r_c2 = np.empty(dm.n_full - dm.n_macro)
            for tag in ELECTRODES:
                rows = dm.rows_of[tag]
                if rows.size == 0:
                    continue
                op = self.ops[tag]
                rr = op.apply_A(state.c2[tag].T) - op.apply_M(prev.c2[tag].T)
                rr[-1] += Jh[rows]
                rr *= self.radial_scale_e[rows][None, :]
                idx = (dm.radial_base[rows] - dm.n_macro)[:, None] + np.arange(dm.n_radial[tag])
                r_c2[idx] = rr.T
            residual["c2"] = r_c2
        out = SystemEval(residual, source_balance=float((self.a2_e * J_int).sum()),
                         source_scale=float((self.a2_e * (w2 * np.abs(J)).sum(1)).sum()), Jh=Jh)
        if not jacobian:
            return out

        # local reaction derivatives
        on = {r: float(cur[r]) for r in ROLES}
        S_c1 = np.einsum("eq,qab->eab", w2 * Jc1, self.NN) * on["c1_J"]
        S_eta = np.einsum("eq,qab->eab", w2 * Jeta, self.NN)
        dJ_dc2 = Jc2 * on["c2_J"] - Jeta * dUq * on["c2_U"]
        s_c2 = (w2 * dJ_dc2) @ self.Nq
        I_c1 = ((w2 * Jc1) @ self.Nq) * on["c1_J"]
        I_eta = (w2 * Jeta) @ self.Nq
        I_c2 = (w2 * dJ_dc2).sum(1)

        rows_l, cols_l, vals_l = [], [], []

        def add(r_idx, c_idx, block):
            nr, nc = r_idx.shape[1], c_idx.shape[1]
            rows_l.append(np.repeat(r_idx, nc, axis=1).ravel())
            cols_l.append(np.tile(c_idx, (1, nr)).ravel())
            vals_l.append(block.reshape(block.shape[0], -1).ravel())

        o_c1, o_p1, o_p2 = 0, nv, 2 * nv
        el2, el2p = self.el2, self.el2_phi2
        a1 = self.a1_e[:, None, None]
        a2 = self.a2_e[:, None, None]
        # c1 rows
        add(o_c1 + el2, o_c1 + el2, -a1 * S_c1)
        add(o_c1 + el2, o_p1 + el2, a1 * S_eta * on["phi1_J"])
        add(o_c1 + el2, o_p2 + el2p, -a1 * S_eta * on["phi2_J"])
        # phi1 rows
        add(o_p1 + el, o_p1 + el, Kb1[:, None, None] * gg)
        if on["c1_kappa"]:
            blk = (dKb1[:, None, :] * proj_phi1[:, :, None] - dKb2[:, None, :] * proj_c1[:, :, None]
                   - Kb2[:, None, None] * gg)
            add(o_p1 + el, o_c1 + el, blk)
        add(o_p1 + el2, o_c1 + el2, -a2 * S_c1)
        add(o_p1 + el2, o_p1 + el2, a2 * S_eta * on["phi1_J"])
        add(o_p1 + el2, o_p2 + el2p, -a2 * S_eta * on["phi2_J"])
        # phi2 rows
        add(o_p2 + el2p, o_c1 + el2, a2 * S_c1)
        add(o_p2 + el2p, o_p1 + el2, -a2 * S_eta * on["phi1_J"])
        add(o_p2 + el2p, o_p2 + el2p, a2 * S_eta * on["phi2_J"])

        u_loc = np.concatenate([-self.a1_e[:, None] * s_c2, -self.a2_e[:, None] * s_c2,
                                self.a2_e[:, None] * s_c2], axis=1)
        dJh = self.rho_e[:, None] * np.concatenate(
            [I_c1, -I_eta * on["phi1_J"], I_eta * on["phi2_J"]], axis=1)
        dJh_dc2 = self.rho_e * I_c2

        n_tot = dm.n_reduced if radial == "surface" else dm.n_full
        if radial == "surface":
            col_c2 = (dm.offset["c2s"] + np.arange(dm.ne2))[:, None]
            v_loc = self.s_e[:, None] * dJh
            w = 1.0 + self.s_e * dJh_dc2
            add(self.macro_dofs_e2, col_c2, u_loc[:, :, None])
            add(col_c2, self.macro_dofs_e2, v_loc[:, None, :])
            add(col_c2, col_c2, w[:, None, None])
            out.u_loc, out.v_loc, out.w = u_loc, v_loc, w
        else:
            col_c2 = dm.surface_index_full[:, None]
            scale = self.radial_scale_e
            add(self.macro_dofs_e2, col_c2, u_loc[:, :, None])
            add(col_c2, self.macro_dofs_e2, (scale[:, None] * dJh)[:, None, :])
            add(col_c2, col_c2, (scale * dJh_dc2)[:, None, None])
            for tag in ELECTRODES:
                rows = dm.rows_of[tag]
                if rows.size == 0:
                    continue
                d, o = self.ops[tag].A
                n = d.size
                base = dm.radial_base[rows][:, None]
                sc = scale[rows][:, None]
                i = np.arange(n)
                rows_l.append((base + i).ravel())
                cols_l.append((base + i).ravel())
                vals_l.append((sc * d).ravel())
                for sgn in (0, 1):
                    r_ = base + i[:-1] + sgn
                    c_ = base + i[:-1] + 1 - sgn
                    rows_l.append(r_.ravel())
                    cols_l.append(c_.ravel())
                    vals_l.append((sc * o).ravel())

        lin = sp.block_diag(
            [self.M_eps / tau + self.K_k1, sp.csr_matrix((nv, nv)), self.K_sigma], format="coo"
        )
        rows_l.append(lin.row)
        cols_l.append(lin.col)
        vals_l.append(lin.data)
        R = np.concatenate(rows_l)
        C = np.concatenate(cols_l)
        V = np.concatenate(vals_l)
        out.jacobian = sp.coo_matrix((V, (R, C)), shape=(n_tot, n_tot)).tocsr()
        return out

    def block_jacobian(self, ev: SystemEval) -> BlockJacobian:
        """Split a surface-mode Jacobian into its 2x2 block form."""
        n = self.dm.n_macro
        J = ev.jacobian
        return BlockJacobian(
            J_macro=J[:n, :n].tocsr(),
            U_src=J[:n, n:].tocsr(),
            V_bdry=J[n:, :n].tocsr(),
            D_micro=np.asarray(J[n:, n:].diagonal()).copy(),
            u_loc=ev.u_loc,
            v_loc=ev.v_loc,
            macro_dofs=self.macro_dofs_e2,
        )

    def lithium_total(self, state: DiscreteState) -> float:
        """Electrolyte plus particle lithium, conserved exactly by the scheme.

        ``int eps1 c1 dx + sum_e |e| (a1 F / Rs^2) 1^T M C_e``.
        """
        total = float(self.M_eps.dot(state.c1).sum())
        dm = self.dm
        for tag in ELECTRODES:
            rows = dm.rows_of[tag]
            if rows.size == 0:
                continue
            el = self.ps.electrode(tag)
            d, o = self.ops[tag].M
            col = d.copy()
            col[:-1] += o
            col[1:] += o
            w = self.vol[dm.e2[rows]] * el.a1 * self.ps.F / el.Rs**2
            total += float(w @ (state.c2[tag] @ col))
        return total

    def cell_voltage(self, state: DiscreteState) -> float:
        """Measure-weighted mean of phi2 on Gamma_P minus that on Gamma_N."""
        out = []
        for ftag in (FacetTag.GAMMA_P, FacetTag.GAMMA_N):
            f, m = self.mesh.gamma(ftag)
            v = state.phi2[self.dm.phi2_of_vertex[f]].mean(axis=1)
            out.append(float((v * m).sum() / m.sum()))
        return out[0] - out[1]

    def source_balance(self, state: DiscreteState) -> float:
        return self.evaluate(state, state, 0.0, jacobian=False).source_balance

    def source_scale(self, state: DiscreteState) -> float:
        """int a2 |J_h| dx, the natural size of the source balance."""
        return self.evaluate(state, state, 0.0, jacobian=False).source_scale


# thin functional wrappers -----------------------------------------------------

def assemble_residual(ps, mesh, radial, state_k, state_prev, tau, t_k, **kw) -> np.ndarray:
    """Reduced residual ``[F_c1 | F_phi1 | F_phi2 | F_c2s]``."""
    disc = Discretization(ps, mesh, radial, tau, **kw)
    ev = disc.evaluate(state_k, state_prev, t_k, jacobian=False)
    return ev.vector(("c1", "phi1", "phi2", "c2s"))


def assemble_jacobian(ps, mesh, radial, state_k, state_prev, tau, t_k, **kw) -> BlockJacobian:
    """Exact Jacobian of :func:`assemble_residual` in block form."""
    disc = Discretization(ps, mesh, radial, tau, **kw)
    return disc.block_jacobian(disc.evaluate(state_k, state_prev, t_k))


def discrete_source_balance(ps, mesh, radial, state, tau: float = 1.0, **kw) -> float:
    """int_{Omega_2} a2 J_h dx under the assembly quadrature."""
    return Discretization(ps, mesh, radial, tau, **kw).source_balance(state)

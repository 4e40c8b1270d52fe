"""Slow independent oracles used by several test modules."""
from __future__ import annotations

import mpmath
import numpy as np

from dfnfem.assembly import DiscreteState, Discretization
from dfnfem.params import ELECTRODES, SubdomainTag, butler_volmer, kappa_pair, ocp_pair
from dfnfem.solvers import block_scales, fix_nullspace

FIELDS_SURFACE = ("c1", "phi1", "phi2", "c2s")
FIELDS_FULL = ("c1", "phi1", "phi2", "c2")


def fd_jacobian_errors(disc: Discretization, state: DiscreteState, prev: DiscreteState, t: float,
                       radial: str = "surface", rel_step: float = 1e-7) -> dict:
    """Central-difference check of every Jacobian block.

    Returns ``(row_field, col_field) -> max |FD - J| / max |J row block|``.
    """
    dm = disc.dm
    fields = FIELDS_SURFACE if radial == "surface" else FIELDS_FULL
    ev = disc.evaluate(state, prev, t, radial=radial)
    J = ev.jacobian.toarray()
    x0 = state.pack(dm, radial)
    scales = block_scales(disc)
    n = x0.size
    FD = np.zeros((n, n))
    for f in fields:
        sl = dm.slice(f)
        for j in range(sl.start, sl.stop):
            h = rel_step * scales[f]
            xp, xm = x0.copy(), x0.copy()
            xp[j] += h
            xm[j] -= h
            Fp = disc.evaluate(state.unpack(dm, xp, radial), prev, t, radial=radial, jacobian=False).vector(fields)
            Fm = disc.evaluate(state.unpack(dm, xm, radial), prev, t, radial=radial, jacobian=False).vector(fields)
            FD[:, j] = (Fp - Fm) / (2 * h)
    out = {}
    for rf in fields:
        rs = dm.slice(rf)
        row_scale = np.max(np.abs(J[rs]))
        for cf in fields:
            cs = dm.slice(cf)
            out[(rf, cf)] = float(np.max(np.abs(FD[rs, cs] - J[rs, cs])) / row_scale)
    return out


def dense_block_direction(disc: Discretization, ev, pin: int, dps: int = 40) -> np.ndarray:
    """Newton direction of the unreduced block system by a dense solve in
    ``dps``-digit arithmetic, so the reference is exact to double precision
    however badly the blocks are scaled."""
    J = ev.jacobian.toarray()
    F = ev.vector(FIELDS_SURFACE)
    A, b, keep = fix_nullspace(J, F, pin)
    with mpmath.workdps(dps):
        x = mpmath.lu_solve(mpmath.matrix(A.tolist()), mpmath.matrix((-b).tolist()))
        d = np.zeros(F.size)
        d[keep] = [float(v) for v in x]
    return d


def slow_residual(disc: Discretization, state: DiscreteState, prev: DiscreteState, t: float,
                  npts: int = 25) -> np.ndarray:
    """Entry-by-entry 1D residual with an npts-point Gauss rule on every term."""
    ps, mesh, dm = disc.ps, disc.mesh, disc.dm
    assert mesh.dim == 1
    xg, wg = np.polynomial.legendre.leggauss(npts)
    xg, wg = 0.5 * (xg + 1.0), 0.5 * wg
    nv = dm.nv
    r_c1, r_p1, r_p2 = np.zeros(nv), np.zeros(nv), np.zeros(dm.nv2)
    r_c2 = np.zeros(dm.ne2)
    surf = state.surface(dm)
    Jint = np.zeros(dm.ne2)
    e2_index = {int(e): i for i, e in enumerate(dm.e2)}
    for e, (a, b) in enumerate(mesh.elements):
        tag = SubdomainTag(mesh.tags[e])
        reg = ps.region(tag)
        xa, xb = mesh.vertices[a, 0], mesh.vertices[b, 0]
        L = xb - xa
        dN = np.array([-1.0, 1.0]) / L
        for q, wq in zip(xg, wg):
            N = np.array([1.0 - q, q])
            w = wq * abs(L)
            c1 = N @ state.c1[[a, b]]
            c1p = N @ prev.c1[[a, b]]
            gc1 = dN @ state.c1[[a, b]]
            gp1 = dN @ state.phi1[[a, b]]
            (k1, k2), _ = kappa_pair(ps, tag, np.array(c1))
            for i, v in enumerate((a, b)):
                r_c1[v] += w * (reg.eps1 * (c1 - c1p) / disc.tau * N[i] + reg.k1 * gc1 * dN[i])
                r_p1[v] += w * (float(k1) * gp1 - float(k2) / c1 * gc1) * dN[i]
            if tag not in ELECTRODES:
                continue
            el = ps.electrode(tag)
            i2 = e2_index[e]
            pa, pb = dm.phi2_of_vertex[[a, b]]
            p1 = N @ state.phi1[[a, b]]
            p2 = N @ state.phi2[[pa, pb]]
            gp2 = dN @ state.phi2[[pa, pb]]
            u, _ = ocp_pair(ps, tag, surf[i2])
            Jq = float(butler_volmer(ps, tag, c1, surf[i2], p2 - p1 - float(u))[0])
            Jint[i2] += w * Jq
            for i, (v, v2) in enumerate(((a, pa), (b, pb))):
                r_c1[v] -= w * el.a1 * Jq * N[i]
                r_p1[v] -= w * el.a2 * Jq * N[i]
                r_p2[v2] += w * (el.sigma * gp2 * dN[i] + el.a2 * Jq * N[i])
    # collector loads: the projected current is -I at x = 0 and +I at x = L
    I = ps.current(t)
    order = np.argsort(mesh.vertices[:, 0])
    r_p2[dm.phi2_of_vertex[order[0]]] += -I
    r_p2[dm.phi2_of_vertex[order[-1]]] += I
    for i2, e in enumerate(dm.e2):
        tag = SubdomainTag(mesh.tags[e])
        el = ps.electrode(tag)
        op = disc.ops[tag]
        row = dm.e2_row[i2]
        # dense radial algebra
        A = np.diag(op.A[0]) + np.diag(op.A[1], 1) + np.diag(op.A[1], -1)
        M = np.diag(op.M[0]) + np.diag(op.M[1], 1) + np.diag(op.M[1], -1)
        eN = np.zeros(A.shape[0])
        eN[-1] = 1.0
        g = np.linalg.solve(A, eN)
        Jh = disc.tau * el.Rs**2 / ps.F * Jint[i2] / mesh.volumes[e]
        r_c2[i2] = surf[i2] + g[-1] * Jh - (M @ g) @ prev.c2[tag][row]
    return np.concatenate([r_c1, r_p1, r_p2, r_c2])

"""Nonlinear solvers for one backward Euler step.

Every solver kind is a recipe of *subproblems*: a set of live unknown blocks,
solved by damped Newton while all other blocks keep their current values.
The recipes differ in how the unknowns are grouped, whether particle
interiors are unknowns, and how the Newton linear systems are solved.

=========  ==========================================================
kind        recipe
=========  ==========================================================
2DS-FC      Newton on [c1|phi1|phi2|c2s], surface dofs eliminated by
            Schur complement; particle interiors recovered afterwards
2DS-Eta     loop: c1; then (phi1, phi2, c2s) with Schur elimination
1DS-Eta     as 2DS-Eta with a plain sparse LU in the second stage
GSN-FC      monolithic Newton on every dof including particle interiors
GSN-Macro   loop: (c1, phi1, phi2); then all particle dofs
GSN-Phi     loop: c1; then (phi1, phi2); then all particle dofs
GSN-FD      loop: particles; phi2; phi1; c1
=========  ==========================================================
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import DiscreteState, Discretization, SystemEval
from .microsolver import backward_recover
from .params import ELECTRODES, DomainError

__all__ = [
    "SolverKind",
    "SolverConfig",
    "SolverReport",
    "SolverError",
    "newton_solve",
    "fix_nullspace",
    "shift_mean",
    "Subproblem",
    "solve_subproblem",
    "recover_particles",
    "solve_step",
    "solve_step_2ds_fc",
    "solve_step_2ds_eta",
    "solve_step_1ds_eta",
    "solve_step_gsn",
    "schur_direction",
    "equilibrated_solve",
]

log = logging.getLogger(__name__)


class SolverKind(str, Enum):
    TWO_DS_FC = "2DS-FC"
    TWO_DS_ETA = "2DS-Eta"
    ONE_DS_ETA = "1DS-Eta"
    GSN_FC = "GSN-FC"
    GSN_MACRO = "GSN-Macro"
    GSN_PHI = "GSN-Phi"
    GSN_FD = "GSN-FD"

    @classmethod
    def parse(cls, value) -> "SolverKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        for k in cls:
            if k.value.lower() == key or k.name.lower().replace("_", "-") == key:
                return k
        raise ValueError(f"unknown solver kind {value!r}; choose from {[k.value for k in cls]}")


@dataclass(frozen=True)
class SolverConfig:
    """Tolerances and safeguards shared by all solver kinds.

    ``update_norm_floor`` is relative: the denominator of the relative
    update of each block is floored at ``update_norm_floor`` times that
    block's natural scale (concentration scale or 1 V for potentials).
    """

    newton_abs_tol: float = 1e-13
    newton_rel_tol: float = 1e-10
    outer_rtol: float = 1e-10
    max_newton: int = 50
    max_outer: int = 200
    backtrack: float = 0.5
    max_halvings: int = 25
    armijo: float = 1e-4
    update_norm_floor: float = 1e-3
    pin: int | None = None

    def __post_init__(self):
        for name in ("newton_abs_tol", "newton_rel_tol", "outer_rtol", "update_norm_floor"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive")
        for name in ("backtrack", "armijo"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0,1)")
        if self.max_newton < 1 or self.max_outer < 1 or self.max_halvings < 0:
            raise ValueError("iteration limits must be positive")

    @classmethod
    def from_mapping(cls, m: Mapping | None) -> "SolverConfig":
        m = dict(m or {})
        known = set(cls.__dataclass_fields__)
        bad = sorted(set(m) - known)
        if bad:
            raise ValueError(f"unknown solver option(s): {', '.join(bad)}")
        return cls(**m)

    @property
    def loosest(self) -> float:
        return max(self.newton_rel_tol, self.outer_rtol)


@dataclass
class SolverReport:
    outer_iterations: int = 0
    newton_iterations_total: int = 0
    linear_solves: int = 0
    residual_history: list = field(default_factory=list)
    wall_time: float = 0.0
    peak_matrix_order: int = 0
    converged: bool = True
    message: str = ""

    def note_matrix(self, n: int) -> None:
        self.peak_matrix_order = max(self.peak_matrix_order, int(n))

    def merge(self, other: "SolverReport") -> None:
        self.newton_iterations_total += other.newton_iterations_total
        self.linear_solves += other.linear_solves
        self.residual_history.extend(other.residual_history)
        self.peak_matrix_order = max(self.peak_matrix_order, other.peak_matrix_order)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("residual_history")
        return d


class SolverError(RuntimeError):
    """Nonlinear iteration failed; ``report`` carries the diagnostics."""

    def __init__(self, message: str, report: SolverReport | None = None):
        super().__init__(message)
        self.report = report


# Newton -----------------------------------------------------------------------

def equilibrated_solve(A, b):
    """Sparse LU solve of ``A x = b`` after row then column max-scaling.

    The blocks of the cell system differ by many orders of magnitude; scaling
    first keeps the LU error at round-off of the scaled system.
    """
    A = sp.csr_matrix(A)
    r = 1.0 / abs(A).max(axis=1).toarray().ravel()
    Ar = sp.diags(r) @ A
    c = 1.0 / abs(Ar).max(axis=0).toarray().ravel()
    return c * spla.spsolve((Ar @ sp.diags(c)).tocsc(), r * b)


def _default_linear_solve(jac, F):
    if sp.issparse(jac):
        return -equilibrated_solve(jac, F)
    return -np.linalg.solve(np.atleast_2d(jac), F)


def newton_solve(
    fun: Callable,
    x0,
    cfg: SolverConfig,
    linear_solve: Callable | None = None,
    floor=None,
    report: SolverReport | None = None,
):
    """Damped Newton iteration with backtracking line search.

    Parameters
    ----------
    fun : callable ``fun(x, jacobian: bool) -> (F, J)``
        Residual and Jacobian (``J`` may be any object understood by
        ``linear_solve``; it is ignored when ``jacobian`` is False).  May
        raise :class:`DomainError` for inadmissible trial points.
    x0 : array_like
    cfg : SolverConfig
    linear_solve : callable ``(J, F) -> d`` solving ``J d = -F``
    floor : float or array, optional
        Denominator floor of the relative-update test.
    report : SolverReport, optional
        Accumulates counters and the residual history.

    Returns
    -------
    x : ndarray
    report : SolverReport
    """
    linear_solve = linear_solve or _default_linear_solve
    report = report if report is not None else SolverReport()
    x = np.array(x0, dtype=float)
    floor = np.full_like(x, 1e-300) if floor is None else np.broadcast_to(floor, x.shape)
    F, jac = fun(x, True)
    fn = float(np.linalg.norm(F))
    report.residual_history.append(fn)
    for _ in range(cfg.max_newton):
        if fn <= cfg.newton_abs_tol:
            return x, report
        d = np.asarray(linear_solve(jac, F), dtype=float)
        report.linear_solves += 1
        report.newton_iterations_total += 1
        if not np.all(np.isfinite(d)):
            raise SolverError("non-finite Newton direction", report)
        rel_full = float(np.max(np.abs(d) / np.maximum(np.abs(x), floor), initial=0.0))
        gamma, accepted = 1.0, False
        for _ in range(cfg.max_halvings + 1):
            xt = x + gamma * d
            try:
                Ft, jt = fun(xt, gamma == 1.0)
            except DomainError:
                gamma *= cfg.backtrack
                continue
            ft = float(np.linalg.norm(Ft))
            if np.isfinite(ft) and ft * ft <= (1.0 - 2.0 * cfg.armijo * gamma) * fn * fn:
                accepted = True
                break
            gamma *= cfg.backtrack
        if not accepted:
            if rel_full < cfg.newton_rel_tol:
                # the update is below the convergence threshold and the
                # residual is at its rounding floor
                return x, report
            raise SolverError(f"line search stalled (|F| = {fn:.3e}, rel. update {rel_full:.3e})", report)
        if jt is None:
            Ft, jt = fun(xt, True)
        x, F, jac, fn = xt, Ft, jt, ft
        report.residual_history.append(fn)
        if gamma * rel_full < cfg.newton_rel_tol:
            return x, report
    raise SolverError(f"Newton did not converge in {cfg.max_newton} iterations (|F| = {fn:.3e})", report)


# null space -------------------------------------------------------------------

def fix_nullspace(A, b, pin: int):
    """Delete row and column ``pin`` of ``A`` (and entry ``pin`` of ``b``).

    Returns
    -------
    A_red, b_red, keep : reduced matrix, reduced vector and kept indices
    """
    n = A.shape[0]
    if not 0 <= pin < n:
        raise IndexError(f"pin index {pin} out of range for order {n}")
    keep = np.delete(np.arange(n), pin)
    A = sp.csr_matrix(A) if sp.issparse(A) else np.asarray(A)
    if sp.issparse(A):
        return A[keep][:, keep], np.asarray(b)[keep], keep
    return A[np.ix_(keep, keep)], np.asarray(b)[keep], keep


def shift_mean(disc: Discretization, state: DiscreteState) -> DiscreteState:
    """Add C = -mean(phi1) to both potentials (keeps eta, makes phi1 mean-zero)."""
    c = -disc.phi1_mean(state.phi1)
    out = state.copy()
    out.phi1 += c
    out.phi2 += c
    return out


# subproblems ------------------------------------------------------------------

@dataclass(frozen=True)
class Subproblem:
    """Live unknown blocks and how their Newton systems are solved.

    Attributes
    ----------
    live : tuple of block names from ``c1, phi1, phi2, c2s, c2``
    linear : "schur" eliminates c2s element by element, "full" factorizes
        the whole live Jacobian
    """

    live: tuple
    linear: str = "full"

    @property
    def radial(self) -> str:
        return "full" if "c2" in self.live else "surface"

    @property
    def needs_pin(self) -> bool:
        return "phi1" in self.live and "phi2" in self.live


def block_scales(disc: Discretization) -> dict:
    ps = disc.ps
    c1s = max(ps.region(t).c1_0 for t in ps.regions)
    c2s = max(ps.electrode(t).c2max for t in ELECTRODES)
    return {"c1": c1s, "phi1": 1.0, "phi2": 1.0, "c2s": c2s, "c2": c2s}


def _live_index(disc: Discretization, live) -> tuple[np.ndarray, dict]:
    dm = disc.dm
    idx, where = [], {}
    pos = 0
    for name in live:
        sl = dm.slice(name)
        r = np.arange(sl.start, sl.stop)
        where[name] = slice(pos, pos + r.size)
        pos += r.size
        idx.append(r)
    return np.concatenate(idx), where


def _floor_vector(disc, live, where, rel: float) -> np.ndarray:
    scales = block_scales(disc)
    n = max(w.stop for w in where.values())
    out = np.empty(n)
    for name in live:
        out[where[name]] = rel * scales[name]
    return out


def schur_direction(disc: Discretization, ev: SystemEval, live, F, pin_local):
    """Newton direction with the surface block eliminated element by element.

    ``live`` must end with ``"c2s"``.  Returns the direction over the live
    unknowns and the order of the factorized (pinned) Schur system.
    """
    dm = disc.dm
    macro = [f for f in live if f != "c2s"]
    gidx, where = _live_index(disc, macro)
    n1 = gidx.size
    glob2loc = np.full(dm.n_reduced, -1, dtype=np.int64)
    glob2loc[gidx] = np.arange(n1)

    J = ev.jacobian
    A = J[gidx][:, gidx].tocsr()
    dofs = glob2loc[disc.macro_dofs_e2]
    u, v, w = ev.u_loc, ev.v_loc, ev.w
    if np.any(w == 0.0):
        raise SolverError(f"singular surface block at element {int(dm.e2[np.flatnonzero(w == 0.0)[0]])}")
    F1, F2 = F[:n1], F[n1:]
    # element-by-element elimination: A - u v^T / w and F1 - u F2 / w
    nl = dofs.shape[1]
    rows = np.repeat(dofs, nl, axis=1)
    cols = np.tile(dofs, (1, nl))
    vals = -((u / w[:, None])[:, :, None] * v[:, None, :]).reshape(rows.shape)
    ok = (rows >= 0) & (cols >= 0)
    S = (A + sp.coo_matrix((vals[ok], (rows[ok], cols[ok])), shape=(n1, n1))).tocsr()
    rhs = -F1.copy()
    upd = u * (F2 / w)[:, None]
    okv = dofs >= 0
    np.add.at(rhs, dofs[okv], upd[okv])
    if pin_local is not None:
        S_r, rhs_r, keep = fix_nullspace(S, rhs, pin_local)
        d1 = np.zeros(n1)
        d1[keep] = equilibrated_solve(S_r, rhs_r)
        order = n1 - 1
    else:
        d1 = equilibrated_solve(S, rhs)
        order = n1
    d1_loc = np.where(dofs >= 0, d1[np.maximum(dofs, 0)], 0.0)
    d2 = (-F2 - (v * d1_loc).sum(1)) / w
    return np.concatenate([d1, d2]), order


def solve_subproblem(disc: Discretization, state: DiscreteState, prev: DiscreteState, t: float,
                     sub: Subproblem, cfg: SolverConfig, report: SolverReport,
                     lag: Mapping[str, DiscreteState] | None = None) -> DiscreteState:
    """Newton on the live blocks of ``sub``; the rest stays at ``state``."""
    dm = disc.dm
    mode = sub.radial
    gidx, where = _live_index(disc, sub.live)
    base = state.pack(dm, mode)
    x0 = base[gidx]
    floor = _floor_vector(disc, sub.live, where, cfg.update_norm_floor)
    pin_local = None
    if sub.needs_pin:
        pin_global = dm.offset["phi2"] if cfg.pin is None else int(cfg.pin)
        if not dm.offset["phi2"] <= pin_global < dm.offset["phi2"] + dm.nv2:
            raise IndexError("pin must be a phi2 dof")
        pin_local = where["phi2"].start + pin_global - dm.offset["phi2"]

    def state_of(x):
        full = base.copy()
        full[gidx] = x
        return state.unpack(dm, full, mode)

    def fun(x, jac):
        ev = disc.evaluate(state_of(x), prev, t, lag=lag, radial=mode, jacobian=jac)
        return ev.vector(sub.live), (ev if jac else None)

    def lin(ev, F):
        if sub.linear == "schur":
            d, order = schur_direction(disc, ev, sub.live, F, pin_local)
            report.note_matrix(order)
            return d
        Jl = ev.jacobian[gidx][:, gidx]
        if pin_local is not None:
            Jr, Fr, keep = fix_nullspace(Jl, F, pin_local)
            d = np.zeros(gidx.size)
            d[keep] = -equilibrated_solve(Jr, Fr)
            report.note_matrix(gidx.size - 1)
            return d
        report.note_matrix(gidx.size)
        return -equilibrated_solve(Jl, F)

    x, _ = newton_solve(fun, x0, cfg, lin, floor, report)
    return state_of(x)


def recover_particles(disc: Discretization, state: DiscreteState, prev: DiscreteState, t: float) -> DiscreteState:
    """Solve every particle's linear system for its interior nodes."""
    Jh = disc.evaluate(state, prev, t, jacobian=False).Jh
    out = state.copy()
    for tag in ELECTRODES:
        rows = disc.dm.rows_of[tag]
        if rows.size:
            out.c2[tag] = backward_recover(disc.ops[tag], prev.c2[tag], Jh[rows])
    return out


def _rel_change(disc, new: DiscreteState, old: DiscreteState, rel_floor: float) -> float:
    sc = block_scales(disc)
    worst = 0.0
    for name in ("c1", "phi1", "phi2"):
        a, b = getattr(new, name), getattr(old, name)
        fl = rel_floor * sc[name]
        worst = max(worst, float(np.max(np.abs(a - b) / np.maximum(np.abs(b), fl), initial=0.0)))
    fl = rel_floor * sc["c2"]
    for tag in ELECTRODES:
        a, b = new.c2[tag], old.c2[tag]
        worst = max(worst, float(np.max(np.abs(a - b) / np.maximum(np.abs(b), fl), initial=0.0)))
    return worst


def _rel_change_surface(disc, new, old, rel_floor) -> float:
    sc = block_scales(disc)
    worst = 0.0
    for name in ("c1", "phi1", "phi2"):
        a, b = getattr(new, name), getattr(old, name)
        worst = max(worst, float(np.max(np.abs(a - b) / np.maximum(np.abs(b), rel_floor * sc[name]),
                                        initial=0.0)))
    a, b = new.surface(disc.dm), old.surface(disc.dm)
    worst = max(worst, float(np.max(np.abs(a - b) / np.maximum(np.abs(b), rel_floor * sc["c2s"]),
                                    initial=0.0)))
    return worst


# recipes ----------------------------------------------------------------------

_ALL_SURFACE = ("c1", "phi1", "phi2", "c2s")


def _finish(disc, state, report, t0):
    report.wall_time = time.perf_counter() - t0
    return shift_mean(disc, state), report


def solve_step_2ds_fc(disc, prev, t, cfg, guess=None):
    """Newton on the surface-reduced system with Schur elimination, then recovery."""
    t0 = time.perf_counter()
    report = SolverReport(outer_iterations=1)
    state = (guess or prev).copy()
    state = solve_subproblem(disc, state, prev, t, Subproblem(_ALL_SURFACE, "schur"), cfg, report)
    state = recover_particles(disc, state, prev, t)
    return _finish(disc, state, report, t0)


def _eta_loop(disc, prev, t, cfg, linear, guess=None):
    t0 = time.perf_counter()
    report = SolverReport()
    state = (guess or prev).copy()
    sub_a = Subproblem(("c1",))
    sub_b = Subproblem(("phi1", "phi2", "c2s"), linear)
    for n in range(1, cfg.max_outer + 1):
        old = state
        state = solve_subproblem(disc, state, prev, t, sub_a, cfg, report)
        state = solve_subproblem(disc, state, prev, t, sub_b, cfg, report)
        report.outer_iterations = n
        if _rel_change_surface(disc, state, old, cfg.update_norm_floor) < cfg.outer_rtol:
            break
    else:
        report.converged = False
        raise SolverError(f"outer loop did not converge in {cfg.max_outer} iterations", report)
    state = recover_particles(disc, state, prev, t)
    return _finish(disc, state, report, t0)


def solve_step_2ds_eta(disc, prev, t, cfg, guess=None):
    """Outer loop over c1 and (phi1, phi2, c2s); the latter uses Schur elimination."""
    return _eta_loop(disc, prev, t, cfg, "schur", guess)


def solve_step_1ds_eta(disc, prev, t, cfg, guess=None):
    """Outer loop over c1 and (phi1, phi2, c2s) with a plain sparse LU."""
    return _eta_loop(disc, prev, t, cfg, "full", guess)


_GSN_STAGES = {
    SolverKind.GSN_MACRO: [(("c1", "phi1", "phi2"), None), (("c2",), None)],
    SolverKind.GSN_PHI: [(("c1",), None), (("phi1", "phi2"), None), (("c2",), None)],
    # the phi2 stage reads the kinetic surface concentration from the start
    # of the sweep; every other argument takes its latest value
    SolverKind.GSN_FD: [(("c2",), None), (("phi2",), ("c2_J",)), (("phi1",), None), (("c1",), None)],
}


def solve_step_gsn(kind, disc, prev, t, cfg, guess=None):
    """Gauss-Seidel-Newton baselines, or the monolithic solve for GSN-FC."""
    kind = SolverKind.parse(kind)
    t0 = time.perf_counter()
    report = SolverReport()
    state = (guess or prev).copy()
    if kind == SolverKind.GSN_FC:
        report.outer_iterations = 1
        state = solve_subproblem(disc, state, prev, t, Subproblem(("c1", "phi1", "phi2", "c2")), cfg, report)
        return _finish(disc, state, report, t0)
    if kind not in _GSN_STAGES:
        raise ValueError(f"{kind.value} is not a Gauss-Seidel-Newton kind")
    stages = _GSN_STAGES[kind]
    for n in range(1, cfg.max_outer + 1):
        old = state
        for live, lagged in stages:
            lag = {r: old for r in lagged} if lagged else None
            state = solve_subproblem(disc, state, prev, t, Subproblem(live), cfg, report, lag)
        report.outer_iterations = n
        if _rel_change(disc, state, old, cfg.update_norm_floor) < cfg.outer_rtol:
            break
    else:
        report.converged = False
        raise SolverError(f"{kind.value}: outer loop did not converge in {cfg.max_outer} iterations", report)
    return _finish(disc, state, report, t0)


def solve_step(kind, disc: Discretization, prev: DiscreteState, t: float, cfg: SolverConfig,
               guess: DiscreteState | None = None):
    """Advance one step with the chosen solver kind.

    Returns
    -------
    state : DiscreteState
        Converged new level, mean of phi1 shifted to zero.
    report : SolverReport
    """
    kind = SolverKind.parse(kind)
    if kind == SolverKind.TWO_DS_FC:
        return solve_step_2ds_fc(disc, prev, t, cfg, guess)
    if kind == SolverKind.TWO_DS_ETA:
        return solve_step_2ds_eta(disc, prev, t, cfg, guess)
    if kind == SolverKind.ONE_DS_ETA:
        return solve_step_1ds_eta(disc, prev, t, cfg, guess)
    return solve_step_gsn(kind, disc, prev, t, cfg, guess)

"""Error norms against nested reference solutions, convergence studies and
solver benchmarks.

Reference transfer is exact: the coarse solution is evaluated through its own
P1 interpolant at quadrature points of the fine mesh, so no projection error
enters the measured differences.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .assembly import DiscreteState, Discretization, _p1_basis, _p1_gradients, quadrature_rules
from .mesh import CellMesh, RadialGrid, refine_radial, refine_uniform
from .microsolver import radial_matrices
from .params import ELECTRODES, ParameterSet, SubdomainTag
from .solvers import SolverConfig, SolverError, SolverKind, block_scales
from .timeloop import SimulationError, SimulationPlan, initialize_state, run

__all__ = [
    "ErrorNormKind",
    "NormSpec",
    "DEFAULT_NORMS",
    "NestingError",
    "Solution",
    "error_norms",
    "fit_order",
    "ConvergenceTable",
    "StudySetup",
    "StudyError",
    "convergence_study",
    "BenchRow",
    "BenchmarkReport",
    "BenchmarkError",
    "benchmark_solvers",
    "state_distance",
]


class ErrorNormKind(str, Enum):
    H1_OMEGA = "H1_Omega"
    H1_OMEGA2 = "H1_Omega2"
    L2_GAMMA_SURFACE = "L2_Gamma_surface"
    L2_L2R = "L2_L2r"
    L2_H1R = "L2_H1r"


class NormSpec(NamedTuple):
    name: str
    field: str
    kind: ErrorNormKind


DEFAULT_NORMS = (
    NormSpec("phi1_H1", "phi1", ErrorNormKind.H1_OMEGA),
    NormSpec("phi2_H1", "phi2", ErrorNormKind.H1_OMEGA2),
    NormSpec("c1_H1", "c1", ErrorNormKind.H1_OMEGA),
    NormSpec("c2bar_L2", "c2", ErrorNormKind.L2_GAMMA_SURFACE),
    NormSpec("c2_L2H1r", "c2", ErrorNormKind.L2_H1R),
    NormSpec("c2_L2L2r", "c2", ErrorNormKind.L2_L2R),
)


class NestingError(ValueError):
    """The reference discretization does not refine the coarse one."""


class Solution(NamedTuple):
    state: DiscreteState
    mesh: CellMesh
    radial: Mapping


# nested transfer ----------------------------------------------------------------

def _locate(coarse: CellMesh, fine: CellMesh) -> np.ndarray:
    """Parent coarse element of every fine element."""
    if coarse.dim != fine.dim:
        raise NestingError("meshes have different dimensions")
    tol = 1e-9 * max(coarse.h, 1e-300)
    d, _ = cKDTree(fine.vertices).query(coarse.vertices)
    if np.any(d > tol):
        raise NestingError("coarse vertices are not vertices of the fine mesh")
    xc = fine.vertices[fine.elements].mean(axis=1)
    xv = coarse.vertices[coarse.elements]
    if coarse.dim == 1:
        lo = xv[:, :, 0].min(axis=1)
        hi = xv[:, :, 0].max(axis=1)
        order = np.argsort(lo)
        pos = np.searchsorted(lo[order], xc[:, 0], side="right") - 1
        parent = order[np.clip(pos, 0, None)]
        ok = (pos >= 0) & (xc[:, 0] <= hi[parent] + tol)
    else:
        k = min(16, coarse.n_elements)
        _, cand = cKDTree(xv.mean(axis=1)).query(xc, k=k)
        cand = cand.reshape(xc.shape[0], -1)
        parent = np.full(xc.shape[0], -1, dtype=np.int64)
        for j in range(cand.shape[1]):
            todo = parent < 0
            if not todo.any():
                break
            e = cand[todo, j]
            lam = _barycentric(xv[e], xc[todo])
            inside = lam.min(axis=1) >= -1e-10
            parent[np.flatnonzero(todo)[inside]] = e[inside]
        ok = parent >= 0
    if not ok.all():
        raise NestingError("fine elements outside every coarse element")
    if np.any(coarse.tags[parent] != fine.tags):
        raise NestingError("subdomain tags differ between nested elements")
    return parent


def _barycentric(xv: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of points ``x`` (n, dim) in simplices ``xv``."""
    if xv.shape[-1] == 1:
        x0, ln = xv[:, 0, 0], xv[:, 1, 0] - xv[:, 0, 0]
        if x.ndim == 3:
            x0, ln = x0[:, None], ln[:, None]
        t = (x[..., 0] - x0) / ln
        return np.stack([1.0 - t, t], axis=-1)
    B = np.stack([xv[:, 1] - xv[:, 0], xv[:, 2] - xv[:, 0]], axis=2)
    Binv = np.linalg.inv(B)
    if x.ndim == 2:
        st = np.einsum("eij,ej->ei", Binv, x - xv[:, 0])
    else:
        st = np.einsum("eij,eqj->eqi", Binv, x - xv[:, 0][:, None, :])
    return np.concatenate([1.0 - st.sum(axis=-1, keepdims=True), st], axis=-1)


def _radial_prolongation(coarse: RadialGrid, fine: RadialGrid) -> np.ndarray:
    rc, rf = np.asarray(coarse.nodes), np.asarray(fine.nodes)
    tol = 1e-9 * rc[-1]
    if abs(rc[-1] - rf[-1]) > tol or np.any(np.min(np.abs(rc[:, None] - rf[None, :]), axis=1) > tol):
        raise NestingError(f"radial grid of {SubdomainTag(coarse.tag).key} is not refined by the reference grid")
    P = np.empty((rf.size, rc.size))
    for j in range(rc.size):
        e = np.zeros(rc.size)
        e[j] = 1.0
        P[:, j] = np.interp(rf, rc, e)
    return P


def _element_radial(mesh: CellMesh, state: DiscreteState):
    """Per element: the row of ``state.c2[tag]`` (-1 outside the electrodes)."""
    row = np.full(mesh.n_elements, -1, dtype=np.int64)
    for tag in ELECTRODES:
        el = mesh.elements_of(tag)
        row[el] = np.arange(el.size)
    return row


def _vertex_field(sol: Solution, name: str) -> np.ndarray:
    v = getattr(sol.state, name)
    if name != "phi2":
        return v
    full = np.full(sol.mesh.n_vertices, np.nan)
    full[sol.mesh.electrode_vertices] = v
    return full


def error_norms(coarse: Solution, reference: Solution, norms: Sequence[NormSpec] = DEFAULT_NORMS,
                quad_degree: int = 2) -> dict:
    """Norms of ``coarse - reference`` evaluated on the reference mesh.

    Parameters
    ----------
    coarse, reference : Solution
        ``reference.mesh`` must be a uniform refinement of ``coarse.mesh`` (or
        the same mesh) and every reference radial grid must contain the
        coarse radial nodes.
    norms : sequence of NormSpec
    quad_degree : int
        Degree of the fine-mesh rule; 2 integrates squared P1 differences
        exactly.

    Returns
    -------
    dict
        ``name -> value`` for each requested norm.

    Raises
    ------
    NestingError
        When the discretizations are not nested.
    """
    ma, mb = coarse.mesh, reference.mesh
    parent = _locate(ma, mb)
    pts, w = quadrature_rules(mb.dim, quad_degree)
    ref_measure = 1.0 if mb.dim == 1 else 0.5
    Nq = _p1_basis(pts)
    xq = np.einsum("qa,ead->eqd", Nq, mb.vertices[mb.elements])
    lam = _barycentric(ma.vertices[ma.elements][parent], xq)
    # an element that is its own parent transfers without round-off
    same = np.all(ma.vertices[ma.elements[parent]] == mb.vertices[mb.elements], axis=(1, 2))
    lam[same] = Nq
    ga, gb = _p1_gradients(ma), _p1_gradients(mb)
    vol = mb.volumes
    wv = vol[:, None] * w[None, :] / ref_measure

    out = {}
    kinds = {n.kind for n in norms}
    radial_needed = kinds & {ErrorNormKind.L2_GAMMA_SURFACE, ErrorNormKind.L2_L2R, ErrorNormKind.L2_H1R}
    if radial_needed:
        row_a = _element_radial(ma, coarse.state)
        row_b = _element_radial(mb, reference.state)
    for spec in norms:
        kind = ErrorNormKind(spec.kind)
        if kind in (ErrorNormKind.H1_OMEGA, ErrorNormKind.H1_OMEGA2):
            els = mb.electrode_elements if kind is ErrorNormKind.H1_OMEGA2 else np.arange(mb.n_elements)
            ua = _vertex_field(coarse, spec.field)[ma.elements[parent[els]]]
            ub = _vertex_field(reference, spec.field)[mb.elements[els]]
            diff = np.einsum("eqa,ea->eq", lam[els], ua) - np.einsum("qa,ea->eq", Nq, ub)
            grad = np.einsum("ea,ead->ed", ua, ga[parent[els]]) - np.einsum("ea,ead->ed", ub, gb[els])
            val = np.sum(wv[els] * diff**2) + np.sum(vol[els] * np.sum(grad**2, axis=1))
        elif kind is ErrorNormKind.L2_GAMMA_SURFACE:
            val = 0.0
            for tag in ELECTRODES:
                els = mb.elements_of(tag)
                sa = coarse.state.c2[tag][row_a[parent[els]], -1]
                sb = reference.state.c2[tag][row_b[els], -1]
                val += float(np.sum(vol[els] * (sa - sb) ** 2))
        else:
            val = 0.0
            for tag in ELECTRODES:
                gb_r = reference.radial[tag]
                P = _radial_prolongation(coarse.radial[tag], gb_r)
                els = mb.elements_of(tag)
                D = coarse.state.c2[tag][row_a[parent[els]]] @ P.T - reference.state.c2[tag][row_b[els]]
                (md, mo), (kd, ko) = radial_matrices(gb_r, 1.0)
                W = sp.diags([mo, md, mo], [-1, 0, 1])
                if kind is ErrorNormKind.L2_H1R:
                    W = W + sp.diags([ko, kd, ko], [-1, 0, 1])
                val += float(np.sum(vol[els] * np.sum(D * (W @ D.T).T, axis=1)))
        out[spec.name] = math.sqrt(max(val, 0.0))
    return out


# convergence tables -------------------------------------------------------------

def fit_order(sizes, errors) -> float:
    """Least-squares slope of log2(error) against log2(size)."""
    s = np.asarray(sizes, dtype=float)
    e = np.asarray(errors, dtype=float)
    if s.size < 3:
        raise ValueError("an order estimate needs at least 3 levels")
    if np.any(e <= 0.0) or not np.all(np.isfinite(e)):
        return math.nan
    return float(np.polyfit(np.log2(s), np.log2(e), 1)[0])


@dataclass
class ConvergenceTable:
    """Errors per refinement level and evaluation time.

    Attributes
    ----------
    axis : str
        ``"h"``, ``"dr"`` or ``"tau"``.
    levels : list of int
    sizes : list of float
        Mesh size, radial size or time step at each level.
    times : list of float
        Evaluation times.
    errors : dict
        ``name -> (n_levels, n_times)`` array.
    """

    axis: str
    levels: list
    sizes: list
    times: list
    errors: dict = field(default_factory=dict)

    def order(self, name: str, time_index: int = -1, fit_last: int | None = None) -> float:
        e = np.asarray(self.errors[name])[:, time_index]
        s = np.asarray(self.sizes, dtype=float)
        if fit_last:
            e, s = e[-fit_last:], s[-fit_last:]
        return fit_order(s, e)

    def orders(self, time_index: int = -1, fit_last: int | None = None) -> dict:
        return {n: self.order(n, time_index, fit_last) for n in self.errors}

    def to_csv(self, path) -> None:
        names = list(self.errors)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["axis", "level", "size", "t", *names])
            for i, (lvl, s) in enumerate(zip(self.levels, self.sizes)):
                for j, t in enumerate(self.times):
                    w.writerow([self.axis, lvl, repr(float(s)), repr(float(t)),
                                *[repr(float(self.errors[n][i, j])) for n in names]])
            for j, t in enumerate(self.times):
                w.writerow([self.axis, "order", "", repr(float(t)),
                            *[repr(self.order(n, j)) for n in names]])

    def to_text(self) -> str:
        """One block per norm: a row per evaluation time, a column per level."""
        lines = []
        head = ["t"] + [f"L={lvl}" for lvl in self.levels] + ["order"]
        for name, err in self.errors.items():
            lines.append(f"{name}  (axis {self.axis})")
            rows = [head]
            for j, t in enumerate(self.times):
                rows.append([f"{t:g}"] + [f"{err[i, j]:.3E}" for i in range(len(self.levels))]
                            + [f"{self.order(name, j):.2f}"])
            width = [max(len(r[c]) for r in rows) for c in range(len(head))]
            for r in rows:
                lines.append("  ".join(x.rjust(width[c]) for c, x in enumerate(r)))
            lines.append("")
        return "\n".join(lines)


class StudyError(RuntimeError):
    """A run of a convergence study failed."""


@dataclass(frozen=True)
class StudySetup:
    """Settings of a convergence study.

    ``levels`` are refinement levels of the studied axis; the axes not
    studied stay at ``h_level``, ``dr_level`` or ``tau_level``.  For the time
    axis, level ``l`` means ``tau = t_end / 2**l``.
    """

    axis: str
    levels: tuple
    reference_level: int
    t_end: float
    times: tuple
    h_level: int = 0
    dr_level: int = 0
    tau_level: int = 5
    solver: SolverKind = SolverKind.TWO_DS_FC

    def __post_init__(self):
        if self.axis not in ("h", "dr", "tau"):
            raise ValueError(f"unknown study axis {self.axis!r}")
        lv = tuple(int(x) for x in self.levels)
        object.__setattr__(self, "levels", lv)
        object.__setattr__(self, "times", tuple(float(t) for t in self.times))
        object.__setattr__(self, "solver", SolverKind.parse(self.solver))
        if list(lv) != sorted(set(lv)) or not lv:
            raise ValueError("levels must be strictly ascending")
        if self.reference_level <= lv[-1]:
            raise ValueError("reference level must be finer than every tested level")
        if not self.times or any(not 0.0 < t <= self.t_end for t in self.times):
            raise ValueError("evaluation times must lie in (0, t_end]")

    @classmethod
    def from_mapping(cls, m: Mapping) -> "StudySetup":
        m = dict(m)
        bad = sorted(set(m) - set(cls.__dataclass_fields__))
        if bad:
            raise ValueError(f"unknown study option(s): {', '.join(bad)}")
        return cls(**m)

    def resolution(self, level: int):
        """``(h_level, dr_level, tau)`` of a run at ``level`` of the axis."""
        h, dr, tl = self.h_level, self.dr_level, self.tau_level
        if self.axis == "h":
            h = level
        elif self.axis == "dr":
            dr = level
        else:
            tl = level
        return h, dr, self.t_end / 2**tl


def _run_capture(ps, mesh, radial, tau, setup: StudySetup, cfg):
    steps = {}
    for t in setup.times:
        k = round(t / tau)
        if abs(k * tau - t) > 1e-9 * max(t, tau):
            raise StudyError(f"evaluation time {t:g} is not a multiple of tau = {tau:g}")
        steps[k] = t
    captured = {}

    def observer(k, t, state):
        if k in steps:
            captured[steps[k]] = state.copy()

    plan = SimulationPlan(setup.t_end, tau, setup.solver)
    run(plan, ps, mesh, radial, cfg, observer=observer)
    return [captured[t] for t in setup.times]


def convergence_study(setup: StudySetup, ps: ParameterSet, mesh0: CellMesh, radial0: Mapping,
                      cfg: SolverConfig | None = None, norms: Sequence[NormSpec] = DEFAULT_NORMS,
                      log=None) -> ConvergenceTable:
    """Errors of every tested level against the reference level.

    Parameters
    ----------
    setup : StudySetup
    ps : ParameterSet
    mesh0 : CellMesh
        Level-0 macro mesh.
    radial0 : mapping tag -> RadialGrid
        Level-0 radial grids.
    cfg : SolverConfig, optional
    norms : sequence of NormSpec
    log : callable, optional
        Receives one progress message per finished run.

    Raises
    ------
    StudyError
        When any run fails; the message names the level.
    """
    cfg = cfg or SolverConfig()

    def discretize(level):
        h, dr, tau = setup.resolution(level)
        mesh = refine_uniform(mesh0, h)
        radial = {tag: refine_radial(radial0[tag], dr) for tag in ELECTRODES}
        size = {"h": mesh.h, "dr": max(g.dr for g in radial.values()), "tau": tau}[setup.axis]
        return mesh, radial, tau, size

    def solve(level):
        mesh, radial, tau, size = discretize(level)
        t0 = time.perf_counter()
        try:
            states = _run_capture(ps, mesh, radial, tau, setup, cfg)
        except (SimulationError, SolverError) as exc:
            raise StudyError(f"{setup.axis} study, level {level}: {exc}") from None
        if log:
            log(f"{setup.axis} level {level}: {time.perf_counter() - t0:.1f} s")
        return mesh, radial, size, states

    mesh_r, radial_r, _, ref_states = solve(setup.reference_level)
    sizes = []
    errors = {n.name: np.zeros((len(setup.levels), len(setup.times))) for n in norms}
    for i, level in enumerate(setup.levels):
        mesh, radial, size, states = solve(level)
        sizes.append(size)
        for j, (st, rs) in enumerate(zip(states, ref_states)):
            e = error_norms(Solution(st, mesh, radial), Solution(rs, mesh_r, radial_r), norms)
            for name, v in e.items():
                errors[name][i, j] = v
    return ConvergenceTable(setup.axis, list(setup.levels), sizes, list(setup.times), errors)


# benchmark ----------------------------------------------------------------------

def state_distance(disc: Discretization, a: DiscreteState, b: DiscreteState) -> float:
    """Largest per-block l-infinity difference relative to the block scale."""
    sc = block_scales(disc)
    d = a.max_abs_diff(b)
    return max(d[k] / sc[k] for k in d)


@dataclass
class BenchRow:
    kind: str
    status: str
    wall_time: float = math.nan
    newton_total: int = 0
    avg_outer: float = math.nan
    peak_order: int = 0
    message: str = ""


@dataclass
class BenchmarkReport:
    rows: list
    agreement: dict
    tolerance: float

    @property
    def agreement_ok(self) -> bool:
        return all(v <= self.tolerance for v in self.agreement.values())

    def row(self, kind) -> BenchRow:
        kind = SolverKind.parse(kind).value
        return next(r for r in self.rows if r.kind == kind)

    def to_csv(self, path) -> None:
        cols = ["kind", "status", "wall_time", "newton_total", "avg_outer", "peak_order"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.rows:
                w.writerow([getattr(r, c) for c in cols])

    def to_text(self) -> str:
        head = ["solver", "status", "wall [s]", "newton", "outer/step", "peak order"]
        rows = [head]
        for r in self.rows:
            rows.append([r.kind, r.status, f"{r.wall_time:.3f}", str(r.newton_total),
                         f"{r.avg_outer:.2f}", str(r.peak_order)])
        width = [max(len(x[c]) for x in rows) for c in range(len(head))]
        lines = ["  ".join(x[c].ljust(width[c]) for c in range(len(head))) for x in rows]
        worst = max(self.agreement.values(), default=0.0)
        lines.append(f"max pairwise relative difference {worst:.2e} (tolerance {self.tolerance:.1e})")
        return "\n".join(lines)


class BenchmarkError(RuntimeError):
    """Converged solvers disagree on the discrete solution."""

    def __init__(self, message: str, report: BenchmarkReport):
        super().__init__(message)
        self.report = report


def benchmark_solvers(kinds: Sequence, plan: SimulationPlan, ps: ParameterSet, mesh: CellMesh,
                      radial: Mapping, cfg: SolverConfig | None = None, repetitions: int = 1,
                      check: bool = True) -> BenchmarkReport:
    """Run the same plan with every solver kind and compare.

    All kinds start from one shared initial state.  The wall time is the
    minimum over ``repetitions``.  A kind that fails is reported as ``DNF``.

    Raises
    ------
    BenchmarkError
        When ``check`` is set and two converged kinds differ by more than
        10 times the loosest solver tolerance (relative, per block).
    """
    cfg = cfg or SolverConfig()
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    disc = Discretization(ps, mesh, radial, plan.tau)
    state0 = initialize_state(ps, mesh, radial, cfg, disc)
    rows, finals = [], {}
    for kind in kinds:
        kind = SolverKind.parse(kind)
        p = SimulationPlan(plan.t_end, plan.tau, kind)
        best, res = math.inf, None
        try:
            for _ in range(repetitions):
                t0 = time.perf_counter()
                res = run(p, ps, mesh, radial, cfg, state0=state0)
                best = min(best, time.perf_counter() - t0)
        except SimulationError as exc:
            rows.append(BenchRow(kind.value, "DNF", message=str(exc)))
            continue
        reps = res.reports
        rows.append(BenchRow(
            kind.value, "ok", best,
            newton_total=sum(r.newton_iterations_total for r in reps),
            avg_outer=float(np.mean([r.outer_iterations for r in reps])) if reps else 0.0,
            peak_order=max((r.peak_matrix_order for r in reps), default=0),
        ))
        finals[kind.value] = res.state
    names = list(finals)
    agreement = {
        (a, b): state_distance(disc, finals[a], finals[b])
        for i, a in enumerate(names) for b in names[i + 1:]
    }
    report = BenchmarkReport(rows, agreement, 10.0 * cfg.loosest)
    if check and not report.agreement_ok:
        (a, b), v = max(agreement.items(), key=lambda kv: kv[1])
        raise BenchmarkError(f"{a} and {b} differ by {v:.2e} relative", report)
    return report

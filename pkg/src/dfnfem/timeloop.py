"""Backward Euler time marching, initial conditions and run outputs.

Sign convention: a positive applied current is a discharge.  The current
density on the negative collector is ``-I`` and on the positive collector
``+I``, so lithium leaves the negative particles (``J > 0`` there).
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .assembly import DiscreteState, Discretization, project_current
from .params import ELECTRODES, ParameterSet, SubdomainTag, ocp_pair
from .solvers import (
    SolverConfig,
    SolverError,
    SolverKind,
    SolverReport,
    Subproblem,
    shift_mean,
    solve_step,
    solve_subproblem,
)

__all__ = [
    "SimulationPlan",
    "StepRecord",
    "TimeSeries",
    "RunResult",
    "SimulationError",
    "initialize_state",
    "project_current",
    "run",
    "write_state",
    "read_state",
]

CSV_COLUMNS = ("t", "voltage", "c1_min", "c1_max", "c2surf_min", "c2surf_max",
               "source_balance", "outer_its", "newton_its", "wall_s")


@dataclass(frozen=True)
class SimulationPlan:
    t_end: float
    tau: float
    solver: SolverKind = SolverKind.TWO_DS_FC
    snapshot_every: int = 0
    out_dir: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "solver", SolverKind.parse(self.solver))
        if not 0.0 < self.tau <= self.t_end:
            raise ValueError("need 0 < tau <= t_end")
        if self.snapshot_every < 0:
            raise ValueError("snapshot_every must be >= 0 (0 disables snapshots)")

    @property
    def n_steps(self) -> int:
        return int(math.floor(self.t_end / self.tau * (1.0 + 1e-12)))

    @classmethod
    def from_mapping(cls, m: Mapping, **override) -> "SimulationPlan":
        m = {**dict(m or {}), **{k: v for k, v in override.items() if v is not None}}
        bad = sorted(set(m) - set(cls.__dataclass_fields__))
        if bad:
            raise ValueError(f"unknown plan option(s): {', '.join(bad)}")
        return cls(**m)


@dataclass
class StepRecord:
    t: float
    voltage: float
    c1_min: float
    c1_max: float
    c2surf_min: float
    c2surf_max: float
    source_balance: float
    outer_its: int
    newton_its: int
    wall_s: float


@dataclass
class TimeSeries:
    records: list = field(default_factory=list)

    def append(self, rec: StepRecord) -> None:
        self.records.append(rec)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for r in self.records:
                w.writerow([repr(getattr(r, c)) if isinstance(getattr(r, c), float) else getattr(r, c)
                            for c in CSV_COLUMNS])

    @classmethod
    def from_csv(cls, path) -> "TimeSeries":
        out = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                out.append(StepRecord(**{
                    c: (int(row[c]) if c in ("outer_its", "newton_its") else float(row[c])) for c in CSV_COLUMNS
                }))
        return out


@dataclass
class RunResult:
    series: TimeSeries
    state: DiscreteState
    snapshots: list
    reports: list


class SimulationError(RuntimeError):
    """Solver failure during a run; carries the partial result."""

    def __init__(self, message: str, step: int, partial: RunResult):
        super().__init__(message)
        self.step = step
        self.partial = partial


def initialize_state(ps: ParameterSet, mesh, radial, cfg: SolverConfig | None = None,
                     disc: Discretization | None = None, t0: float = 0.0) -> DiscreteState:
    """Initial concentrations and the consistent potentials at ``t0``.

    Concentrations are set to the per-region constants; the potentials solve
    the coupled potential equations with the concentrations frozen.
    """
    cfg = cfg or SolverConfig()
    disc = disc or Discretization(ps, mesh, radial, 1.0)
    state = disc.initial_state()
    dm = disc.dm
    for tag in ELECTRODES:
        u, _ = ocp_pair(ps, tag, ps.electrode(tag).c2_0)
        verts = np.unique(mesh.elements[mesh.tags == int(tag)])
        state.phi2[dm.phi2_of_vertex[verts]] = float(u)
    report = SolverReport()
    try:
        state = solve_subproblem(disc, state, state, t0, Subproblem(("phi1", "phi2")), cfg, report)
    except SolverError as exc:
        raise SolverError(f"initialization failed: {exc}", exc.report) from None
    return shift_mean(disc, state)


# snapshots --------------------------------------------------------------------

def write_state(state: DiscreteState, path) -> None:
    """Plain-text dump: one ``name rows cols`` header per block, then values."""
    with open(path, "w") as fh:
        for name in ("c1", "phi1", "phi2"):
            v = getattr(state, name)
            fh.write(f"{name} {v.size} 1\n")
            np.savetxt(fh, v[:, None], fmt="%.17g")
        for tag in sorted(state.c2, key=int):
            a = state.c2[tag]
            fh.write(f"c2.{int(tag)} {a.shape[0]} {a.shape[1]}\n")
            if a.size:
                np.savetxt(fh, a, fmt="%.17g")


def read_state(path) -> DiscreteState:
    """Inverse of :func:`write_state`."""
    lines = Path(path).read_text().splitlines()
    pos, blocks = 0, {}
    while pos < len(lines):
        name, r, c = lines[pos].split()
        r, c = int(r), int(c)
        vals = np.array([ln.split() for ln in lines[pos + 1:pos + 1 + r]], dtype=float).reshape(r, c)
        blocks[name] = vals
        pos += 1 + r
    c2 = {SubdomainTag(int(k.split(".")[1])): v for k, v in blocks.items() if k.startswith("c2.")}
    return DiscreteState(blocks["c1"][:, 0], blocks["phi1"][:, 0], blocks["phi2"][:, 0], c2)


# marching ---------------------------------------------------------------------

def _record(disc: Discretization, state: DiscreteState, t: float, report: SolverReport) -> StepRecord:
    surf = state.surface(disc.dm)
    return StepRecord(
        t=float(t),
        voltage=disc.cell_voltage(state),
        c1_min=float(state.c1.min()),
        c1_max=float(state.c1.max()),
        c2surf_min=float(surf.min()) if surf.size else math.nan,
        c2surf_max=float(surf.max()) if surf.size else math.nan,
        source_balance=disc.source_balance(state),
        outer_its=int(report.outer_iterations),
        newton_its=int(report.newton_iterations_total),
        wall_s=float(report.wall_time),
    )


def run(plan: SimulationPlan, ps: ParameterSet, mesh, radial, cfg: SolverConfig | None = None,
        state0: DiscreteState | None = None, quad_degree: int = 4, observer=None) -> RunResult:
    """March ``plan.n_steps`` backward Euler steps.

    Parameters
    ----------
    plan : SimulationPlan
    ps, mesh, radial : model and discretization
    cfg : SolverConfig, optional
    state0 : DiscreteState, optional
        Initial state; computed by :func:`initialize_state` when omitted.
    observer : callable, optional
        Called as ``observer(k, t, state)`` after the initial state and after
        every accepted step.

    Returns
    -------
    RunResult
        Time series (first record is t = 0), final state, snapshot paths and
        per-step solver reports.

    Raises
    ------
    SimulationError
        When a step fails; ``partial`` holds everything up to the failure.
    """
    cfg = cfg or SolverConfig()
    disc = Discretization(ps, mesh, radial, plan.tau, quad_degree=quad_degree)
    state = state0.copy() if state0 is not None else initialize_state(ps, mesh, radial, cfg, disc)
    series, reports, snaps = TimeSeries(), [], []
    series.append(_record(disc, state, 0.0, SolverReport()))
    out = Path(plan.out_dir) if plan.out_dir else None
    if out is not None and plan.snapshot_every:
        (out / "snapshots").mkdir(parents=True, exist_ok=True)

    def snapshot(k, t, st):
        if out is None or not plan.snapshot_every:
            return
        if k % plan.snapshot_every and k != plan.n_steps:
            return
        p = out / "snapshots" / f"state_{k:06d}.txt"
        write_state(st, p)
        snaps.append({"step": k, "t": t, "path": str(p.relative_to(out))})

    snapshot(0, 0.0, state)
    if observer is not None:
        observer(0, 0.0, state)
    for k in range(1, plan.n_steps + 1):
        t = k * plan.tau
        try:
            state, report = solve_step(plan.solver, disc, state, t, cfg)
        except SolverError as exc:
            partial = RunResult(series, state, snaps, reports)
            raise SimulationError(f"step {k} (t = {t:g} s): {exc}", k, partial) from None
        reports.append(report)
        series.append(_record(disc, state, t, report))
        snapshot(k, t, state)
        if observer is not None:
            observer(k, t, state)
    if out is not None and snaps:
        (out / "snapshots" / "manifest.json").write_text(json.dumps(snaps, indent=1))
    return RunResult(series, state, snaps, reports)

"""Command-line entry point: ``dfnfem {simulate,converge,bench,validate}``.

Exit codes: 0 success, 2 usage error, 3 configuration or validation error,
4 solver failure.  Every invocation that gets past argument parsing writes
``manifest.json`` and ``config.resolved.json`` to the output directory; the
resolved config can be fed back through ``--config``.
"""
from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .analysis import (
    BenchmarkError,
    StudyError,
    StudySetup,
    benchmark_solvers,
    convergence_study,
)
from .mesh import grids_from_config
from .params import (
    ConfigError,
    apply_overrides,
    parameters_from_config,
    read_config,
    validate_parameters,
)
from .solvers import SolverConfig, SolverError, SolverKind
from .timeloop import SimulationError, SimulationPlan, run, write_state

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dfnfem", description="Finite element DFN cell simulator.")
    p.add_argument("--version", action="version", version=f"dfnfem {__version__}")
    sub = p.add_subparsers(dest="command", metavar="{simulate,converge,bench,validate}", parser_class=_Parser)
    sub.required = True
    helps = {
        "simulate": "run one discharge and write the time series",
        "converge": "run a convergence study ([study] table)",
        "bench": "compare the solver kinds on one plan ([bench] table)",
        "validate": "check a parameter file and exit",
    }
    for name, text in helps.items():
        s = sub.add_parser(name, help=text, description=text)
        s.add_argument("--config", required=True, help="TOML or JSON config file")
        s.add_argument("--out", default="out", help="output directory (default: ./out)")
        s.add_argument("--threads", type=int, default=None,
                       help="BLAS/OpenMP thread limit (default: all cores)")
        s.add_argument("--deterministic", action="store_true",
                       help="single-threaded, ordered reductions for bit-exact reruns")
        s.add_argument("--solver", default=None, help="override the plan's solver kind")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-key override, e.g. operating.current=0 (repeatable)")
    return p


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise _UsageError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _load(args):
    raw = apply_overrides(read_config(args.config), _overrides(args.set))
    if args.solver is not None:
        try:
            kind = SolverKind.parse(args.solver)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        raw.setdefault("plan", {})["solver"] = kind.value
    ps = parameters_from_config(raw)
    validate_parameters(ps)
    try:
        cfg = SolverConfig.from_mapping(raw.get("solver"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[solver]: {exc}") from None
    return raw, ps, cfg


def _plan(raw, out: Path | None) -> SimulationPlan:
    try:
        return SimulationPlan.from_mapping(raw.get("plan", {}), out_dir=str(out) if out else None)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[plan]: {exc}") from None


def cmd_validate(args, raw, ps, cfg, out: Path) -> dict:
    mesh, radial = grids_from_config(ps)
    if "plan" in raw:
        _plan(raw, None)
    if "study" in raw:
        _study(raw)
    info = {"elements": mesh.n_elements, "vertices": mesh.n_vertices,
            "radial_nodes": {t.key: g.n_nodes for t, g in radial.items()}}
    print(f"{args.config}: ok ({mesh.n_elements} elements, dim {mesh.dim})")
    return info


def cmd_simulate(args, raw, ps, cfg, out: Path) -> dict:
    plan = _plan(raw, out)
    mesh, radial = grids_from_config(ps)
    try:
        res = run(plan, ps, mesh, radial, cfg)
    except SimulationError as exc:
        exc.partial.series.to_csv(out / "timeseries.csv")
        raise
    res.series.to_csv(out / "timeseries.csv")
    write_state(res.state, out / "final_state.txt")
    v = res.series.column("voltage")
    print(f"{plan.n_steps} steps with {plan.solver.value}; voltage {v[0]:.6f} -> {v[-1]:.6f} V")
    return {"steps": plan.n_steps, "solver": plan.solver.value, "outputs": ["timeseries.csv", "final_state.txt"]}


def _study(raw) -> StudySetup:
    if "study" not in raw:
        raise ConfigError("missing [study] table")
    try:
        return StudySetup.from_mapping(raw["study"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[study]: {exc}") from None


def cmd_converge(args, raw, ps, cfg, out: Path) -> dict:
    setup = _study(raw)
    if args.solver is not None:
        setup = StudySetup.from_mapping({**raw["study"], "solver": raw["plan"]["solver"]})
    mesh0, radial0 = grids_from_config(ps)
    table = convergence_study(setup, ps, mesh0, radial0, cfg, log=lambda m: print(m, file=sys.stderr))
    stem = f"convergence_{setup.axis}"
    table.to_csv(out / f"{stem}.csv")
    text = table.to_text()
    (out / f"{stem}.txt").write_text(text)
    print(text)
    return {"axis": setup.axis, "orders": table.orders(), "outputs": [f"{stem}.csv", f"{stem}.txt"]}


def cmd_bench(args, raw, ps, cfg, out: Path) -> dict:
    plan = _plan(raw, None)
    bench = dict(raw.get("bench", {}))
    bad = sorted(set(bench) - {"kinds", "repetitions"})
    if bad:
        raise ConfigError(f"[bench]: unknown key(s) {', '.join(bad)}")
    try:
        kinds = [SolverKind.parse(k) for k in bench.get("kinds", [k.value for k in SolverKind])]
    except ValueError as exc:
        raise ConfigError(f"[bench]: {exc}") from None
    mesh, radial = grids_from_config(ps)
    report = benchmark_solvers(kinds, plan, ps, mesh, radial, cfg, int(bench.get("repetitions", 1)))
    report.to_csv(out / "bench.csv")
    (out / "bench.txt").write_text(report.to_text() + "\n")
    print(report.to_text())
    return {"max_difference": max(report.agreement.values(), default=0.0), "outputs": ["bench.csv", "bench.txt"]}


COMMANDS = {"simulate": cmd_simulate, "converge": cmd_converge, "bench": cmd_bench, "validate": cmd_validate}


def _write_manifest(out: Path, manifest: dict) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1, default=str))
    except OSError as exc:
        print(f"warning: could not write manifest: {exc}", file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _overrides(args.set)
        if args.threads is not None and args.threads < 1:
            raise _UsageError("--threads must be >= 1")
    except _UsageError as exc:
        print(f"dfnfem: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help and --version
        return int(exc.code or 0)

    out = Path(args.out)
    threads = 1 if args.deterministic else args.threads
    manifest = {
        "command": args.command,
        "config": str(args.config),
        "tool_version": __version__,
        "python": platform.python_version(),
        "threads": threads if threads is not None else os.cpu_count(),
        "deterministic": bool(args.deterministic),
        "status": "error",
    }
    t0 = time.perf_counter()
    code = EXIT_OK
    try:
        raw, ps, cfg = _load(args)
        manifest["resolved_config"] = raw
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved.json").write_text(json.dumps(raw, indent=1))
        with threadpool_limits(limits=threads):
            manifest["result"] = COMMANDS[args.command](args, raw, ps, cfg, out)
        manifest["status"] = "ok"
    except ConfigError as exc:
        code = EXIT_CONFIG
        manifest["error"] = {"type": "config", "message": str(exc)}
    except (SimulationError, SolverError, StudyError, BenchmarkError) as exc:
        code = EXIT_SOLVER
        manifest["error"] = {"type": "solver", "message": str(exc)}
    except OSError as exc:
        code = EXIT_CONFIG
        manifest["error"] = {"type": "io", "message": str(exc)}
    manifest["wall_time_s"] = time.perf_counter() - t0
    _write_manifest(out, manifest)
    if code:
        err = manifest["error"]
        print(f"dfnfem: {err['type']} error: {err['message']}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())

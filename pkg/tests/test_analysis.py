import math

import numpy as np
import pytest
import sympy
from hypothesis import given, strategies as st

from conftest import load_ps, random_state, small_problem
from dfnfem.analysis import (
    ConvergenceTable,
    ErrorNormKind,
    NestingError,
    NormSpec,
    Solution,
    StudySetup,
    benchmark_solvers,
    convergence_study,
    error_norms,
    fit_order,
    state_distance,
)
from dfnfem.assembly import Discretization
from dfnfem.mesh import build_radial, refine_radial, refine_uniform
from dfnfem.microsolver import dense_tridiag, radial_matrices
from dfnfem.params import ELECTRODES
from dfnfem.solvers import SolverConfig, SolverKind
from dfnfem.timeloop import SimulationPlan

H1 = NormSpec("u", "c1", ErrorNormKind.H1_OMEGA)


def _solution(ps, mesh, radial, rng=None):
    disc = Discretization(ps, mesh, radial, 1.0)
    state = random_state(disc, rng) if rng is not None else disc.initial_state()
    return Solution(state, mesh, radial)


@pytest.fixture(scope="module")
def grids():
    ps = load_ps()
    mesh, radial = small_problem(ps, (2, 1, 2), 3)
    return ps, mesh, radial


def test_identical_solutions_have_zero_error(grids):
    ps, mesh, radial = grids
    sol = _solution(ps, mesh, radial, np.random.default_rng(0))
    assert all(v == 0.0 for v in error_norms(sol, sol).values())


def test_single_hat_h1_norm(grids):
    ps, mesh, radial = grids
    coarse = _solution(ps, mesh, radial)
    coarse.state.c1[:] = 0.0
    coarse.state.c1[2] = 1.0
    fine = _solution(ps, refine_uniform(mesh, 2), radial)
    fine.state.c1[:] = 0.0
    x = sympy.symbols("x")
    a, b, c = (sympy.nsimplify(float(v)) for v in mesh.vertices[1:4, 0])
    up, down = (x - a) / (b - a), (c - x) / (c - b)
    exact = (sympy.integrate(up**2 + sympy.diff(up, x) ** 2, (x, a, b))
             + sympy.integrate(down**2 + sympy.diff(down, x) ** 2, (x, b, c)))
    assert error_norms(coarse, fine, [H1])["u"] == pytest.approx(math.sqrt(float(exact)), rel=1e-12)


@pytest.mark.parametrize("dim", [1, 2])
def test_linear_fields_have_no_transfer_error(dim):
    ps = load_ps()
    mesh, radial = small_problem(ps, (2, 1, 2), 3, *((1e-4, 2) if dim == 2 else (None, None)))
    fine_mesh = refine_uniform(mesh, 1)
    sols = [_solution(ps, m, radial) for m in (mesh, fine_mesh)]
    for s in sols:
        s.state.c1[:] = 1000.0 + 3e6 * s.mesh.vertices[:, 0] + (2e6 * s.mesh.vertices[:, 1] if dim == 2 else 0.0)
    assert error_norms(*sols, [H1])["u"] <= 1e-12 * 1000.0


def test_constant_particle_offset_closed_form(grids):
    ps, mesh, radial = grids
    a = _solution(ps, mesh, radial)
    b = _solution(ps, mesh, radial)
    delta = 7.0
    for tag in ELECTRODES:
        b.state.c2[tag] = a.state.c2[tag] + delta
    out = error_norms(a, b)
    vol = sum(mesh.volume_of(t) for t in ELECTRODES)
    l2r = sum(mesh.volume_of(t) * ps.electrode(t).Rs ** 3 / 3 for t in ELECTRODES)
    assert out["c2bar_L2"] == pytest.approx(delta * math.sqrt(vol), rel=1e-12)
    assert out["c2_L2L2r"] == pytest.approx(delta * math.sqrt(l2r), rel=1e-12)
    assert out["c2_L2H1r"] == pytest.approx(out["c2_L2L2r"], rel=1e-12)
    assert out["c1_H1"] == out["phi1_H1"] == out["phi2_H1"] == 0.0


def test_radial_norm_matches_weighted_sum(grids):
    ps, mesh, radial = grids
    rng = np.random.default_rng(5)
    a, b = _solution(ps, mesh, radial, rng), _solution(ps, mesh, radial, rng)
    spec = [NormSpec("l2h1", "c2", ErrorNormKind.L2_H1R)]
    total = 0.0
    for tag in ELECTRODES:
        (md, mo), (kd, ko) = radial_matrices(radial[tag], 1.0)
        W = dense_tridiag(md, mo) + dense_tridiag(kd, ko)
        D = a.state.c2[tag] - b.state.c2[tag]
        vol = mesh.volumes[mesh.elements_of(tag)]
        total += float(np.sum(vol * np.einsum("ei,ij,ej->e", D, W, D)))
    assert error_norms(a, b, spec)["l2h1"] == pytest.approx(math.sqrt(total), rel=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_error_norms_symmetric_on_one_mesh(seed):
    ps = load_ps()
    mesh, radial = small_problem(ps, (2, 1, 2), 3)
    rng = np.random.default_rng(seed)
    a, b = _solution(ps, mesh, radial, rng), _solution(ps, mesh, radial, rng)
    ab, ba = error_norms(a, b), error_norms(b, a)
    for k in ab:
        assert ab[k] == pytest.approx(ba[k], rel=1e-12)


def test_non_nested_inputs_rejected(grids):
    ps, mesh, radial = grids
    coarse = _solution(ps, mesh, radial)
    fine = _solution(ps, refine_uniform(mesh, 1), radial)
    with pytest.raises(NestingError, match="vertices"):
        error_norms(fine, coarse, [H1])
    other = small_problem(ps, (3, 1, 3), 3)[0]
    with pytest.raises(NestingError):
        error_norms(coarse, _solution(ps, other, radial), [H1])
    mesh2d, _ = small_problem(ps, (2, 1, 2), 3, 1e-4, 2)
    with pytest.raises(NestingError, match="dimensions"):
        error_norms(coarse, _solution(ps, mesh2d, radial), [H1])
    odd = {t: build_radial(ps, t, 4) for t in ELECTRODES}
    with pytest.raises(NestingError, match="radial grid"):
        error_norms(coarse, _solution(ps, mesh, odd))
    fine_r = {t: refine_radial(g, 1) for t, g in radial.items()}
    assert error_norms(coarse, _solution(ps, mesh, fine_r))["c2_L2L2r"] == 0.0


def test_fit_order():
    h = [0.5, 0.25, 0.125]
    assert fit_order(h, [3 * x**2 for x in h]) == pytest.approx(2.0, rel=1e-13)
    assert math.isnan(fit_order(h, [1.0, 0.0, 0.1]))
    with pytest.raises(ValueError, match="3 levels"):
        fit_order(h[:2], [1.0, 0.5])


def test_table_outputs(tmp_path):
    err = np.array([[4e-2, 2e-2], [2e-2, 1e-2], [1e-2, 5e-3]])
    t = ConvergenceTable("h", [1, 2, 3], [0.5, 0.25, 0.125], [1.0, 2.0], {"e": err})
    assert t.order("e") == pytest.approx(1.0, rel=1e-13)
    assert t.orders(0)["e"] == pytest.approx(1.0, rel=1e-13)
    path = tmp_path / "t.csv"
    t.to_csv(path)
    rows = path.read_text().splitlines()
    assert rows[0] == "axis,level,size,t,e" and len(rows) == 1 + 6 + 2
    assert rows[-1].startswith("h,order,,2.0,")
    text = t.to_text()
    assert "L=3" in text and "5.000E-03" in text and "1.00" in text


def test_study_setup_validation():
    base = dict(axis="tau", levels=[1, 2, 3], reference_level=5, t_end=4.0, times=[2.0, 4.0])
    s = StudySetup.from_mapping(base)
    assert s.levels == (1, 2, 3) and s.solver is SolverKind.TWO_DS_FC
    assert s.resolution(2) == (0, 0, 1.0)
    assert StudySetup.from_mapping({**base, "axis": "h"}).resolution(2) == (2, 0, 4.0 / 32)
    for bad in ({"axis": "x"}, {"levels": [2, 1]}, {"levels": []}, {"reference_level": 3},
                {"times": [5.0]}, {"times": []}):
        with pytest.raises(ValueError):
            StudySetup.from_mapping({**base, **bad})
    with pytest.raises(ValueError, match="unknown study option"):
        StudySetup.from_mapping({**base, "norm": "H1"})


def test_small_time_study_is_first_order():
    ps = load_ps()
    mesh, radial = small_problem(ps, (2, 1, 2), 4)
    setup = StudySetup("tau", (2, 3, 4), 7, 16.0, (8.0, 16.0))
    table = convergence_study(setup, ps, mesh, radial)
    assert table.sizes == [4.0, 2.0, 1.0]
    for name, order in table.orders().items():
        assert 0.8 <= order <= 1.3, (name, order)


def test_benchmark_reports_dnf_and_agreement():
    ps = load_ps()
    mesh, radial = small_problem(ps, (2, 1, 2), 4)
    plan = SimulationPlan(2.0, 1.0)
    kinds = ["2DS-FC", "GSN-FC", "GSN-FD"]
    rep = benchmark_solvers(kinds, plan, ps, mesh, radial, SolverConfig(max_outer=3))
    assert rep.row("gsn-fd").status == "DNF" and "outer loop" in rep.row("GSN-FD").message
    assert rep.row("2DS-FC").status == "ok" and rep.row("2DS-FC").avg_outer == 1.0
    assert list(rep.agreement) == [("2DS-FC", "GSN-FC")] and rep.agreement_ok
    assert "DNF" in rep.to_text()


def test_state_distance(grids):
    ps, mesh, radial = grids
    disc = Discretization(ps, mesh, radial, 1.0)
    a = disc.initial_state()
    b = a.copy()
    b.phi1[0] += 1e-3
    assert state_distance(disc, a, a) == 0.0
    assert state_distance(disc, a, b) == pytest.approx(1e-3)

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from conftest import CONFIGS, load_ps, random_state, small_problem
from dfnfem.assembly import Discretization
from dfnfem.mesh import grids_from_config
from dfnfem.params import ELECTRODES, DomainError, load_parameters, ocp_pair
from dfnfem.solvers import (
    SolverConfig,
    SolverError,
    SolverKind,
    block_scales,
    equilibrated_solve,
    fix_nullspace,
    newton_solve,
    shift_mean,
    solve_step,
)
from dfnfem.timeloop import initialize_state

LIVE = ("c1", "phi1", "phi2", "c2s")


def scalar(f, df):
    def fun(x, jac):
        return np.array([f(x[0])]), (np.array([[df(x[0])]]) if jac else None)
    return fun


# Newton -----------------------------------------------------------------------

def test_newton_quadratic():
    x, rep = newton_solve(scalar(lambda x: x * x - 4.0, lambda x: 2 * x), [3.0], SolverConfig())
    assert x[0] == pytest.approx(2.0, rel=1e-15)
    assert rep.newton_iterations_total <= 6


def test_newton_halves_on_domain_error():
    def f(x):
        if x <= 0.0:
            raise DomainError("log of a non-positive number")
        return np.log(x)

    x, rep = newton_solve(scalar(f, lambda x: 1.0 / x), [3.0], SolverConfig())
    assert x[0] == pytest.approx(1.0, rel=1e-12)
    # first full step lands at 3 - 3 ln 3 < 0
    assert rep.residual_history[1] < rep.residual_history[0]


@given(st.floats(-50.0, 50.0), st.floats(-1.2, 1.2))
def test_newton_residual_history_monotone(x0, a):
    x, rep = newton_solve(scalar(lambda x: np.arctan(x) - a, lambda x: 1.0 / (1.0 + x * x)), [x0],
                          SolverConfig(max_newton=200))
    h = np.array(rep.residual_history)
    assert np.all(np.diff(h) <= 0.0)
    assert x[0] == pytest.approx(np.tan(a), rel=1e-9, abs=1e-12)


def test_newton_failures_raise_with_report():
    with pytest.raises(SolverError) as info:
        newton_solve(scalar(lambda x: x * x + 1.0, lambda x: 2 * x), [0.5], SolverConfig(max_newton=5))
    assert info.value.report.newton_iterations_total >= 1
    with pytest.raises(SolverError, match="did not converge"):
        newton_solve(scalar(lambda x: np.arctan(x) - 1.0, lambda x: 1.0 / (1.0 + x * x)), [50.0],
                     SolverConfig(max_newton=2))


def test_equilibrated_solve_on_badly_scaled_system():
    rng = np.random.default_rng(2)
    n = 12
    A = rng.normal(size=(n, n)) + n * np.eye(n)
    D = np.diag(10.0 ** rng.uniform(-9, 9, n))
    B = D @ A
    x = rng.normal(size=n)
    np.testing.assert_allclose(equilibrated_solve(sp.csr_matrix(B), B @ x), x, rtol=1e-12)


# null space -------------------------------------------------------------------

def test_fix_nullspace_makes_laplacian_regular():
    n = 6
    L = sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1]).tolil()
    L[0, 0] = L[-1, -1] = 1.0
    b = np.arange(n, dtype=float)
    for A in (L.tocsr(), L.toarray()):
        Ar, br, keep = fix_nullspace(A, b, 2)
        dense = Ar.toarray() if sp.issparse(Ar) else Ar
        assert dense.shape == (n - 1, n - 1) and np.linalg.matrix_rank(dense) == n - 1
        assert list(keep) == [0, 1, 3, 4, 5] and list(br) == [0, 1, 3, 4, 5]
    with pytest.raises(IndexError):
        fix_nullspace(L.tocsr(), b, n)


@given(st.integers(0, 2**32 - 1))
def test_shift_mean_invariants(seed):
    ps = load_ps()
    mesh, radial = small_problem(ps, (2, 1, 2), 3)
    disc = Discretization(ps, mesh, radial, 0.5)
    rng = np.random.default_rng(seed)
    state, prev = random_state(disc, rng), random_state(disc, rng)
    state.phi1 += rng.uniform(-3, 3)
    state.phi2 += rng.uniform(-3, 3)
    out = shift_mean(disc, state)
    assert abs(disc.phi1_mean(out.phi1)) <= 1e-12 * np.max(np.abs(state.phi1))
    dm = disc.dm
    verts = np.flatnonzero(dm.phi2_of_vertex >= 0)
    eta = lambda s: s.phi2[dm.phi2_of_vertex[verts]] - s.phi1[verts]
    np.testing.assert_allclose(eta(out), eta(state), rtol=0, atol=1e-14 * max(1.0, np.max(np.abs(state.phi2))))
    ev0 = disc.evaluate(state, prev, 1.0)
    r0, r1 = ev0.vector(LIVE), disc.evaluate(out, prev, 1.0, jacobian=False).vector(LIVE)
    scale = abs(ev0.jacobian) @ np.abs(state.pack(dm))
    assert np.max(np.abs(r1 - r0) / scale) <= 1e-12


# solver kinds -----------------------------------------------------------------

def test_kind_parsing_and_config():
    assert SolverKind.parse("2ds-fc") is SolverKind.TWO_DS_FC
    assert SolverKind.parse("GSN_Macro") is SolverKind.GSN_MACRO
    assert SolverKind.parse("gsn-fd") is SolverKind.GSN_FD
    with pytest.raises(ValueError):
        SolverKind.parse("Jacobi")
    with pytest.raises(ValueError):
        SolverConfig(backtrack=1.0)
    with pytest.raises(ValueError):
        SolverConfig(newton_abs_tol=0.0)
    with pytest.raises(ValueError, match="unknown solver option"):
        SolverConfig.from_mapping({"tolerance": 1e-8})
    assert SolverConfig.from_mapping({"max_outer": 7}).max_outer == 7
    assert SolverConfig().loosest == 1e-10


@pytest.fixture(scope="module")
def one_step():
    ps = load_parameters(CONFIGS / "bench.toml")
    mesh, radial = grids_from_config(ps)
    disc = Discretization(ps, mesh, radial, 0.1)
    cfg = SolverConfig()
    s0 = initialize_state(ps, mesh, radial, cfg)
    return disc, cfg, s0, {k: solve_step(k, disc, s0, 0.1, cfg) for k in SolverKind}


def test_two_ds_fc_converges_to_rounding(one_step):
    disc, cfg, s0, out = one_step
    state, rep = out[SolverKind.TWO_DS_FC]
    ev = disc.evaluate(state, s0, 0.1)
    F = ev.vector(LIVE)
    scale = abs(ev.jacobian) @ np.abs(state.pack(disc.dm))
    assert np.max(np.abs(F) / scale) <= 1e-13
    assert rep.outer_iterations == 1 and rep.converged
    assert np.all(np.diff(rep.residual_history) <= 0.0)


def test_matrix_orders(one_step):
    disc, _, _, out = one_step
    dm = disc.dm
    macro = 2 * dm.nv + dm.nv2
    # the pinned phi2 row and column are deleted
    assert out[SolverKind.TWO_DS_FC][1].peak_matrix_order == macro - 1
    assert out[SolverKind.GSN_FC][1].peak_matrix_order == dm.n_full - 1
    assert dm.n_full - dm.n_reduced == dm.interior_counts
    assert out[SolverKind.GSN_FC][1].outer_iterations == 1


def test_eta_variants_identical(one_step):
    disc, _, _, out = one_step
    a, ra = out[SolverKind.TWO_DS_ETA]
    b, rb = out[SolverKind.ONE_DS_ETA]
    assert ra.outer_iterations == rb.outer_iterations
    assert ra.newton_iterations_total == rb.newton_iterations_total
    sc = block_scales(disc)
    assert all(v / sc[f] <= 1e-10 for f, v in a.max_abs_diff(b).items())


def test_all_kinds_share_the_fixed_point(one_step):
    disc, cfg, _, out = one_step
    sc = block_scales(disc)
    ref = out[SolverKind.TWO_DS_FC][0]
    for kind, (state, rep) in out.items():
        diff = state.max_abs_diff(ref)
        assert all(v / sc[f] <= 10 * cfg.loosest for f, v in diff.items()), (kind, diff)
        assert abs(disc.phi1_mean(state.phi1)) <= 1e-12


def test_gauss_seidel_outer_counts(one_step):
    _, _, _, out = one_step
    outer = {k: r.outer_iterations for k, (_, r) in out.items()}
    assert outer[SolverKind.GSN_FD] == max(outer.values())
    assert outer[SolverKind.TWO_DS_ETA] < min(outer[SolverKind.GSN_PHI], outer[SolverKind.GSN_MACRO])


def test_outer_loop_limit_reported(one_step):
    disc, _, s0, _ = one_step
    with pytest.raises(SolverError, match="outer loop") as info:
        solve_step(SolverKind.GSN_FD, disc, s0, 0.1, SolverConfig(max_outer=2))
    assert info.value.report.outer_iterations == 2 and not info.value.report.converged


def test_equilibrium_is_a_fixed_point():
    ps = load_parameters(CONFIGS / "bench.toml", {"operating.current": 0.0})
    mesh, radial = small_problem(ps, (2, 1, 2), 4)
    disc = Discretization(ps, mesh, radial, 0.5)
    state = disc.initial_state()
    for tag in ELECTRODES:
        verts = np.unique(mesh.elements[mesh.tags == int(tag)])
        state.phi2[disc.dm.phi2_of_vertex[verts]] = float(ocp_pair(ps, tag, ps.electrode(tag).c2_0)[0])
    state = shift_mean(disc, state)
    sc = block_scales(disc)
    for kind in SolverKind:
        new, _ = solve_step(kind, disc, state, 0.5, SolverConfig())
        diff = new.max_abs_diff(state)
        assert all(v <= 1e-12 * sc[f] for f, v in diff.items()), (kind, diff)

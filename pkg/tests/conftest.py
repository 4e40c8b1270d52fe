from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dfnfem.assembly import DiscreteState, Discretization
from dfnfem.mesh import build_laminate, build_radial
from dfnfem.params import ELECTRODES, load_parameters, ocp_pair

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
BASE_CONFIG = CONFIGS / "marquis2019_1c.toml"

settings.register_profile(
    "default", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def load_ps(**overrides):
    return load_parameters(BASE_CONFIG, overrides)


@pytest.fixture(scope="session")
def ps():
    return load_ps()


def small_problem(ps, counts=(1, 1, 1), radial=4, height=None, ny=None):
    mesh = build_laminate(ps.thicknesses(), list(counts), height, ny)
    rad = {t: build_radial(ps, t, radial) for t in ELECTRODES}
    return mesh, rad


def random_state(disc: Discretization, rng: np.random.Generator, eta_spread: float = 0.05) -> DiscreteState:
    """Admissible state with concentrations well inside their bounds and
    overpotentials of order ``eta_spread``."""
    ps, dm, mesh = disc.ps, disc.dm, disc.mesh
    c1_0 = max(ps.region(t).c1_0 for t in ps.regions)
    c1 = c1_0 * (1.0 + 0.3 * rng.uniform(-1, 1, dm.nv))
    phi1 = 0.02 * rng.uniform(-1, 1, dm.nv)
    c2 = {}
    for tag in ELECTRODES:
        cmax = ps.electrode(tag).c2max
        c2[tag] = cmax * rng.uniform(0.3, 0.7, (dm.rows_of[tag].size, dm.n_radial[tag]))
    phi2 = np.zeros(dm.nv2)
    for tag in ELECTRODES:
        verts = np.unique(mesh.elements[mesh.tags == int(tag)])
        u, _ = ocp_pair(ps, tag, ps.electrode(tag).c2_0)
        phi2[dm.phi2_of_vertex[verts]] = float(u) + phi1[verts] + eta_spread * rng.uniform(-1, 1, verts.size)
    return DiscreteState(c1, phi1, phi2, c2)


def perturbed(state: DiscreteState, rng, rel: float = 1e-3) -> DiscreteState:
    out = state.copy()
    out.c1 *= 1.0 + rel * rng.uniform(-1, 1, out.c1.size)
    for t in out.c2:
        out.c2[t] *= 1.0 + rel * rng.uniform(-1, 1, out.c2[t].shape)
    return out


# acceptance summary ---------------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

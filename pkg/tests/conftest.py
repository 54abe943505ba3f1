import pytest

from boltzlayer.collision import assemble_linearized, build_quadrature
from boltzlayer.velocity_grid import EquilibriumState, build_grid, build_null_basis, default_cutoff

# one line per acceptance criterion, filled by tests/test_acceptance.py
CRITERIA = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def state():
    return EquilibriumState(1.0, (-2.0, 0.0, 0.0), 0.6)


@pytest.fixture(scope="session")
def grid8(state):
    return build_grid(8, default_cutoff(state.T_inf, state.u))


@pytest.fixture(scope="session")
def quad8(state, grid8):
    return build_quadrature(state, grid8)


@pytest.fixture(scope="session")
def op8(state, grid8, quad8):
    return assemble_linearized(state, grid8, quad8)


@pytest.fixture(scope="session")
def grid6(state):
    return build_grid(6, default_cutoff(state.T_inf, state.u))


@pytest.fixture(scope="session")
def quad6(state, grid6):
    return build_quadrature(state, grid6)


@pytest.fixture(scope="session")
def op6(state, grid6, quad6):
    return assemble_linearized(state, grid6, quad6)


# dynamics setup: sigma0 = 0.2 balances the two sides of the nu0 bound
@pytest.fixture(scope="session")
def dstate():
    return EquilibriumState(1.0, (-2.0, 0.0, 0.0), 0.6, 0.2)


@pytest.fixture(scope="session")
def dgrid(dstate):
    return build_grid(6, default_cutoff(dstate.T_inf, dstate.u))


@pytest.fixture(scope="session")
def dquad(dstate, dgrid):
    q = build_quadrature(dstate, dgrid)
    q.gamma_tensor()
    return q


@pytest.fixture(scope="session")
def dop(dstate, dgrid, dquad):
    return assemble_linearized(dstate, dgrid, dquad)


@pytest.fixture(scope="session")
def dsigma(dop, dgrid):
    from boltzlayer.spatial import default_sigma

    return default_sigma(dop.nu, dgrid)


@pytest.fixture(scope="session")
def dsgrid(dsigma):
    from boltzlayer.spatial import build_spatial_grid

    return build_spatial_grid(40, 10.0 / dsigma, ratio=1.12, sigma=dsigma)

import itertools

import numpy as np
import pytest

from idyn.contact_geometry import closest_sphere_halfspace, build_wrenches
from idyn.harness import make_scenario
from idyn.multibody import FreeBody, PointMass, assemble_dynamics, box_inertia


def brute_force_lcp(Q, r, tol=1e-10):
    """Every solution of w = Qz + r, z, w >= 0, z'w = 0 found by basis enumeration."""
    Q, r = np.asarray(Q, float), np.asarray(r, float)
    n = r.size
    out = []
    for k in range(n + 1):
        for sup in itertools.combinations(range(n), k):
            sup = list(sup)
            z = np.zeros(n)
            if sup:
                try:
                    z[sup] = np.linalg.solve(Q[np.ix_(sup, sup)], -r[sup])
                except np.linalg.LinAlgError:
                    continue
            w = Q @ z + r
            if z.min() >= -tol and w.min() >= -tol:
                out.append((z, w))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def box_scenario():
    return make_scenario("resting_box")


@pytest.fixture
def box_state(box_scenario):
    return assemble_dynamics(box_scenario.mechanism)


@pytest.fixture
def box_contacts(box_scenario, box_state):
    return box_scenario.contacts(box_state, float("inf"))


def ball_on_plane(mass=1.0, radius=0.05, height=None, v=(0.0, 0.0, 0.0), mu=float("inf"), actuated=()):
    mech = PointMass(mass, radius, actuated=actuated)
    z = radius if height is None else height
    state = assemble_dynamics(mech, np.array([0.0, 0.0, z]), np.asarray(v, float))
    c = closest_sphere_halfspace(state.q, radius, mu=mu, body=mech.name)
    return state, build_wrenches(state, [c], 4)


def free_box(mass=2.0, actuated=()):
    mech = FreeBody(mass, box_inertia(mass, (0.1, 0.1, 0.1)), actuated=actuated)
    return assemble_dynamics(mech)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)

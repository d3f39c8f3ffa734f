import numpy as np
import pytest

from idyn.contact_geometry import build_wrenches, closest_sphere_halfspace
from idyn.errors import UnsupportedMechanism
from idyn.harness import make_scenario
from idyn.instances import random_contacts, random_state
from idyn.multibody import (
    Mechanism, PlanarChain, PointMass, assemble_dynamics, compliant_normal_force,
    forward_step_compliant, forward_step_rigid, mechanism_from_config,
)

from conftest import ball_on_plane

REST_WEIGHT = 47.0882
G = 9.8


def test_point_mass_dynamics():
    s = assemble_dynamics(PointMass(1.0))
    assert np.array_equal(s.M, np.eye(3)) and np.allclose(s.f_ext, [0, 0, -G])


def test_box_weight():
    s = assemble_dynamics(make_scenario("resting_box").mechanism)
    assert s.mechanism.total_mass == pytest.approx(4.8049)
    assert -s.f_ext[2] == pytest.approx(REST_WEIGHT, rel=1e-4)


def _chain():
    return PlanarChain((0.4, 0.3), (1.0, 0.7), q0=np.array([-1.0, 0.6]))


def test_pendulum_gravity_is_energy_gradient():
    mech = _chain()
    q = mech.default_q()
    s = assemble_dynamics(mech, q)
    eps = 1e-6
    grad = [(mech.potential_energy(q + eps * e) - mech.potential_energy(q - eps * e)) / (2 * eps)
            for e in np.eye(2)]
    assert np.allclose(s.f_ext, -np.asarray(grad), atol=1e-7)


def test_pendulum_velocity_terms_match_lagrangian(rng):
    mech = _chain()
    q, v = mech.default_q(), rng.normal(size=2)
    s = assemble_dynamics(mech, q, v)
    eps = 1e-6
    Mdot = (mech.mass_matrix(q + eps * v) - mech.mass_matrix(q - eps * v)) / (2 * eps)
    dT = np.array([(mech.kinetic_energy(q + eps * e, v) - mech.kinetic_energy(q - eps * e, v)) / (2 * eps)
                   for e in np.eye(2)])
    dV = np.array([(mech.potential_energy(q + eps * e) - mech.potential_energy(q - eps * e)) / (2 * eps)
                   for e in np.eye(2)])
    assert np.allclose(s.f_ext, -(Mdot @ v - dT) - dV, atol=1e-6)


def test_unsupported():
    with pytest.raises(UnsupportedMechanism):
        assemble_dynamics(Mechanism())


def test_mechanism_from_config():
    mech = mechanism_from_config({"family": "point_mass", "mass": 2.0})
    assert assemble_dynamics(mech).M[0, 0] == 2.0


class TestRigid:
    @pytest.mark.parametrize("model, friction", [("complementarity", "pyramid"), ("complementarity", "no_slip"),
                                                 ("complementarity_free", "pyramid"),
                                                 ("complementarity_free", "no_slip")])
    def test_ball_resting(self, model, friction):
        dt = 0.01
        state, cs = ball_on_plane(mu=0.5)
        r = forward_step_rigid(state, cs, None, dt, model=model, friction=friction)
        assert r.f_N[0] == pytest.approx(G * dt, rel=1e-9)
        assert abs(r.v_plus[2]) < 1e-12

    def test_ballistic(self):
        state, _ = ball_on_plane(height=1.0, v=(1.0, 0.0, 0.5), mu=0.5)
        c = closest_sphere_halfspace(state.q, 0.05, mu=0.5, body="mass")
        cs = build_wrenches(state, [c], 4)
        r = forward_step_rigid(state, cs, None, 0.01)
        assert np.array_equal(r.f_N, [0.0]) and np.allclose(r.v_plus, [1.0, 0.0, 0.5 - G * 0.01])

    def test_inelastic_drop(self):
        state, cs = ball_on_plane(v=(0.0, 0.0, -1.0), mu=0.5)
        r = forward_step_rigid(state, cs, None, 0.01, model="complementarity_free")
        assert abs(r.v_plus[2]) < 1e-10
        assert r.f_N[0] == pytest.approx(1.0 + G * 0.01)

    def test_bad_dt(self):
        state, cs = ball_on_plane()
        with pytest.raises(ValueError):
            forward_step_rigid(state, cs, None, 0.0)


@pytest.mark.parametrize("model, friction", [("complementarity", "pyramid"), ("complementarity", "no_slip"),
                                             ("complementarity_free", "pyramid"),
                                             ("complementarity_free", "no_slip")])
def test_newton_residual_and_cone(model, friction):
    rng = np.random.default_rng(7)
    dt = 1e-3
    for _ in range(25):
        s = random_state(rng)
        cs = random_contacts(rng, s, int(rng.integers(1, 5)))
        tau = rng.normal(size=s.nq)
        r = forward_step_rigid(s, cs, tau, dt, model=model, friction=friction)
        lhs = s.M @ (r.v_plus - s.v)
        rhs = dt * (s.f_ext + s.P.T @ tau) + cs.N.T @ r.f_N + cs.S.T @ r.f_S + cs.T.T @ r.f_T
        assert np.allclose(lhs, rhs, atol=1e-8 * (1 + np.abs(rhs).max()))
        assert np.all(r.f_N >= -1e-10)
        # non-penetration at the end of the step
        assert np.all(cs.N @ r.v_plus + cs.phi / dt >= -1e-7)
        if friction == "pyramid":
            slack = cs.mu * r.f_N - np.maximum(np.abs(r.f_S), np.abs(r.f_T))
            assert np.all(slack >= -1e-8)


class TestCompliant:
    def test_rest_force(self):
        k = 47088.2
        assert compliant_normal_force(-0.001, 0.0, k, 0.0) == pytest.approx(REST_WEIGHT)
        state, _ = ball_on_plane(mass=4.8049, height=0.05 - 0.001, mu=0.5)
        c = closest_sphere_halfspace(state.q, 0.05, mu=0.5, body="mass")
        r = forward_step_compliant(state, build_wrenches(state, [c]), None, 1e-3, k, 0.0)
        assert r.f_N[0] / 1e-3 == pytest.approx(REST_WEIGHT)
        # weight and spring cancel at this depth
        assert abs(r.v_plus[2]) < 1e-5

    def test_zero_penetration(self):
        assert compliant_normal_force(0.0, 0.0, 1e5, 100.0) == 0.0
        assert compliant_normal_force(0.01, -1.0, 1e5, 100.0) == 0.0

    def test_pure_damping(self):
        assert compliant_normal_force(0.0, -1.0, 0.0, 10.0) == pytest.approx(10.0)
        state, cs = ball_on_plane(v=(0.0, 0.0, -1.0), mu=0.5)
        r = forward_step_compliant(state, cs, None, 1e-3, 0.0, 10.0)
        assert r.f_N[0] / 1e-3 == pytest.approx(10.0)

    def test_friction_clamp_never_reverses_slip(self):
        state, cs = ball_on_plane(mass=0.05, height=0.049, v=(0.3, 0.0, 0.0), mu=1.0)
        r = forward_step_compliant(state, cs, None, 1e-3, 1e5, 500.0)
        assert 0.0 <= r.v_plus[0] < 0.3

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from idyn.contact_geometry import (
    ContactPoint, build_wrenches, closest_sphere_halfspace, closest_sphere_sphere, contact_frame,
)
from idyn.errors import CoincidentCenters, UnknownBody, ZeroNormal
from idyn.multibody import FreeBody, assemble_dynamics, box_inertia

from conftest import free_box


def test_frame_canonical():
    s, t = contact_frame([0, 0, 1.0])
    assert np.array_equal(s, [1, 0, 0]) and np.array_equal(t, [0, 1, 0])


def test_frame_down():
    n = np.array([0, 0, -1.0])
    s, t = contact_frame(n)
    assert abs(s @ n) < 1e-15 and np.allclose(t, np.cross(n, s))


@settings(max_examples=100, deadline=None)
@given(st.tuples(*[st.floats(-1, 1)] * 3).filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_frame_right_handed(v):
    n = np.asarray(v) / np.linalg.norm(v)
    s, t = contact_frame(n)
    R = np.column_stack([s, t, n])
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)


def test_frame_rejects_bad_normals():
    with pytest.raises(ZeroNormal):
        contact_frame([0, 0, 0])
    with pytest.raises(ZeroNormal):
        contact_frame([0, 0, 2.0])


@pytest.mark.parametrize("z, gap, pz", [(0.5, 0.0, 0.0), (0.6, 0.1, 0.05), (0.4, -0.1, -0.05)])
def test_sphere_halfspace(z, gap, pz):
    c = closest_sphere_halfspace([0, 0, z], 0.5)
    assert c.gap == pytest.approx(gap) and np.allclose(c.point, [0, 0, pz])
    assert np.array_equal(c.normal, [0, 0, 1])


def test_sphere_sphere():
    c = closest_sphere_sphere([0, 0, 0], 1, [3, 0, 0], 1)
    assert c.gap == pytest.approx(1) and np.allclose(c.normal, [1, 0, 0]) and np.allclose(c.point, [1.5, 0, 0])
    assert closest_sphere_sphere([0, 0, 0], 1, [0, 2, 0], 1).gap == pytest.approx(0, abs=1e-15)
    with pytest.raises(CoincidentCenters):
        closest_sphere_sphere([1, 1, 1], 1, [1, 1, 1], 2)


def test_sphere_sphere_sampling_oracle(rng):
    dirs = rng.normal(size=(200000, 3))
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    for _ in range(5):
        c1, c2 = rng.normal(size=3), rng.normal(size=3) * 3
        r1, r2 = rng.uniform(0.2, 0.8, 2)
        if np.linalg.norm(c2 - c1) < r1 + r2 + 0.1:
            continue
        got = closest_sphere_sphere(c1, r1, c2, r2).gap
        # nearest sample pairs: surface points closest to the other center
        p1 = c1 + r1 * dirs
        p2 = c2 + r2 * dirs
        d1 = np.linalg.norm(p1 - c2, axis=1) - r2
        d2 = np.linalg.norm(p2 - c1, axis=1) - r1
        assert got == pytest.approx(min(d1.min(), d2.min()), abs=1e-3)


def _cp(point, normal=(0, 0, 1.0), body="box"):
    s, t = contact_frame(normal)
    return ContactPoint(np.asarray(point, float), np.asarray(normal, float), s, t, 0.0, 0.5, "world", body)


def test_wrench_at_com():
    cs = build_wrenches(free_box(), [_cp([0, 0, 0])])
    assert np.allclose(cs.N[0], [0, 0, 1, 0, 0, 0])


def test_wrench_with_offset_matches_finite_difference():
    state = free_box()
    cs = build_wrenches(state, [_cp([1.0, 0, 0])])
    assert np.allclose(cs.N[0], [0, 0, 1, 0, -1, 0])
    # gap rate of a body-fixed point along each generalized velocity
    mech = state.mechanism
    eps = 1e-7
    fd = []
    for j in range(6):
        v = np.zeros(6)
        v[j] = 1.0
        q1 = mech.integrate(state.q, v, eps)
        p1 = mech.rotation(q1) @ np.array([1.0, 0, 0]) + q1[:3]
        fd.append((p1[2] - 0.0) / eps)
    assert np.allclose(cs.N[0], fd, atol=1e-6)


def test_world_only_contact_has_zero_rows():
    state = free_box()
    cs = build_wrenches(state, [_cp([0, 0, 0], body="world")])
    assert not np.any(cs.N) and not np.any(cs.S) and not np.any(cs.T)


def test_unknown_body():
    with pytest.raises(UnknownBody):
        build_wrenches(free_box(), [_cp([0, 0, 0], body="ghost")])


def test_pyramid_blocks(rng):
    state = free_box()
    cps = [_cp(rng.normal(size=3) * 0.1, n / np.linalg.norm(n)) for n in rng.normal(size=(3, 3))]
    cs = build_wrenches(state, cps, 4)
    n = cs.n
    assert np.allclose(cs.F, np.vstack([cs.S, -cs.S, cs.T, -cs.T]), atol=1e-15)
    # E sums the k edge multipliers of each contact
    assert cs.E.shape == (n, 4 * n)
    assert np.array_equal(cs.E @ np.ones(4 * n), 4 * np.ones(n))
    for j in range(4):
        assert cs.E[1, j * n + 1] == 1


def test_odd_pyramid_rejected():
    with pytest.raises(ValueError):
        build_wrenches(free_box(), [_cp([0, 0, 0])], k=3)

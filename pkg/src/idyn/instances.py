"""Random mechanisms, contact sets and requests for property checks."""
from __future__ import annotations

import numpy as np
from scipy.spatial.transform import Rotation

from .contact_geometry import WORLD, _make_point, build_wrenches
from .multibody import (
    FreeBody,
    LeggedBody,
    PlanarChain,
    PointMass,
    assemble_dynamics,
    box_inertia,
    forward_step_rigid,
)

HIPS = [(sx * 0.15, sy * 0.08, -0.05) for sx in (1, -1) for sy in (1, -1)]


def random_mechanism(rng, family=None):
    family = family or rng.choice(["point_mass", "free_body", "legged_body", "planar_chain"])
    if family == "point_mass":
        act = rng.choice(3, size=int(rng.integers(1, 4)), replace=False)
        return PointMass(rng.uniform(0.5, 2.0), actuated=act)
    if family == "free_body":
        mass = rng.uniform(0.5, 3.0)
        act = rng.choice(6, size=int(rng.integers(1, 4)), replace=False)
        return FreeBody(mass, box_inertia(mass, rng.uniform(0.05, 0.2, 3)), actuated=act)
    if family == "legged_body":
        mass = rng.uniform(1.0, 5.0)
        return LeggedBody(mass, box_inertia(mass, (0.2, 0.1, 0.05)), HIPS,
                          q0=np.r_[0, 0, 0.17, 0, 0, 0, 1, 0, 0, 0, 0])
    if family == "planar_chain":
        nl = int(rng.integers(1, 4))
        q0 = np.r_[0.0, 0.5, rng.uniform(-0.5, 0.5), rng.uniform(-1.5, 1.5, nl)]
        return PlanarChain(rng.uniform(0.2, 0.4, nl), rng.uniform(0.5, 1.5, nl), floating=True, q0=q0)
    raise ValueError(family)


def random_state(rng, mech=None, speed=0.5):
    mech = mech or random_mechanism(rng)
    q = mech.default_q()
    if isinstance(mech, FreeBody):
        q[3:7] = Rotation.from_rotvec(rng.normal(size=3) * 0.3).as_quat()
    return assemble_dynamics(mech, q, rng.normal(size=mech.dof) * speed)


def random_contacts(rng, state, n, mu=(0.1, 1.0), k=4, duplicate=0):
    """n contacts at random points of random bodies against the world.

    Gaps are small and nonnegative, so every contact model is feasible.
    The last `duplicate` contacts copy earlier ones exactly.
    """
    names = state.body_names
    pts = []
    for i in range(n - duplicate):
        nrm = rng.normal(size=3)
        nrm /= np.linalg.norm(nrm)
        m = np.inf if mu is None else rng.uniform(*mu)
        body = names[int(rng.integers(len(names)))]
        pts.append(_make_point(state.mechanism.link(body, state.q).com + rng.normal(size=3) * 0.1,
                               nrm, rng.uniform(0.0, 2e-3), m, WORLD, body))
    for i in range(duplicate):
        pts.append(pts[int(rng.integers(len(pts)))])
    return build_wrenches(state, pts, k)


def consistent_qdot(rng, state, cs, dt, model, friction, scale=1.0):
    """Desired actuated velocity produced by a random torque under the given model."""
    tau = rng.normal(size=state.nq) * scale * max(1.0, np.abs(state.f_ext).max())
    step = forward_step_rigid(state, cs, tau, dt, model=model, friction=friction)
    return state.P @ step.v_plus, tau

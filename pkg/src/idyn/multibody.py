"""Small rigid-body mechanisms, their dynamics, and a time-stepping simulator.

Generalized velocities of a free body are [linear velocity of the center of
mass; angular velocity], both in world coordinates.  Planar chains move in
the x-z plane with gravity along -z.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .contact_geometry import ContactSet, closest_sphere_halfspace, closest_sphere_sphere
from .errors import ConfigError, SolverFailure, UnsupportedMechanism
from .lcp_core import Lcp, RayTermination, MaxPivotsExceeded, SpdFactor, solve_lemke

GRAVITY = np.array([0.0, 0.0, -9.8])
_NEG_Y = np.array([0.0, -1.0, 0.0])


def skew(r):
    x, y, z = r
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass
class LinkKinematics:
    name: str
    mass: float
    inertia: np.ndarray  # world frame, about the center of mass
    com: np.ndarray
    Jv: np.ndarray       # 3 x dof, center-of-mass velocity
    Jw: np.ndarray       # 3 x dof, angular velocity


@dataclass
class Sphere:
    body: str
    center: np.ndarray
    radius: float


class Mechanism:
    """Base class: subclasses provide link kinematics and integration."""

    family = "abstract"
    dof = 0
    gravity = GRAVITY

    def __init__(self, actuated=None):
        self._actuated = list(range(self.dof)) if actuated is None else sorted(int(i) for i in actuated)

    # subclass interface
    def links(self, q) -> list[LinkKinematics]:
        raise NotImplementedError

    def spheres(self, q) -> list[Sphere]:
        return []

    def integrate(self, q, v, dt):
        return np.asarray(q, dtype=float) + dt * np.asarray(v, dtype=float)

    def default_q(self):
        raise NotImplementedError

    # derived quantities
    @property
    def actuated(self):
        return list(self._actuated)

    @property
    def nq(self) -> int:
        return len(self._actuated)

    @property
    def P(self):
        P = np.zeros((self.nq, self.dof))
        P[np.arange(self.nq), self._actuated] = 1.0
        return P

    @property
    def base_dofs(self):
        act = set(self._actuated)
        return [i for i in range(self.dof) if i not in act]

    @property
    def body_names(self):
        return [lk.name for lk in self.links(self.default_q())]

    @property
    def total_mass(self) -> float:
        return float(sum(lk.mass for lk in self.links(self.default_q())))

    def link(self, name, q):
        for lk in self.links(q):
            if lk.name == name:
                return lk
        raise KeyError(name)

    def point_jacobian(self, body, point, q):
        lk = self.link(body, q)
        return lk.Jv - skew(np.asarray(point, dtype=float) - lk.com) @ lk.Jw

    def mass_matrix(self, q):
        M = np.zeros((self.dof, self.dof))
        for lk in self.links(q):
            M += lk.mass * lk.Jv.T @ lk.Jv + lk.Jw.T @ lk.inertia @ lk.Jw
        return 0.5 * (M + M.T)

    def external_force(self, q, v, eps=1e-6):
        """Gravity minus velocity-product terms.

        Jacobian rates are central differences of J along the motion q(t) with
        velocity v, so the expression holds for any coordinate choice.
        """
        v = np.asarray(v, dtype=float)
        f = np.zeros(self.dof)
        now = self.links(q)
        moving = np.any(v != 0.0)
        if moving:
            fwd = self.links(self.integrate(q, v, eps))
            bwd = self.links(self.integrate(q, v, -eps))
        for i, lk in enumerate(now):
            f += lk.Jv.T @ (lk.mass * self.gravity)
            if not moving:
                continue
            dJv = (fwd[i].Jv - bwd[i].Jv) @ v / (2 * eps)
            dJw = (fwd[i].Jw - bwd[i].Jw) @ v / (2 * eps)
            w = lk.Jw @ v
            f -= lk.mass * lk.Jv.T @ dJv
            f -= lk.Jw.T @ (lk.inertia @ dJw + np.cross(w, lk.inertia @ w))
        return f

    def kinetic_energy(self, q, v):
        return 0.5 * v @ self.mass_matrix(q) @ v

    def coord_of(self, dof: int) -> int:
        """Index into q of the coordinate whose rate is velocity component `dof`."""
        return int(dof)

    def actuated_q(self, q):
        return np.asarray(q, dtype=float)[[self.coord_of(i) for i in self._actuated]]

    def potential_energy(self, q):
        return float(-sum(lk.mass * (self.gravity @ lk.com) for lk in self.links(q)))


# ------------------------------------------------------------------ families

class PointMass(Mechanism):
    family = "point_mass"
    dof = 3

    def __init__(self, mass=1.0, radius=0.05, actuated=None, name="mass", q0=(0.0, 0.0, 0.05)):
        self.mass = float(mass)
        self.radius = float(radius)
        self.name = name
        self.q0 = np.asarray(q0, dtype=float)
        super().__init__(actuated)

    def default_q(self):
        return self.q0.copy()

    def links(self, q):
        return [LinkKinematics(self.name, self.mass, np.zeros((3, 3)), np.asarray(q[:3], dtype=float),
                               np.eye(3), np.zeros((3, 3)))]

    def spheres(self, q):
        return [Sphere(self.name, np.asarray(q[:3], dtype=float), self.radius)]


def box_inertia(mass, half_extents):
    a, b, c = (2 * np.asarray(half_extents, dtype=float)) ** 2
    return mass / 12.0 * np.diag([b + c, a + c, a + b])


class FreeBody(Mechanism):
    """Six-DoF body; q = [position, quaternion (x, y, z, w)]."""

    family = "free_body"
    dof = 6

    def __init__(self, mass, inertia, spheres=(), actuated=(), name="box", q0=None):
        self.mass = float(mass)
        self.inertia_body = np.asarray(inertia, dtype=float).reshape(3, 3)
        self.local_spheres = [(np.asarray(c, dtype=float), float(r)) for c, r in spheres]
        self.name = name
        self.q0 = np.array([0, 0, 0, 0, 0, 0, 1.0]) if q0 is None else np.asarray(q0, dtype=float)
        super().__init__(actuated)

    def default_q(self):
        return self.q0.copy()

    def rotation(self, q):
        return Rotation.from_quat(q[3:7]).as_matrix()

    def coord_of(self, dof):
        if dof < 3:
            return int(dof)
        if dof >= 6:
            return int(dof) + 1
        raise UnsupportedMechanism("rotational velocities have no scalar coordinate")

    def links(self, q):
        R = self.rotation(q)
        Jv = np.hstack([np.eye(3), np.zeros((3, 3))])
        Jw = np.hstack([np.zeros((3, 3)), np.eye(3)])
        return [LinkKinematics(self.name, self.mass, R @ self.inertia_body @ R.T,
                               np.asarray(q[:3], dtype=float), Jv, Jw)]

    def spheres(self, q):
        R = self.rotation(q)
        return [Sphere(self.name, q[:3] + R @ c, r) for c, r in self.local_spheres]

    def integrate(self, q, v, dt):
        q = np.asarray(q, dtype=float)
        out = np.empty(7)
        out[:3] = q[:3] + dt * v[:3]
        rot = Rotation.from_rotvec(dt * np.asarray(v[3:6], dtype=float)) * Rotation.from_quat(q[3:7])
        out[3:7] = rot.as_quat()
        return out


class LeggedBody(FreeBody):
    """Free body carrying prismatic legs that extend along body -z.

    Each leg ends in a spherical foot of small mass.  q = [pose (7), leg
    extensions]; only the leg joints are actuated by default.
    """

    family = "legged_body"

    def __init__(self, mass, inertia, hips, foot_mass=0.05, foot_radius=0.02, rest_length=0.1,
                 name="box", q0=None, actuated=None):
        self.hips = [np.asarray(h, dtype=float) for h in hips]
        self.foot_mass = float(foot_mass)
        self.foot_radius = float(foot_radius)
        self.rest_length = float(rest_length)
        self.dof = 6 + len(self.hips)
        if q0 is None:
            q0 = np.concatenate([[0, 0, 0, 0, 0, 0, 1.0], np.zeros(len(self.hips))])
        if actuated is None:
            actuated = range(6, self.dof)
        super().__init__(mass, inertia, (), actuated, name, q0)

    def links(self, q):
        base = super().links(q)[0]
        base.Jv = np.hstack([base.Jv, np.zeros((3, len(self.hips)))])
        base.Jw = np.hstack([base.Jw, np.zeros((3, len(self.hips)))])
        R = self.rotation(q)
        out = [base]
        down = -R[:, 2]
        for i, h in enumerate(self.hips):
            foot = q[:3] + R @ h + (self.rest_length + q[7 + i]) * down
            Jv = np.zeros((3, self.dof))
            Jv[:, :3] = np.eye(3)
            Jv[:, 3:6] = -skew(foot - q[:3])
            Jv[:, 6 + i] = down
            out.append(LinkKinematics(f"foot{i}", self.foot_mass, np.zeros((3, 3)), foot, Jv,
                                      np.zeros((3, self.dof))))
        return out

    def spheres(self, q):
        return [Sphere(lk.name, lk.com, self.foot_radius) for lk in self.links(q)[1:]]

    def integrate(self, q, v, dt):
        out = np.empty(self.dof + 1)
        out[:7] = super().integrate(q[:7], v[:6], dt)
        out[7:] = q[7:] + dt * v[6:]
        return out


class PlanarChain(Mechanism):
    """Serial chain of revolute joints about -y moving in the x-z plane.

    With a floating base the first three coordinates are (x, z, pitch) of a
    base body; otherwise the chain hangs from a fixed anchor.  Link angles are
    measured from +x toward +z.
    """

    family = "planar_chain"

    def __init__(self, lengths, masses, floating=False, base_mass=1.0, base_inertia=0.01,
                 anchor=(0.0, 0.0, 0.0), tip_radius=0.02, base_radius=None, name="arm",
                 q0=None, actuated=None):
        if not 1 <= len(lengths) <= 3 or len(lengths) != len(masses):
            raise UnsupportedMechanism("planar chains have 1 to 3 links")
        self.lengths = [float(x) for x in lengths]
        self.masses = [float(x) for x in masses]
        self.floating = bool(floating)
        self.base_mass = float(base_mass)
        self.base_inertia = float(base_inertia)
        self.anchor = np.asarray(anchor, dtype=float)
        self.tip_radius = float(tip_radius)
        self.base_radius = base_radius
        self.name = name
        self.nb = 3 if self.floating else 0
        self.dof = self.nb + len(self.lengths)
        self.q0 = np.zeros(self.dof) if q0 is None else np.asarray(q0, dtype=float)
        if actuated is None:
            actuated = range(self.nb, self.dof)
        super().__init__(actuated)

    def default_q(self):
        return self.q0.copy()

    @staticmethod
    def _rot(phi):
        c, s = np.cos(phi), np.sin(phi)
        # maps body x to (cos phi, 0, sin phi)
        return np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])

    def _frames(self, q):
        """Joint origins, absolute link angles and angle-coordinate indices."""
        q = np.asarray(q, dtype=float)
        if self.floating:
            origin = np.array([q[0], 0.0, q[1]])
            phi = q[2]
            angle_idx = [2]
        else:
            origin = self.anchor.copy()
            phi = 0.0
            angle_idx = []
        joints, angles, idxs = [], [], []
        for i, ell in enumerate(self.lengths):
            phi = phi + q[self.nb + i]
            angle_idx = angle_idx + [self.nb + i]
            joints.append(origin.copy())
            angles.append(phi)
            idxs.append(list(angle_idx))
            origin = origin + ell * np.array([np.cos(phi), 0.0, np.sin(phi)])
        return joints, angles, idxs, origin

    def _jac(self, point, joint_pos, idx):
        Jv = np.zeros((3, self.dof))
        Jw = np.zeros((3, self.dof))
        if self.floating:
            Jv[:, 0] = (1.0, 0.0, 0.0)
            Jv[:, 1] = (0.0, 0.0, 1.0)
        for j in idx:
            Jv[:, j] = np.cross(_NEG_Y, point - joint_pos[j])
            Jw[:, j] = _NEG_Y
        return Jv, Jw

    def links(self, q):
        joints, angles, idxs, tip = self._frames(q)
        # pivot of each angle coordinate
        pivots = {}
        if self.floating:
            pivots[2] = np.array([q[0], 0.0, q[1]])
        for i in range(len(self.lengths)):
            pivots[self.nb + i] = joints[i]
        out = []
        if self.floating:
            base = np.array([q[0], 0.0, q[1]])
            Jv, Jw = self._jac(base, pivots, [2])
            I = np.diag([self.base_inertia] * 3)
            out.append(LinkKinematics(f"{self.name}_base", self.base_mass, I, base, Jv, Jw))
        for i, ell in enumerate(self.lengths):
            phi = angles[i]
            com = joints[i] + 0.5 * ell * np.array([np.cos(phi), 0.0, np.sin(phi)])
            Jv, Jw = self._jac(com, pivots, idxs[i])
            R = self._rot(phi)
            m = self.masses[i]
            Ib = np.diag([1e-6 * m, m * ell ** 2 / 12.0, m * ell ** 2 / 12.0])
            out.append(LinkKinematics(f"{self.name}_link{i}", m, R @ Ib @ R.T, com, Jv, Jw))
        return out

    def tip(self, q):
        return self._frames(q)[3]

    def spheres(self, q):
        out = [Sphere(f"{self.name}_link{len(self.lengths) - 1}", self.tip(q), self.tip_radius)]
        if self.floating and self.base_radius:
            out.append(Sphere(f"{self.name}_base", np.array([q[0], 0.0, q[1]]), float(self.base_radius)))
        return out


class Composite(Mechanism):
    """Independent mechanisms stacked block-diagonally."""

    family = "composite"

    def __init__(self, parts):
        self.parts = list(parts)
        self.dof = sum(p.dof for p in self.parts)
        self._qsizes = [p.default_q().size for p in self.parts]
        act, off = [], 0
        for p in self.parts:
            act += [off + i for i in p.actuated]
            off += p.dof
        super().__init__(act)

    def default_q(self):
        return np.concatenate([p.default_q() for p in self.parts])

    def _split(self, x, sizes):
        out, off = [], 0
        for s in sizes:
            out.append(np.asarray(x[off:off + s], dtype=float))
            off += s
        return out

    def links(self, q):
        out, off = [], 0
        for p, qp in zip(self.parts, self._split(q, self._qsizes)):
            for lk in p.links(qp):
                Jv = np.zeros((3, self.dof))
                Jw = np.zeros((3, self.dof))
                Jv[:, off:off + p.dof] = lk.Jv
                Jw[:, off:off + p.dof] = lk.Jw
                out.append(LinkKinematics(lk.name, lk.mass, lk.inertia, lk.com, Jv, Jw))
            off += p.dof
        return out

    def spheres(self, q):
        out = []
        for p, qp in zip(self.parts, self._split(q, self._qsizes)):
            out += p.spheres(qp)
        return out

    def coord_of(self, dof):
        qoff = voff = 0
        for p, qs in zip(self.parts, self._qsizes):
            if dof < voff + p.dof:
                return qoff + p.coord_of(dof - voff)
            qoff += qs
            voff += p.dof
        raise IndexError(dof)

    def integrate(self, q, v, dt):
        parts = [p.integrate(qp, vp, dt) for p, qp, vp in
                 zip(self.parts, self._split(q, self._qsizes), self._split(v, [p.dof for p in self.parts]))]
        return np.concatenate(parts)


# ------------------------------------------------------------------ state

@dataclass
class MultibodyState:
    mechanism: Mechanism
    q: np.ndarray
    v: np.ndarray
    M: np.ndarray
    f_ext: np.ndarray
    P: np.ndarray
    _fac: SpdFactor = field(default=None, repr=False)

    @property
    def dof(self) -> int:
        return self.M.shape[0]

    @property
    def nq(self) -> int:
        return self.P.shape[0]

    @property
    def body_names(self):
        return self.mechanism.body_names

    def point_jacobian(self, body, point, q=None):
        return self.mechanism.point_jacobian(body, point, self.q if q is None else q)

    @property
    def Mfac(self) -> SpdFactor:
        if self._fac is None:
            self._fac = SpdFactor(self.M)
        return self._fac

    def kinetic_energy(self, v=None):
        v = self.v if v is None else v
        return 0.5 * float(v @ self.M @ v)


def assemble_dynamics(mech: Mechanism, q=None, v=None) -> MultibodyState:
    if not isinstance(mech, Mechanism) or mech.family == "abstract":
        raise UnsupportedMechanism(f"unsupported mechanism {type(mech).__name__}")
    q = mech.default_q() if q is None else np.asarray(q, dtype=float)
    v = np.zeros(mech.dof) if v is None else np.asarray(v, dtype=float)
    M = mech.mass_matrix(q)
    return MultibodyState(mech, q, v, M, mech.external_force(q, v), mech.P)


def find_contacts(state: MultibodyState, mu=float("inf"), margin=0.0, ground=True, pairs=()):
    """Sphere/ground and listed sphere/sphere contacts with gap <= margin."""
    sph = state.mechanism.spheres(state.q)
    out = []
    if ground:
        for s in sph:
            c = closest_sphere_halfspace(s.center, s.radius, mu=mu, body=s.body)
            if c.gap <= margin:
                out.append(c)
    by_body = {}
    for s in sph:
        by_body.setdefault(s.body, []).append(s)
    for a, b in pairs:
        for sa in by_body.get(a, []):
            for sb in by_body.get(b, []):
                c = closest_sphere_sphere(sa.center, sa.radius, sb.center, sb.radius, mu=mu, body1=a, body2=b)
                if c.gap <= margin:
                    out.append(c)
    return out


# ------------------------------------------------------------------ stepping

@dataclass
class StepResult:
    v_plus: np.ndarray
    f_N: np.ndarray
    f_S: np.ndarray
    f_T: np.ndarray
    f_F: np.ndarray = None
    contact_events: list = field(default_factory=list)
    pivots: int = 0

    @property
    def applied_contact_impulses(self):
        return np.column_stack([self.f_N, self.f_S, self.f_T]) if self.f_N.size else np.zeros((0, 3))


def _free_velocity(state, tau, dt):
    tau = np.zeros(state.nq) if tau is None or np.size(tau) == 0 else np.asarray(tau, dtype=float)
    rhs = state.M @ state.v + dt * (state.f_ext + state.P.T @ tau)
    return state.Mfac.solve(rhs)


def _tangential_from_pyramid(cs: ContactSet, fF):
    """Project k-direction pyramid impulses onto the (s, t) frame."""
    n, k = cs.n, cs.k
    fS = np.zeros(n)
    fT = np.zeros(n)
    for j in range(k // 2):
        ang = np.pi * j / (k // 2)
        d = fF[2 * j * n:(2 * j + 1) * n] - fF[(2 * j + 1) * n:(2 * j + 2) * n]
        fS += np.cos(ang) * d
        fT += np.sin(ang) * d
    return fS, fT


def coulomb_lcp(Yfun, cs: ContactSet, v0, dt):
    """The friction-pyramid LCP in (f_N, f_F, lambda) for v+ = v0 + Y (N'f_N + F'f_F).

    Yfun(B) applies the (possibly constrained) inverse inertia to the columns of B.
    Contacts with infinite friction use a large finite coefficient.
    """
    n, k = cs.n, cs.k
    R = np.vstack([cs.N, cs.F])
    YR = Yfun(R.T)
    G = R @ YR
    G = 0.5 * (G + G.T)
    mu = np.where(np.isfinite(cs.mu), cs.mu, 1e6)
    Q = np.zeros(((k + 2) * n, (k + 2) * n))
    Q[:(k + 1) * n, :(k + 1) * n] = G
    Q[n:(k + 1) * n, (k + 1) * n:] = cs.E.T
    Q[(k + 1) * n:, :n] = np.diag(mu)
    Q[(k + 1) * n:, n:(k + 1) * n] = -cs.E
    r = np.concatenate([cs.N @ v0 + cs.phi / dt, cs.F @ v0, np.zeros(n)])
    return Lcp(r, Q), YR


def forward_step_rigid(state: MultibodyState, contacts: ContactSet, tau, dt, model="complementarity",
                       friction="pyramid") -> StepResult:
    """One velocity-level step with rigid contact.

    model "complementarity": pyramid friction LCP (friction="pyramid") or
    sticking contact (friction="no_slip", S v+ = T v+ = 0).
    model "complementarity_free": inelastic maximal-dissipation QP.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    vt = _free_velocity(state, tau, dt)
    n = 0 if contacts is None else contacts.n
    if n == 0:
        z = np.zeros(0)
        return StepResult(vt, z, z, z, z)
    fac = state.Mfac
    if model == "complementarity_free":
        from .convex_qp import Qp, solve_qp
        return _step_qp(state, contacts, vt, dt, friction, Qp, solve_qp)
    if model != "complementarity":
        raise ValueError(f"unknown contact model {model!r}")
    if friction == "no_slip":
        return _step_no_slip(state, contacts, vt, dt, tau)
    lcp, YR = coulomb_lcp(fac.solve, contacts, vt, dt)
    try:
        sol = solve_lemke(lcp)
    except (RayTermination, MaxPivotsExceeded) as e:
        raise SolverFailure(str(e)) from e
    k = contacts.k
    fN = sol.z[:n]
    fF = sol.z[n:(k + 1) * n]
    vp = vt + YR @ sol.z[:(k + 1) * n]
    fS, fT = _tangential_from_pyramid(contacts, fF)
    return StepResult(vp, fN, fS, fT, fF, pivots=sol.pivot_count)


def _step_no_slip(state, cs, vt, dt, tau):
    from .inverse_dynamics import forward_no_slip
    v, fN, fS, fT, piv = forward_no_slip(state, cs, tau, dt)
    return StepResult(v, fN, fS, fT, pivots=piv)


def _step_qp(state, cs, vt, dt, friction, Qp, solve_qp):
    """min 1/2 v'Mv over impulses z with v = vt + M^-1 R'z."""
    n, k = cs.n, cs.k
    from .errors import Infeasible, Unbounded
    if friction == "no_slip":
        R = np.vstack([cs.N, cs.S, cs.T])
        lb = list(range(n))
    else:
        R = np.vstack([cs.N, cs.F])
        lb = list(range((k + 1) * n))
    MR = state.Mfac.solve(R.T)
    H = R @ MR
    c = R @ vt
    # non-penetration  N (vt + M^-1 R'z) >= -phi/dt
    A = [cs.N @ MR]
    b0 = -cs.phi / dt - cs.N @ vt
    b = [b0 - 1e-11 * (1.0 + np.max(np.abs(b0)))]  # round-off room, as in the inverse
    if friction != "no_slip":
        mu = np.where(np.isfinite(cs.mu), cs.mu, 1e6)
        A.append(np.hstack([np.diag(mu), -cs.E]))
        b.append(np.zeros(n))
    try:
        z, _, diag = solve_qp(Qp(0.5 * (H + H.T), c, np.vstack(A), np.concatenate(b), lb))
    except (Infeasible, Unbounded, RayTermination) as e:
        raise SolverFailure(str(e)) from e
    vp = vt + MR @ z
    fN = z[:n]
    if friction == "no_slip":
        fS, fT, fF = z[n:2 * n], z[2 * n:], None
    else:
        fF = z[n:]
        fS, fT = _tangential_from_pyramid(cs, fF)
    return StepResult(vp, fN, fS, fT, fF, pivots=diag.pivots)


def forward_step_compliant(state: MultibodyState, contacts: ContactSet, tau, dt, stiffness, damping,
                           mu_reg_speed=1e-3) -> StepResult:
    """Spring-damper normal force and regularized Coulomb friction, explicit.

    Dissipative impulses are clamped at the value that would stop the
    contact-point motion in one step (per contact, per direction); without
    the clamp stiff friction on light links overshoots and diverges.
    """
    if stiffness < 0 or damping < 0:
        raise ValueError("stiffness and damping must be nonnegative")
    n = 0 if contacts is None else contacts.n
    fN = np.zeros(n)
    fS = np.zeros(n)
    fT = np.zeros(n)
    if n:
        Minv_rows = state.Mfac.solve(np.vstack([contacts.N, contacts.S, contacts.T]).T)
        w_n = np.einsum("ij,ji->i", contacts.N, Minv_rows[:, :n])
        w_s = np.einsum("ij,ji->i", contacts.S, Minv_rows[:, n:2 * n])
        w_t = np.einsum("ij,ji->i", contacts.T, Minv_rows[:, 2 * n:])
    for i in range(n):
        gap = contacts.phi[i]
        if gap > 0:
            continue
        rate = contacts.N[i] @ state.v
        spring = -stiffness * gap
        damp = -damping * rate
        if rate < 0:
            damp = min(damp, -rate / (w_n[i] * dt))
        force = max(0.0, spring + damp)
        vs, vt_ = contacts.S[i] @ state.v, contacts.T[i] @ state.v
        speed = np.hypot(vs, vt_)
        mu = contacts.mu[i] if np.isfinite(contacts.mu[i]) else 1e3
        scale = mu * force / max(speed, mu_reg_speed)
        fN[i] = force * dt
        fS[i] = -min(scale * dt, 1.0 / w_s[i]) * vs
        fT[i] = -min(scale * dt, 1.0 / w_t[i]) * vt_
    tau = np.zeros(state.nq) if tau is None or np.size(tau) == 0 else np.asarray(tau, dtype=float)
    rhs = dt * (state.f_ext + state.P.T @ tau)
    if n:
        rhs = rhs + contacts.N.T @ fN + contacts.S.T @ fS + contacts.T.T @ fT
    vp = state.v + state.Mfac.solve(rhs)
    return StepResult(vp, fN, fS, fT)


def compliant_normal_force(gap, gap_rate, stiffness, damping):
    if gap > 0:
        return 0.0
    return max(0.0, -stiffness * gap - damping * gap_rate)


# ------------------------------------------------------------------ config

def mechanism_from_config(cfg) -> Mechanism:
    """Build a mechanism from a parsed JSON description (or a path to one)."""
    if isinstance(cfg, (str, bytes)) or hasattr(cfg, "__fspath__"):
        try:
            with open(cfg) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(str(e)) from e
    try:
        family = cfg["family"]
        if family == "point_mass":
            return PointMass(cfg.get("mass", 1.0), cfg.get("radius", 0.05), cfg.get("actuated"),
                             q0=cfg.get("q0", (0.0, 0.0, 0.05)))
        if family == "free_body":
            mass = cfg["mass"]
            inertia = cfg.get("inertia") or box_inertia(mass, cfg["half_extents"])
            spheres = [(s["center"], s["radius"]) for s in cfg.get("spheres", [])]
            return FreeBody(mass, inertia, spheres, cfg.get("actuated", ()), cfg.get("name", "box"), cfg.get("q0"))
        if family == "legged_body":
            mass = cfg["mass"]
            inertia = cfg.get("inertia") or box_inertia(mass, cfg["half_extents"])
            return LeggedBody(mass, inertia, cfg["hips"], cfg.get("foot_mass", 0.05),
                              cfg.get("foot_radius", 0.02), cfg.get("rest_length", 0.1),
                              cfg.get("name", "box"), cfg.get("q0"), cfg.get("actuated"))
        if family == "planar_chain":
            return PlanarChain(cfg["lengths"], cfg["masses"], cfg.get("floating", False),
                               cfg.get("base_mass", 1.0), cfg.get("base_inertia", 0.01),
                               cfg.get("anchor", (0.0, 0.0, 0.0)), cfg.get("tip_radius", 0.02),
                               cfg.get("base_radius"), cfg.get("name", "arm"), cfg.get("q0"),
                               cfg.get("actuated"))
        if family == "composite":
            return Composite([mechanism_from_config(p) for p in cfg["parts"]])
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, UnsupportedMechanism):
            raise
        raise ConfigError(f"bad mechanism description: {e}") from e
    raise UnsupportedMechanism(f"unknown family {cfg.get('family')!r}")

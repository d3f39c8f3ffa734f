"""Contact points, contact frames and generalized wrench matrices."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CoincidentCenters, UnknownBody, ZeroNormal

WORLD = "world"


@dataclass(frozen=True)
class ContactPoint:
    point: np.ndarray
    normal: np.ndarray
    tangent_s: np.ndarray
    tangent_t: np.ndarray
    gap: float
    mu: float = float("inf")
    body_a: str = WORLD
    body_b: str = WORLD

    @property
    def pair(self):
        return (self.body_a, self.body_b)


@dataclass
class ContactSet:
    contacts: list
    N: np.ndarray
    S: np.ndarray
    T: np.ndarray
    F: np.ndarray
    E: np.ndarray
    k: int = 4
    phi: np.ndarray = field(default=None)
    mu: np.ndarray = field(default=None)

    @property
    def n(self) -> int:
        return len(self.contacts)

    def subset(self, idx) -> "ContactSet":
        idx = list(idx)
        return build_from_rows(
            [self.contacts[i] for i in idx], self.N[idx], self.S[idx], self.T[idx], self.k)


def contact_frame(normal):
    """Tangent pair (s, t) so that [s, t, n] is right-handed and orthonormal."""
    n = np.asarray(normal, dtype=float).reshape(3)
    nrm = np.linalg.norm(n)
    if not np.isfinite(nrm) or nrm < 1e-12:
        raise ZeroNormal("normal has zero length")
    if abs(nrm - 1.0) > 1e-9:
        raise ZeroNormal(f"normal must be unit length, got norm {nrm}")
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(n)))] = 1.0
    s = axis - (axis @ n) * n
    s /= np.linalg.norm(s)
    t = np.cross(n, s)
    return s, t


def _make_point(point, normal, gap, mu, body_a, body_b):
    s, t = contact_frame(normal)
    return ContactPoint(np.asarray(point, dtype=float), np.asarray(normal, dtype=float),
                        s, t, float(gap), float(mu), body_a, body_b)


def closest_sphere_halfspace(center, radius, plane_point=(0.0, 0.0, 0.0), plane_normal=(0.0, 0.0, 1.0),
                             mu=float("inf"), body=WORLD, plane_body=WORLD) -> ContactPoint:
    if radius <= 0:
        raise ValueError("radius must be positive")
    c = np.asarray(center, dtype=float)
    n = np.asarray(plane_normal, dtype=float)
    n = n / np.linalg.norm(n)
    d = float((c - np.asarray(plane_point, dtype=float)) @ n)
    on_sphere = c - radius * n
    on_plane = c - d * n
    return _make_point(0.5 * (on_sphere + on_plane), n, d - radius, mu, plane_body, body)


def closest_sphere_sphere(c1, r1, c2, r2, mu=float("inf"), body1=WORLD, body2=WORLD) -> ContactPoint:
    if r1 <= 0 or r2 <= 0:
        raise ValueError("radii must be positive")
    c1 = np.asarray(c1, dtype=float)
    c2 = np.asarray(c2, dtype=float)
    d = c2 - c1
    dist = np.linalg.norm(d)
    if dist < 1e-12:
        raise CoincidentCenters("sphere centers coincide")
    n = d / dist
    p1 = c1 + r1 * n
    p2 = c2 - r2 * n
    return _make_point(0.5 * (p1 + p2), n, dist - r1 - r2, mu, body1, body2)


def _point_rows(model, body, point, q):
    if body == WORLD or body is None:
        return np.zeros((3, model.dof))
    if body not in model.body_names:
        raise UnknownBody(body)
    return model.point_jacobian(body, point, q)


def build_wrenches(model, contacts, k: int = 4, q=None) -> ContactSet:
    """Rows of N, S, T are J^T applied to the contact frame directions.

    Impulses along +normal push body_b and pull body_a.
    """
    if k % 2:
        raise ValueError("pyramid edge count must be even")
    if q is None:
        q = model.q
    n = len(contacts)
    m = model.dof
    N = np.zeros((n, m))
    S = np.zeros((n, m))
    T = np.zeros((n, m))
    for i, c in enumerate(contacts):
        J = _point_rows(model, c.body_b, c.point, q) - _point_rows(model, c.body_a, c.point, q)
        N[i] = c.normal @ J
        S[i] = c.tangent_s @ J
        T[i] = c.tangent_t @ J
    return build_from_rows(list(contacts), N, S, T, k)


def build_from_rows(contacts, N, S, T, k=4) -> ContactSet:
    n = len(contacts)
    m = N.shape[1] if N.ndim == 2 else 0
    half = k // 2
    blocks = []
    for j in range(half):
        ang = np.pi * j / half
        D = np.cos(ang) * S + np.sin(ang) * T
        blocks += [D, -D]
    F = np.vstack(blocks) if n else np.zeros((0, m))
    E = np.zeros((n, n * k))
    for j in range(k):
        E[np.arange(n), j * n + np.arange(n)] = 1.0
    phi = np.array([c.gap for c in contacts], dtype=float)
    mu = np.array([c.mu for c in contacts], dtype=float)
    return ContactSet(list(contacts), N, S, T, F, E, k, phi, mu)

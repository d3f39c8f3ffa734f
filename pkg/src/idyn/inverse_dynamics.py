"""Inverse dynamics with simultaneous contact force prediction.

Discrete dynamics used throughout (tau is a force, contact terms are impulses):

    M v+ = M v- + dt f_ext + P' tau dt + N' f_N + S' f_S + T' f_T

Four formulations are provided: sticking contact solved by principal
pivoting, pyramid Coulomb friction solved by Lemke's method, and a two-stage
convex QP with either pyramid or unbounded friction.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .contact_geometry import ContactSet
from .convex_qp import Qp, nullspace_basis, solve_qp
from .errors import (
    EnumerationCapExceeded,
    Infeasible,
    InconsistentDesiredAccel,
    MaxPivotsExceeded,
    NegativeBase,
    NoSolution,
    RayTermination,
    SingularA,
    SolverFailure,
    Unbounded,
)
from .lcp_core import (
    Mlcp,
    checked_cholesky,
    factor_mlcp,
    mlcp_to_lcp,
    recover_unconstrained,
    solve_free,
    solve_lemke,
    nearest_mlcp_solution,
    solve_ppm,
)
from .multibody import MultibodyState, _tangential_from_pyramid

STAGE2_MAX_DIM = 24
ANTI_CHATTER_CAP = 16
FIND_INDICES_TOL = 1e-8
FALLBACK_RIDGE = 1e-10
NONPEN_SLACK = 1e-11


@dataclass
class IdynRequest:
    state: MultibodyState
    contacts: ContactSet | None
    qdot_des: np.ndarray
    dt: float
    tol: float = 1e-8

    def __post_init__(self):
        self.qdot_des = np.asarray(self.qdot_des, dtype=float).reshape(-1)
        if not np.all(np.isfinite(self.qdot_des)):
            raise ValueError("qdot_des must be finite")
        if self.qdot_des.size != self.state.nq:
            raise ValueError(f"qdot_des has length {self.qdot_des.size}, expected {self.state.nq}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @property
    def n(self) -> int:
        return 0 if self.contacts is None else self.contacts.n

    @property
    def kappa(self):
        s = self.state
        return -self.dt * s.f_ext - s.M @ s.v


@dataclass
class IdynResult:
    tau: np.ndarray
    v_plus: np.ndarray
    f_N: np.ndarray
    f_S: np.ndarray
    f_T: np.ndarray
    f_F: np.ndarray | None = None
    lam: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)
    nonbasic_set: tuple = ()


def _diag(**kw):
    d = dict(pivots=0, regularization=0.0, stage2_applied=False, consistency_fallback_used=False)
    d.update(kw)
    return d


# ------------------------------------------------------------------ Algorithm 1

class _ChainSolve:
    """Applies M^-1 via a Cholesky factor, from an SPD matrix or a factor object."""

    def __init__(self, M):
        if hasattr(M, "solve"):
            self.solve = M.solve
        else:
            L = np.linalg.cholesky(np.asarray(M, dtype=float))
            from .lcp_core import chol_solve
            self.solve = lambda B: chol_solve(L, B)


def find_indices(M, P, S, T, rel_tol=FIND_INDICES_TOL):
    """Greedy row selection keeping X' M^-1 X nonsingular, X = [P', S_s', T_t'].

    A candidate row is kept when the Cholesky pivots of X' M^-1 X stay above
    rel_tol times its largest diagonal entry.
    """
    inv = _ChainSolve(M)
    P = np.atleast_2d(np.asarray(P, dtype=float))
    S = np.atleast_2d(np.asarray(S, dtype=float))
    T = np.atleast_2d(np.asarray(T, dtype=float))
    m = S.shape[1] if S.size else P.shape[1]
    P = P.reshape(-1, m)
    n = S.shape[0] if S.size else 0
    Ss, Ts = [], []

    def ok(si, ti):
        X = np.vstack([P, S[si], T[ti]]).T
        if X.shape[1] > m:
            return False
        return checked_cholesky(X.T @ inv.solve(X), rel_tol) is not None

    for i in range(n):
        if ok(Ss + [i], Ts):
            Ss.append(i)
        if ok(Ss, Ts + [i]):
            Ts.append(i)
    return Ss, Ts


# ------------------------------------------------------------------ no-slip

class _ProjectedInverse:
    """v -> top-left block of A^-1 for the saddle-point matrix of a factored MLCP."""

    def __init__(self, record, m, rank):
        self.record = record
        self.m = m
        self.dim = rank
        self.extra = record.mlcp.A.shape[0] - m

    def solve(self, B):
        B = np.asarray(B, dtype=float)
        pad = np.zeros((self.extra,) + B.shape[1:])
        return solve_free(self.record, np.concatenate([B, pad], axis=0))[:self.m]


def no_slip_mlcp(state, cs, Si, Ti, dt, qdot_des=None, tau=None) -> Mlcp:
    """MLCP in x = [v+, tau dt, f_S, f_T], z = f_N.

    With tau given the actuator rows are dropped and tau moves to the
    right-hand side (forward simulation).
    """
    m = state.dof
    kappa = -dt * state.f_ext - state.M @ state.v
    if tau is None:
        P = state.P
        rhs_eq = np.asarray(qdot_des, dtype=float)
    else:
        kappa = kappa - dt * state.P.T @ np.asarray(tau, dtype=float)
        P = np.zeros((0, m))
        rhs_eq = np.zeros(0)
    X = np.vstack([P, cs.S[Si], cs.T[Ti]])
    c = X.shape[0]
    A = np.block([[state.M, -X.T], [X, np.zeros((c, c))]])
    n = cs.n
    C = np.vstack([-cs.N.T, np.zeros((c, n))])
    D = -C.T
    g = np.concatenate([kappa, -rhs_eq, np.zeros(c - rhs_eq.size)])
    return Mlcp(A, C, D, np.zeros((n, n)), g, cs.phi / dt)


def _solve_no_slip(state, cs, dt, qdot_des=None, tau=None, warm=(), tol=1e-8):
    """Returns (v+, tau dt, f_N, f_S, f_T, lcp solution, valid)."""
    m = state.dof
    P = state.P if tau is None else np.zeros((0, m))
    Si, Ti = find_indices(state.Mfac, P, cs.S, cs.T)
    mlcp = no_slip_mlcp(state, cs, Si, Ti, dt, qdot_des, tau)
    try:
        rec = factor_mlcp(mlcp)
    except SingularA as e:
        raise SolverFailure(f"actuation rows are dependent: {e}") from e
    x0 = recover_unconstrained(rec, np.zeros(cs.n))
    op = _ProjectedInverse(rec, m, m - (P.shape[0] + len(Si) + len(Ti)))
    try:
        sol = solve_ppm(cs.N, op, None, warm, offset=cs.phi / dt, base_solution=x0[:m])
    except MaxPivotsExceeded as e:
        raise SolverFailure(str(e)) from e
    x = recover_unconstrained(rec, sol.z)
    v = x[:m]
    nq = P.shape[0]
    tau_hat = x[m:m + nq]
    fS = np.zeros(cs.n)
    fT = np.zeros(cs.n)
    fS[Si] = x[m + nq:m + nq + len(Si)]
    fT[Ti] = x[m + nq + len(Si):]
    scale = tol * (1.0 + np.max(np.abs(v)))
    valid = (np.min(cs.N @ v + cs.phi / dt, initial=0.0) >= -scale
             and np.max(np.abs(cs.S @ v), initial=0.0) <= scale
             and np.max(np.abs(cs.T @ v), initial=0.0) <= scale)
    return v, tau_hat, sol.z, fS, fT, sol, bool(valid)


def _free_space(req: IdynRequest):
    s = req.state
    m, nq = s.dof, s.nq
    K = np.block([[s.M, -s.P.T], [s.P, np.zeros((nq, nq))]])
    x = np.linalg.solve(K, np.concatenate([-req.kappa, req.qdot_des]))
    z = np.zeros(0)
    return IdynResult(x[m:] / req.dt, x[:m], z, z, z, z, z, _diag())


def idyn_no_slip(req: IdynRequest, warm=(), fallback=True) -> IdynResult:
    if req.n == 0:
        return _free_space(req)
    cs = req.contacts
    v, tau_hat, fN, fS, fT, sol, valid = _solve_no_slip(req.state, cs, req.dt, req.qdot_des, None, warm, req.tol)
    if not valid:
        if not fallback:
            raise InconsistentDesiredAccel("desired velocities violate sticking or non-penetration")
        v, tau, step = consistency_fallback(req)
        return IdynResult(tau, v, step.f_N, step.f_S, step.f_T, None, None,
                          _diag(pivots=sol.pivot_count + step.pivots, consistency_fallback_used=True),
                          sol.nonbasic_set)
    return IdynResult(tau_hat / req.dt, v, fN, fS, fT, None, None, _diag(pivots=sol.pivot_count),
                      sol.nonbasic_set)


def consistency_fallback(req: IdynRequest, predicted=None):
    """Torques that track qdot_des as closely as sticking contact allows.

    Sticking is built into the constrained inverse, leaving a QP over
    (tau dt free, f_N >= 0) that minimizes |P v+ - qdot_des| under
    non-penetration.  The torque is then replayed through the sticking-contact
    step so the returned velocity is the one the contact model produces.
    Returns (v+, tau, step result).
    """
    from .multibody import forward_step_rigid
    s, cs, dt = req.state, req.contacts, req.dt
    m, nq, n = s.dof, s.nq, cs.n
    Si, Ti = find_indices(s.Mfac, np.zeros((0, m)), cs.S, cs.T)
    rec = factor_mlcp(no_slip_mlcp(s, cs, Si, Ti, dt, tau=np.zeros(nq)))
    op = _ProjectedInverse(rec, m, m - len(Si) - len(Ti))
    v0 = recover_unconstrained(rec, np.zeros(n))[:m]
    J = np.vstack([s.P, cs.N])
    YJ = op.solve(J.T)
    B = s.P @ YJ
    H = B.T @ B
    # a tiny ridge selects the least-effort torque when tracking leaves it undetermined
    H = H + FALLBACK_RIDGE * max(1.0, float(np.max(np.diag(H)))) * np.eye(nq + n)
    c = B.T @ (s.P @ v0 - req.qdot_des)
    # when torque and contact impulse produce the same motion prefer torque:
    # the replay below enforces complementarity and would drop an unneeded impulse
    c[nq:] += FALLBACK_RIDGE * max(1.0, float(np.max(np.abs(c), initial=0.0)))
    A = cs.N @ YJ
    b = -cs.phi / dt - cs.N @ v0
    try:
        y, _, _ = solve_qp(Qp(0.5 * (H + H.T), c, A, b, list(range(nq, nq + n))))
    except (Infeasible, Unbounded) as e:
        raise SolverFailure(f"consistency QP failed: {e}") from e
    tau = y[:nq] / dt
    step = forward_step_rigid(s, cs, tau, dt, model="complementarity", friction="no_slip")
    return step.v_plus, tau, step


def forward_no_slip(state, cs, tau, dt):
    """Sticking-contact forward step used by the simulator."""
    if tau is None or np.size(tau) == 0:
        tau = np.zeros(state.nq)  # None would select the inverse problem
    v, _, fN, fS, fT, sol, _ = _solve_no_slip(state, cs, dt, None, tau)
    return v, fN, fS, fT, sol.pivot_count


def remap_warm(prev_contacts, prev_nonbasic, new_contacts):
    """Carry a nonbasic set across contact sets by body-pair identity.

    Accepts ContactSets or plain lists of contact points.
    """
    prev_contacts = getattr(prev_contacts, "contacts", prev_contacts)
    new_contacts = getattr(new_contacts, "contacts", new_contacts)
    if not prev_contacts:
        return ()
    slots = {}
    for j, c in enumerate(new_contacts):
        slots.setdefault(c.pair, []).append(j)
    used = {}
    order = {}
    for i, c in enumerate(prev_contacts):
        k = used.get(c.pair, 0)
        used[c.pair] = k + 1
        lst = slots.get(c.pair, [])
        if k < len(lst):
            order[i] = lst[k]
    return tuple(order[i] for i in prev_nonbasic if i in order)


# ------------------------------------------------------------------ Coulomb LCP

def coulomb_mlcp(req: IdynRequest) -> Mlcp:
    """MLCP in x = [v+, tau dt], z = [f_N, f_F, lambda]."""
    s, cs, dt = req.state, req.contacts, req.dt
    m, nq, n, k = s.dof, s.nq, cs.n, cs.k
    if not np.all(np.isfinite(cs.mu)):
        raise ValueError("Coulomb formulation needs finite friction coefficients")
    A = np.block([[s.M, -s.P.T], [s.P, np.zeros((nq, nq))]])
    R = np.vstack([cs.N, cs.F])
    t = (k + 2) * n
    C = np.zeros((m + nq, t))
    C[:m, :(k + 1) * n] = -R.T
    D = np.zeros((t, m + nq))
    D[:(k + 1) * n, :m] = R
    B = np.zeros((t, t))
    B[n:(k + 1) * n, (k + 1) * n:] = cs.E.T
    B[(k + 1) * n:, :n] = np.diag(cs.mu)
    B[(k + 1) * n:, n:(k + 1) * n] = -cs.E
    g = np.concatenate([req.kappa, -req.qdot_des])
    h = np.concatenate([cs.phi / dt, np.zeros(k * n + n)])
    return Mlcp(A, C, D, B, g, h)


def idyn_coulomb_lcp(req: IdynRequest, x_prev=None) -> IdynResult:
    if req.n == 0:
        return _free_space(req)
    s, cs = req.state, req.contacts
    m, n, k = s.dof, cs.n, cs.k
    mlcp = coulomb_mlcp(req)
    lcp, rec = mlcp_to_lcp(mlcp)
    chatter_flag = False
    pivots, reg = 0, 0.0
    z = None
    if x_prev is not None:
        x0 = np.concatenate([x_prev.v_plus, x_prev.tau * req.dt]) if isinstance(x_prev, IdynResult) else x_prev
        try:
            _, z, _ = nearest_mlcp_solution(mlcp, x0, cap=ANTI_CHATTER_CAP)
        except (EnumerationCapExceeded, NoSolution):
            chatter_flag = True
    if z is None:
        try:
            sol = solve_lemke(lcp)
        except (RayTermination, MaxPivotsExceeded) as e:
            raise SolverFailure(str(e)) from e
        z, pivots, reg = sol.z, sol.pivot_count, sol.regularization_used
    x = recover_unconstrained(rec, z)
    v, tau_hat = x[:m], x[m:]
    fN = z[:n]
    fF = z[n:(k + 1) * n]
    lam = z[(k + 1) * n:]
    fS, fT = _tangential_from_pyramid(cs, fF)
    return IdynResult(tau_hat / req.dt, v, fN, fS, fT, fF, lam,
                      _diag(pivots=pivots, regularization=reg, potential_chatter=chatter_flag))


# ------------------------------------------------------------------ two-stage QP

@dataclass
class Stage1Record:
    req: IdynRequest
    friction: str
    z: np.ndarray
    Z: np.ndarray
    Ablk: np.ndarray
    p: np.ndarray
    U: np.ndarray
    G: np.ndarray
    k_vec: np.ndarray
    f_ID: np.ndarray
    b_idx: list
    q_idx: list
    result: IdynResult
    pivots: int = 0


def _partition(state):
    q_idx = [int(np.argmax(row)) for row in state.P]
    qs = set(q_idx)
    b_idx = [i for i in range(state.dof) if i not in qs]
    return b_idx, q_idx


def _contact_rows(cs, friction):
    if friction == "no_slip":
        return np.vstack([cs.N, cs.S, cs.T])
    return np.vstack([cs.N, cs.F])


def _qp_constraints(cs, friction, n_vars):
    """Cone rows (mu f_N - sum f_F >= 0) and the indices constrained >= 0."""
    n = cs.n
    if friction == "no_slip":
        return np.zeros((0, n_vars)), np.zeros(0), list(range(n))
    mu = np.where(np.isfinite(cs.mu), cs.mu, 1e6)
    cone = np.hstack([np.diag(mu), -cs.E])
    return cone, np.zeros(n), list(range(n_vars))


def _support_generators(cs, friction, nz):
    """Columns spanning the admissible impulse set; free columns come in +/- pairs."""
    n = cs.n
    if friction == "no_slip":
        eye = np.eye(nz)
        return np.hstack([eye[:, :n], eye[:, n:], -eye[:, n:]])
    # pyramid extreme rays: pure normal, and normal plus mu along one edge
    k = cs.F.shape[0] // max(n, 1)
    mu = np.where(np.isfinite(cs.mu), cs.mu, 1e6)
    G = np.zeros((nz, n * (k + 1)))
    for i in range(n):
        base = i * (k + 1)
        G[i, base:base + k + 1] = 1.0
        for j in range(k):
            G[n + j * n + i, base + 1 + j] = mu[i]
    return G


def reduce_support(cs, friction, z, tol=1e-10):
    """Equivalent impulses with at most m positive normal components.

    The admissible impulses form a cone generated by finitely many columns,
    and any z' with R'z' = R'z yields the same velocity and torque.  A simplex
    vertex uses at most m generators, hence at most m contacts; it is then
    re-solved exactly on its support.  Returns z unchanged if that fails.
    """
    from scipy.optimize import linprog
    n = cs.n
    R = _contact_rows(cs, friction)
    g = R.T @ z
    Gen = _support_generators(cs, friction, z.size)
    RG = R.T @ Gen
    cost = np.zeros(Gen.shape[1])
    cost[:] = Gen[:n].sum(axis=0)
    if friction == "no_slip":
        cost = cost + 1e-9  # discourages +/- pairs that cancel
    res = linprog(cost, A_eq=RG, b_eq=g, bounds=(0, None), method="highs-ds")
    if res.status != 0:
        return z
    a = res.x
    supp = np.flatnonzero(a > tol * max(1.0, np.max(a)))
    alpha = np.zeros_like(a)
    if supp.size:
        alpha[supp] = np.linalg.lstsq(RG[:, supp], g, rcond=None)[0]
    scale = max(1.0, np.max(np.abs(z)))
    ok = np.max(np.abs(RG @ alpha - g), initial=0.0) <= 1e-12 * max(1.0, np.max(np.abs(g)))
    ok = ok and np.min(alpha, initial=0.0) >= -tol * scale
    out = Gen @ np.maximum(alpha, 0.0)
    ok = ok and np.max(np.abs(R.T @ out - g), initial=0.0) <= 1e-12 * max(1.0, np.max(np.abs(g)))
    if not ok or np.count_nonzero(out[:n] > tol * scale) > np.count_nonzero(z[:n] > tol * scale):
        return z
    return out


def _assemble_result(rec_parts, req, friction, z):
    (Z, p, U, Ginv_solve, k_vec, f_ID, b_idx, q_idx) = rec_parts
    s, cs, dt = req.state, req.contacts, req.dt
    m = s.dof
    v = np.zeros(m)
    v[b_idx] = Z @ z + p
    v[q_idx] = req.qdot_des
    x = Ginv_solve(req.qdot_des - k_vec - U @ z) / dt if q_idx else np.zeros(0)
    tau = x + f_ID
    if req.n == 0:
        e = np.zeros(0)
        return IdynResult(tau, v, e, e, e, e, None, _diag())
    n = cs.n
    if np.count_nonzero(z[:n] > 1e-10 * max(1.0, np.max(z[:n]))) > req.state.dof:
        z = reduce_support(cs, friction, z)
    fN = z[:n]
    if friction == "no_slip":
        fS, fT, fF = z[n:2 * n], z[2 * n:], None
    else:
        fF = z[n:]
        fS, fT = _tangential_from_pyramid(cs, fF)
    return IdynResult(tau, v, fN, fS, fT, fF, None, _diag())


def _penetration_slacks(A, b, cone, lb, nz):
    """Increasing uniform relaxations s of A z >= b - s, starting from the LP minimum.

    The LP solver only resolves infeasibility down to its own tolerance, so
    the minimum is followed by geometrically padded values.
    """
    from scipy.optimize import linprog
    na = A.shape[0]
    cost = np.zeros(nz + 1)
    cost[-1] = 1.0
    A_ub = -np.hstack([np.vstack([A, cone]), np.r_[np.ones(na), np.zeros(cone.shape[0])][:, None]])
    b_ub = -np.concatenate([b, np.zeros(cone.shape[0])])
    lbs = set(lb)
    bounds = [(0, None) if i in lbs else (None, None) for i in range(nz)] + [(0, None)]
    res = linprog(cost, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if res.status != 0:
        return []
    base = NONPEN_SLACK * (1.0 + np.max(np.abs(b), initial=0.0))
    return [res.x[-1] + base * 10.0 ** k for k in range(1, 6)]


def idyn_qp_stage1(req: IdynRequest, friction: str = "pyramid"):
    """Maximal-dissipation contact impulses with the actuated velocities pinned."""
    s, dt = req.state, req.dt
    b_idx, q_idx = _partition(s)
    M = s.M
    Minv = s.Mfac.solve(np.eye(s.dof))
    Ablk = M[np.ix_(b_idx, b_idx)]
    Bblk = M[np.ix_(b_idx, q_idx)]
    Cblk = M[np.ix_(q_idx, q_idx)]
    D_E = Minv[b_idx][:, b_idx + q_idx]          # [D E]
    Et_G = Minv[q_idx][:, b_idx + q_idx]         # [E' G]
    Eblk = Minv[np.ix_(b_idx, q_idx)]
    Gblk = Minv[np.ix_(q_idx, q_idx)]
    perm = b_idx + q_idx
    v_b, v_q = s.v[b_idx], s.v[q_idx]
    qdd = (req.qdot_des - v_q) / dt
    f_ID = Cblk @ qdd - s.f_ext[q_idx]
    drive = dt * s.f_ext[perm]
    drive[len(b_idx):] += dt * f_ID
    j_vec = v_b + D_E @ drive
    k_vec = v_q + Et_G @ drive
    if q_idx:
        Lg = np.linalg.cholesky(Gblk)
        from .lcp_core import chol_solve
        Ginv_solve = lambda b: chol_solve(Lg, b)
    else:
        Ginv_solve = lambda b: np.zeros((0,) + np.shape(b)[1:])
    n = req.n
    cs = req.contacts
    if n == 0:
        z = np.zeros(0)
        R = np.zeros((s.dof, 0))
    else:
        R = _contact_rows(cs, friction).T[perm]
    U = Et_G @ R
    Z = D_E @ R - (Eblk @ Ginv_solve(U) if q_idx else 0.0)
    p = j_vec + (Eblk @ Ginv_solve(req.qdot_des - k_vec) if q_idx else 0.0)
    pivots = 0
    relaxed = False
    if n:
        H = Z.T @ Ablk @ Z
        c = Z.T @ Ablk @ p + Z.T @ Bblk @ req.qdot_des
        Nperm = cs.N[:, perm]
        Nb, Nq = Nperm[:, :len(b_idx)], Nperm[:, len(b_idx):]
        A_np = Nb @ Z
        b_np = -cs.phi / dt - Nb @ p - Nq @ req.qdot_des
        # room for round-off when contacts squeeze a body from opposite sides
        b_np = b_np - NONPEN_SLACK * (1.0 + np.max(np.abs(b_np)))
        cone, cone_b, lb = _qp_constraints(cs, friction, Z.shape[1])
        H = 0.5 * (H + H.T)
        try:
            z, _, qd = solve_qp(Qp(H, c, np.vstack([A_np, cone]), np.concatenate([b_np, cone_b]), lb))
        except (Infeasible, Unbounded) as e:
            # desired velocities that squeeze rigid contacts: relax non-penetration minimally
            z = None
            for slack in _penetration_slacks(A_np, b_np, cone, lb, Z.shape[1]):
                try:
                    z, _, qd = solve_qp(Qp(H, c, np.vstack([A_np, cone]),
                                           np.concatenate([b_np - slack, cone_b]), lb))
                    break
                except (Infeasible, Unbounded):
                    continue
            if z is None:
                raise SolverFailure(f"stage one QP failed: {e}") from e
            relaxed = True
        pivots = qd.pivots
    parts = (Z, p, U, Ginv_solve, k_vec, f_ID, b_idx, q_idx)
    res = _assemble_result(parts, req, friction, z)
    res.diagnostics["pivots"] = pivots
    res.diagnostics["consistency_fallback_used"] = relaxed
    rec = Stage1Record(req, friction, z, Z, Ablk, p, U, Gblk, k_vec, f_ID, b_idx, q_idx, res, pivots)
    rec._parts = parts
    return res, rec


def idyn_qp_stage2(stage1: Stage1Record, max_dim: int = STAGE2_MAX_DIM) -> IdynResult:
    """Minimum-norm torques among the impulses that keep the stage-one objective."""
    req = stage1.req
    if req.n == 0 or stage1.z.size == 0:
        return stage1.result
    # kernel of Z'AZ taken from its square root: the Gram form squares the noise
    Z = stage1.Z
    root = np.linalg.cholesky(stage1.Ablk).T @ Z if Z.shape[0] else Z
    W = nullspace_basis(root, 1e-5)
    if W.shape[1] == 0:
        return stage1.result
    parts = stage1._parts
    Ginv_solve = parts[3]
    z0 = stage1.z
    tau0 = stage1.result.tau
    if stage1.q_idx:
        K = Ginv_solve(stage1.U @ W) / req.dt
    else:
        K = np.zeros((0, W.shape[1]))
    # drop round-off: directions whose torque effect is negligible next to the full map
    ref = np.linalg.norm(Ginv_solve(stage1.U) / req.dt, 2) if stage1.q_idx else 0.0
    if K.size:
        Uk, sk, Vk = np.linalg.svd(K, full_matrices=False)
        sk = np.where(sk > 1e-10 * ref, sk, 0.0)
        K = (Uk * sk) @ Vk
    if not np.any(K):
        return stage1.result
    if W.shape[1] > max_dim:
        # kernel directions are tied at zero; rank them by their effect on torque
        _, _, Vt = np.linalg.svd(K, full_matrices=True)
        W = W @ Vt.T[:, :max_dim]
        K = K @ Vt.T[:, :max_dim]
    H = K.T @ K
    c = -K.T @ tau0
    cs = req.contacts
    n = cs.n
    if stage1.friction == "no_slip":
        Apos = W[:n]
        bpos = -z0[:n]
        A, b = Apos, bpos
    else:
        cone, _, _ = _qp_constraints(cs, stage1.friction, z0.size)
        A = np.vstack([W, cone @ W])
        b = np.concatenate([-z0, -cone @ z0])
    # w = 0 stays exactly feasible despite round-off in z0
    b = np.minimum(b, 0.0)
    try:
        w, _, qd = solve_qp(Qp(0.5 * (H + H.T), c, A, b))
    except (Infeasible, Unbounded) as e:
        # w = 0 is feasible, so this is numerical; stage one remains a valid answer
        res = stage1.result
        res.diagnostics["stage2_failed"] = str(e)
        return res
    z = z0 + W @ w
    if stage1.friction != "no_slip":
        z = np.maximum(z, 0.0)
    else:
        z[:n] = np.maximum(z[:n], 0.0)
    res = _assemble_result(parts, req, stage1.friction, z)
    # never worse than stage one in torque norm, and never a different motion
    v0 = stage1.result.v_plus
    if (np.linalg.norm(res.tau) > np.linalg.norm(tau0)
            or np.max(np.abs(res.v_plus - v0)) > 1e-9 * (1.0 + np.max(np.abs(v0)))):
        return stage1.result
    res.diagnostics.update(pivots=stage1.pivots + qd.pivots, stage2_applied=True, nullspace_dim=W.shape[1])
    return res


def _carry_flags(stage1_res, res):
    res.diagnostics["consistency_fallback_used"] = stage1_res.diagnostics.get("consistency_fallback_used", False)
    return res


def idyn_qp(req: IdynRequest, stage2: bool = True) -> IdynResult:
    if req.n == 0:
        return _free_space(req)
    res, rec = idyn_qp_stage1(req, "pyramid")
    return _carry_flags(res, idyn_qp_stage2(rec)) if stage2 else res


def idyn_qp_no_slip(req: IdynRequest, stage2: bool = True) -> IdynResult:
    if req.n == 0:
        return _free_space(req)
    res, rec = idyn_qp_stage1(req, "no_slip")
    return _carry_flags(res, idyn_qp_stage2(rec)) if stage2 else res


FORMULATIONS = {
    "no_slip": ("complementarity", "no_slip"),
    "coulomb_lcp": ("complementarity", "pyramid"),
    "qp": ("complementarity_free", "pyramid"),
    "qp_no_slip": ("complementarity_free", "no_slip"),
}


def solve_idyn(req: IdynRequest, formulation: str, warm=(), stage2: bool = True,
               x_prev=None) -> IdynResult:
    """Dispatch by formulation name; warm applies to no_slip, x_prev to coulomb_lcp."""
    if formulation == "no_slip":
        return idyn_no_slip(req, warm)
    if formulation == "coulomb_lcp":
        return idyn_coulomb_lcp(req, x_prev)
    if formulation == "qp":
        return idyn_qp(req, stage2)
    if formulation == "qp_no_slip":
        return idyn_qp_no_slip(req, stage2)
    raise ValueError(f"unknown formulation {formulation!r}")


# ------------------------------------------------------------------ flop counts

def _plain_rows(m, nq, n, k):
    F = Fraction
    return {
        "ldlt_X": F(m ** 3, 3) + m * m * nq + m * m + m * nq * nq + 2 * m * nq - F(7 * m, 3)
        + F(nq ** 3, 3) + nq * nq - F(7 * nq, 3) + 1,
        "Xinv_Nt": m + 2 * m * m * n + nq + 4 * m * n * nq + 2 * n * nq * nq,
        "Xinv_Ft": m + 2 * k * m * m * n + nq + 4 * k * m * n * nq + 2 * k * n * nq * nq,
        "N_Xinv_Nt": 2 * m * n * n - m * n,
        "F_Xinv_Nt": 2 * m * n * n * k - m * n,
        # product of an nk x m by an m x nk block
        "F_Xinv_Ft": 2 * m * (n * k) ** 2 - m * n * k,
        "kappa": 2 * m * m - m,
        "Xinv_kappa": 2 * (m + nq) ** 2,
        "N_Xinv_kappa": m * n - m,
        "F_Xinv_kappa": m * n * k - m,
        "tau": 2 * (m + nq) ** 2,
    }


def _optimized_rows(m, nq, n, k):
    F = Fraction
    nb = m - nq
    nz = n * (n * k + 1)
    return {
        "chol_inverse_M": F(2 * m ** 3, 3) + F(m * m, 2) + F(5 * m, 6),
        "chol_G": F(nq ** 3, 3) + F(nq * nq, 2) + F(nq, 6),
        "Z": nb * m + nq * n * (n * k + 1) * (2 * m - 1) + nb * m * (2 * nq - 1) + 2 * nq * nq * m,
        "p": 2 * nb * nq + 2 * nq * nq + 3 * nq + 2 * nb + 2 * m + 2 * m * nq,
        "ZtAZ": 2 * nb * nb * nz - nb * nz + 2 * nb * nz ** 2 - nz ** 2,
        # read as n(nk+1) + nb(2nb - 1)
        "ZtAp": nz + nb * (2 * nb - 1),
        "ZtBvq": (nz + nq) * (2 * nq - 1),
        "NtZ": n * n * (n * k + 1) * (2 * nb - 1),
        "Nt_pv": n * (2 * m - 1),
    }


def estimate_flops_stage1(m: int, nq: int, n: int, k: int, variant: str = "plain") -> int:
    if nq > m:
        raise NegativeBase(f"nq={nq} exceeds m={m}")
    if min(m, n, k) <= 0 or nq < 0:
        raise ValueError("sizes must be positive")
    rows = _plain_rows(m, nq, n, k) if variant == "plain" else _optimized_rows(m, nq, n, k)
    if variant not in ("plain", "optimized"):
        raise ValueError(f"unknown variant {variant!r}")
    total = sum(rows.values())
    return int(round(total))

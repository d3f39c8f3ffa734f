"""Linear and mixed linear complementarity problems and their solvers.

An LCP (r, Q) asks for z >= 0 with w = Qz + r >= 0 and z.w = 0.
An MLCP (A, C, D, B, g, h) adds free variables x:

    A x + C z + g = 0
    D x + B z + h = w >= 0,  z >= 0,  z.w = 0
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import (
    DimensionMismatch,
    EnumerationCapExceeded,
    MaxPivotsExceeded,
    NoSolution,
    RayTermination,
    SingularA,
)

DEFAULT_SCHEDULE = (0.0, 1e-12, 1e-10, 1e-8, 1e-6, 1e-4)
CHOL_REL_TOL = 1e-10


@dataclass(frozen=True)
class Lcp:
    r: np.ndarray
    Q: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.r, dtype=float).reshape(-1)
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        if Q.shape != (r.size, r.size):
            raise DimensionMismatch(f"Q is {Q.shape}, r has length {r.size}")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(Q))):
            raise ValueError("LCP data must be finite")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "Q", Q)

    @property
    def size(self) -> int:
        return self.r.size


@dataclass(frozen=True)
class LcpSolution:
    z: np.ndarray
    w: np.ndarray
    nonbasic_set: tuple = ()
    pivot_count: int = 0
    regularization_used: float = 0.0
    trace: tuple = field(default=(), compare=False)


@dataclass(frozen=True)
class Mlcp:
    A: np.ndarray
    C: np.ndarray
    D: np.ndarray
    B: np.ndarray
    g: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        A, C, D, B = (np.atleast_2d(np.asarray(x, dtype=float)) for x in (self.A, self.C, self.D, self.B))
        g = np.asarray(self.g, dtype=float).reshape(-1)
        h = np.asarray(self.h, dtype=float).reshape(-1)
        p, t = g.size, h.size
        # allow empty blocks given as 1-d or (0,) arrays
        C = C.reshape(p, t)
        D = D.reshape(t, p)
        B = B.reshape(t, t)
        if A.shape != (p, p):
            raise DimensionMismatch(f"A is {A.shape}, expected {(p, p)}")
        for name, val in zip("ACDBgh", (A, C, D, B, g, h)):
            object.__setattr__(self, name, val)


@dataclass(frozen=True)
class Reduction:
    """What mlcp_to_lcp keeps around to recover the free variables."""
    mlcp: Mlcp
    lu: tuple


@dataclass(frozen=True)
class ResidualReport:
    equation: float
    z_negativity: float
    w_negativity: float
    complementarity: float
    passed: bool

    @property
    def worst(self) -> float:
        return max(self.equation, self.z_negativity, self.w_negativity, self.complementarity)


# ---------------------------------------------------------------- helpers

def checked_cholesky(A: np.ndarray, rel_tol: float = CHOL_REL_TOL):
    """Lower Cholesky factor of A, or None when A is numerically singular.

    A pivot below rel_tol * max(diag A) counts as failure.
    """
    A = np.asarray(A, dtype=float)
    if A.size == 0:
        return np.zeros((0, 0))
    scale = max(float(np.max(np.abs(np.diag(A)))), 0.0)
    if scale == 0.0:
        return None
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return None
    if np.min(np.diag(L)) ** 2 < rel_tol * scale:
        return None
    return L


def chol_solve(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    y = sla.solve_triangular(L, b, lower=True)
    return sla.solve_triangular(L.T, y, lower=False)


class SpdFactor:
    """Cholesky factorization of a symmetric positive definite matrix."""

    def __init__(self, M):
        M = np.atleast_2d(np.asarray(M, dtype=float))
        self.M = M
        L = checked_cholesky(M)
        if L is None:
            raise np.linalg.LinAlgError("matrix is not positive definite")
        self.L = L

    @property
    def dim(self) -> int:
        return self.M.shape[0]

    def solve(self, b):
        return chol_solve(self.L, np.asarray(b, dtype=float))


def _lu(A: np.ndarray):
    if A.size == 0:
        return (A, np.zeros(0, dtype=int))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, piv = sla.lu_factor(A, check_finite=True)
    d = np.abs(np.diag(lu))
    if np.min(d) <= 1e-13 * max(np.max(d), 1e-300) or not np.all(np.isfinite(lu)):
        raise SingularA("A is singular; prune dependent constraint rows first")
    return (lu, piv)


def _lu_solve(lu, b):
    if lu[0].size == 0:
        return np.zeros_like(np.asarray(b, dtype=float))
    return sla.lu_solve(lu, b)


# ---------------------------------------------------------------- reduction

def factor_mlcp(m: Mlcp) -> Reduction:
    """Factor A without forming the reduced matrix."""
    return Reduction(m, _lu(m.A))


def solve_free(record: Reduction, b) -> np.ndarray:
    """A^-1 b using the stored factorization."""
    return _lu_solve(record.lu, np.asarray(b, dtype=float))


def mlcp_to_lcp(m: Mlcp) -> tuple[Lcp, Reduction]:
    lu = _lu(m.A)
    AinvC = _lu_solve(lu, m.C)
    Ainvg = _lu_solve(lu, m.g)
    Q = m.B - m.D @ AinvC
    r = m.h - m.D @ Ainvg
    return Lcp(r, Q), Reduction(m, lu)


def recover_unconstrained(record: Reduction, z) -> np.ndarray:
    z = np.asarray(z, dtype=float).reshape(-1)
    m = record.mlcp
    if z.size != m.h.size:
        raise DimensionMismatch(f"z has length {z.size}, expected {m.h.size}")
    return -_lu_solve(record.lu, m.C @ z + m.g)


def verify_solution(p: Lcp, s: LcpSolution, tol: float = 1e-8) -> ResidualReport:
    z = np.asarray(s.z, dtype=float)
    w = np.asarray(s.w, dtype=float)
    if z.size != p.size or w.size != p.size:
        raise DimensionMismatch("solution and problem sizes differ")
    eq = float(np.max(np.abs(p.Q @ z + p.r - w), initial=0.0))
    zneg = float(max(0.0, -np.min(z, initial=0.0)))
    wneg = float(max(0.0, -np.min(w, initial=0.0)))
    comp = float(np.max(np.abs(z * w), initial=0.0))
    ok = max(eq, zneg, wneg) <= tol and comp <= tol * (1.0 + np.linalg.norm(z) * np.linalg.norm(w))
    return ResidualReport(eq, zneg, wneg, comp, bool(ok))


def dump_lcp(p: Lcp, path) -> None:
    """Plain-text dump: size line, Q rows, then r."""
    with open(path, "w") as fh:
        fh.write(f"{p.size}\n")
        for row in p.Q:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")
        fh.write(" ".join(repr(float(v)) for v in p.r) + "\n")


def load_lcp(path) -> Lcp:
    with open(path) as fh:
        lines = [ln.split() for ln in fh if ln.strip()]
    a = int(lines[0][0])
    Q = np.array([[float(v) for v in ln] for ln in lines[1:1 + a]]).reshape(a, a)
    r = np.array([float(v) for v in lines[1 + a]]) if a else np.zeros(0)
    return Lcp(r, Q)


# ---------------------------------------------------------------- Lemke

# rebuild the tableau from scratch this often (every pivot for small problems)
REFACTOR_EVERY = 8
PIVOT_TOL = 1e-9
REFACTOR_ALWAYS_BELOW = 400

def _lemke_once(Q, r, max_pivots, pivot_tol=PIVOT_TOL):
    """Lemke's method with covering vector of ones and lexicographic ratio test.

    Returns (z, basis, pivots). Raises RayTermination on an unbounded ray.
    Variables are numbered w: 0..a-1, z: a..2a-1, z0: 2a.
    """
    a = r.size
    # tableau columns: [w (I) | z (-Q) | z0 (-1)]; rhs r; B^-1 kept for lexicography
    T0 = np.hstack([np.eye(a), -Q, -np.ones((a, 1))])
    T = T0.copy()
    q = r.copy()
    Binv = np.eye(a)
    basis = list(range(a))
    since = [0]
    every = 1 if a <= REFACTOR_ALWAYS_BELOW else REFACTOR_EVERY

    def pivot(row, col):
        piv = T[row, col]
        small = abs(piv) < 1e-6 * np.max(np.abs(T[:, col]))
        basis[row] = col
        since[0] += 1
        if small or since[0] >= every:
            # rebuild from the original columns to stop error growth
            try:
                Binv[:] = np.linalg.inv(T0[:, basis])
                T[:] = Binv @ T0
                q[:] = Binv @ r
                since[0] = 0
                return
            except np.linalg.LinAlgError:
                pass
        T[row] /= piv
        q[row] /= piv
        Binv[row] /= piv
        f = T[:, col].copy()
        f[row] = 0.0
        T[:] -= np.outer(f, T[row])
        q[:] -= f * q[row]
        Binv[:] -= np.outer(f, Binv[row])

    # first pivot: z0 enters, most negative r leaves (ties: lexicographic)
    cand = np.flatnonzero(q <= q.min())
    row = int(_lexmin(cand, q, Binv, np.ones(a)))
    leaving = basis[row]
    pivot(row, 2 * a)
    pivots = 1
    while True:
        entering = leaving + a if leaving < a else leaving - a
        col = T[:, entering]
        # x_B = q - col * x_e ; blocking rows have col > 0
        pos = np.flatnonzero(col > pivot_tol * max(1.0, np.max(np.abs(col))))
        if pos.size == 0:
            raise RayTermination("secondary ray")
        # round-off can leave basic values a hair below zero
        ratios = np.maximum(q[pos], 0.0) / col[pos]
        rmin = ratios.min()
        tied = pos[ratios <= rmin + 1e-12 * max(1.0, abs(rmin))]
        # prefer driving z0 out whenever it is among the minimizers
        z0rows = [i for i in tied if basis[i] == 2 * a]
        row = z0rows[0] if z0rows else int(_lexmin(tied, q, Binv, col))
        leaving = basis[row]
        pivot(row, entering)
        pivots += 1
        if leaving == 2 * a:
            break
        if pivots >= max_pivots:
            raise MaxPivotsExceeded(f"Lemke exceeded {max_pivots} pivots")
    z = np.zeros(a)
    for i, b in enumerate(basis):
        if a <= b < 2 * a:
            z[b - a] = max(q[i], 0.0)
    return z, [b - a for b in basis if a <= b < 2 * a], pivots


def _lexmin(rows, q, Binv, col):
    """Row whose vector (q_i, Binv_i) / col_i is lexicographically smallest."""
    rows = list(rows)
    if len(rows) == 1:
        return rows[0]
    keys = {i: np.concatenate(([q[i]], Binv[i])) / col[i] for i in rows}
    best = rows[0]
    for i in rows[1:]:
        d = keys[i] - keys[best]
        scale = np.maximum(np.abs(keys[i]), np.abs(keys[best]))
        nz = np.flatnonzero(np.abs(d) > 1e-11 * np.maximum(scale, 1e-3))
        if nz.size and d[nz[0]] < 0:
            best = i
    return best


def _polish(Q, r, support):
    """Re-solve the principal system on the final support for accuracy."""
    a = r.size
    z = np.zeros(a)
    if not support:
        return z
    idx = np.array(sorted(support))
    try:
        z[idx] = np.linalg.solve(Q[np.ix_(idx, idx)], -r[idx])
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(z)):
        return None
    return z


def solve_lemke(p: Lcp, max_pivots: int | None = None, base_tol: float = 1e-8,
                tikhonov_schedule=DEFAULT_SCHEDULE) -> LcpSolution:
    Q, r = p.Q, p.r
    a = p.size
    if a == 0 or np.min(r) >= 0:
        return LcpSolution(np.zeros(a), r.copy(), (), 0, 0.0)
    if max_pivots is None:
        max_pivots = max(1000, 50 * a)
    scale = float(np.max(np.abs(np.diag(Q))))
    if scale == 0.0:
        scale = max(float(np.max(np.abs(Q))), 1.0)
    total = 0
    last_err = None
    for lam_rel in tikhonov_schedule:
        lam = lam_rel * scale
        Qr = Q + lam * np.eye(a)
        try:
            z, support, piv = _lemke_once(Qr, r, max_pivots)
        except RayTermination as e:
            last_err = e
            # degenerate problems can hide a genuine blocking row below the
            # pivot tolerance; retry exactly and keep the result only if it checks out
            try:
                z, support, piv = _lemke_once(Qr, r, max_pivots, 0.0)
            except RayTermination:
                continue
            wr = Qr @ z + r
            if np.min(wr) < -base_tol * (1.0 + np.max(np.abs(r))) or abs(z @ wr) > base_tol * (1.0 + np.abs(z) @ np.abs(r)):
                continue
        total += piv
        zp = _polish(Qr, r, support)
        if zp is not None:
            wp = Qr @ zp + r
            if np.min(zp) >= -base_tol and np.min(wp) >= -base_tol:
                z = np.maximum(zp, 0.0)
        w = Q @ z + r
        sup = np.array(support, dtype=int)
        w[sup] = np.where(np.abs(w[sup]) <= base_tol, 0.0, w[sup])
        return LcpSolution(z, w, tuple(sorted(support)), total, lam)
    raise RayTermination(f"ray termination after full regularization schedule ({last_err})")


# ---------------------------------------------------------------- PPM

def solve_ppm(N, Mfac, fstar, warm_nonbasic=(), max_pivots: int | None = None,
              tol: float = 1e-12, offset=None, base_solution=None) -> LcpSolution:
    """Principal pivoting for the LCP (N M^-1 fstar + offset, N M^-1 N^T).

    Only the working-set block N_b M^-1 N_b^T is ever formed, so each
    iteration costs O(m^3 + n m).  Mfac may be any object with a symmetric
    positive semidefinite solve(B) and a dim attribute (rank bound).
    base_solution, if given, replaces M^-1 fstar.
    """
    N = np.atleast_2d(np.asarray(N, dtype=float))
    fac = Mfac if hasattr(Mfac, "solve") else SpdFactor(Mfac)
    n = N.shape[0]
    if n == 0:
        return LcpSolution(np.zeros(0), np.zeros(0), (), 0, 0.0)
    if base_solution is not None:
        u = np.asarray(base_solution, dtype=float).reshape(-1)
    else:
        u = fac.solve(np.asarray(fstar, dtype=float).reshape(-1))
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float).reshape(-1)
    r = N @ u + off
    thresh = tol * (1.0 + np.max(np.abs(r)))
    if np.min(r) >= -thresh:
        return LcpSolution(np.zeros(n), r, (), 0, 0.0)
    if max_pivots is None:
        max_pivots = max(100, 10 * n)

    nb = [int(i) for i in warm_nonbasic if 0 <= int(i) < n]
    nb = list(dict.fromkeys(nb))
    pivots = 0
    trace = []
    if nb:
        # reject warm indices that make the working block singular
        kept = []
        for i in nb:
            if _block_factor(N, fac, kept + [i]) is not None:
                kept.append(i)
        nb = kept
    if not nb:
        nb = [int(np.argmin(r))]
        pivots += 1
        trace.append(("add", nb[0]))

    rejected = set()
    while True:
        fb = _block_factor(N, fac, nb)
        if fb is None:
            # the last index added made the block singular; reject it
            bad = nb.pop()
            rejected.add(bad)
            trace.append(("reject", bad))
            continue
        L, Y = fb
        b = N[nb] @ u + off[nb]
        zd = -chol_solve(L, b) if nb else np.zeros(0)
        a_dag = Y @ zd + u
        wd = N @ a_dag + off
        basic_mask = np.ones(n, dtype=bool)
        basic_mask[nb] = False
        for j in rejected:
            basic_mask[j] = False
        wb = np.where(basic_mask, wd, np.inf)
        i = int(np.argmin(wb))
        j = int(np.argmin(zd)) if nb else -1
        if wb[i] >= -thresh:
            if nb and zd[j] < -thresh:
                trace.append(("drop", nb[j]))
                del nb[j]
                rejected.clear()
                pivots += 1
            else:
                z = np.zeros(n)
                z[nb] = np.maximum(zd, 0.0)
                w = wd.copy()
                w[nb] = 0.0
                return LcpSolution(z, w, tuple(nb), pivots, 0.0, tuple(trace))
        else:
            nb.append(i)
            trace.append(("add", i))
            pivots += 1
            if j >= 0 and zd[j] < -thresh:
                trace.append(("drop", nb[j]))
                del nb[j]
                pivots += 1
        if pivots > max_pivots:
            raise MaxPivotsExceeded(f"PPM exceeded {max_pivots} pivots")


def _block_factor(N, fac, idx):
    if not idx:
        return np.zeros((0, 0)), np.zeros((N.shape[1], 0))
    if len(idx) > getattr(fac, "dim", len(idx)):
        return None  # more rows than the operator's rank: singular whatever the round-off says
    Nb = N[idx]
    Y = fac.solve(Nb.T)
    A = Nb @ Y
    L = checked_cholesky(0.5 * (A + A.T))
    if L is None:
        return None
    return L, Y


# ---------------------------------------------------------------- MINDIFF

def enumerate_mlcp_solutions(m: Mlcp, tol: float = 1e-9, cap: int = 16):
    """Yield (x, z, w) for every complementary basis giving a valid solution."""
    t = m.h.size
    if t > cap:
        raise EnumerationCapExceeded(f"{t} complementarity variables exceeds cap {cap}")
    p = m.g.size
    for bits in itertools.product((False, True), repeat=t):
        alpha = [i for i in range(t) if bits[i]]
        K = np.block([[m.A, m.C[:, alpha]], [m.D[alpha], m.B[np.ix_(alpha, alpha)]]]) if alpha else m.A
        rhs = -np.concatenate([m.g, m.h[alpha]])
        sol = _try_solve(K, rhs)
        if sol is None:
            continue
        x = sol[:p]
        z = np.zeros(t)
        z[alpha] = sol[p:]
        w = m.D @ x + m.B @ z + m.h
        scale = tol * (1.0 + np.max(np.abs(sol), initial=0.0))
        if np.min(z, initial=0.0) < -scale or np.min(w, initial=0.0) < -scale:
            continue
        w[alpha] = 0.0
        yield x, np.maximum(z, 0.0), np.maximum(w, 0.0)


def _try_solve(K, rhs):
    if K.size == 0:
        return np.zeros(0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, piv = sla.lu_factor(K, check_finite=False)
    d = np.abs(np.diag(lu))
    if not np.all(np.isfinite(lu)) or np.min(d) <= 1e-11 * np.max(d):
        return None
    return sla.lu_solve((lu, piv), rhs)


def nearest_mlcp_solution(m: Mlcp, x0, cap: int = 16):
    """(x, z, distance) for the valid solution whose free part is nearest x0."""
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    best, best_d = None, np.inf
    for x, z, _w in enumerate_mlcp_solutions(m, cap=cap):
        d = float(np.linalg.norm(x - x0))
        if d < best_d - 1e-12:
            best, best_d = (x, z), d
    if best is None:
        raise NoSolution("no complementary basis yields a valid solution")
    return best[0], best[1], best_d


def solve_min_diff(m: Mlcp, x0, cap: int = 16) -> tuple[np.ndarray, float]:
    """Valid complementary solution whose free part is nearest to x0."""
    x, _z, d = nearest_mlcp_solution(m, x0, cap)
    return x, d

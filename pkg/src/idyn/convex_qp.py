"""Convex QPs solved through their KKT conditions as an LCP."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.optimize import linprog

from .errors import DimensionMismatch, Infeasible, MaxPivotsExceeded, RayTermination, Unbounded
from .lcp_core import DEFAULT_SCHEDULE, Lcp, solve_lemke, verify_solution


@dataclass(frozen=True)
class Qp:
    """min 1/2 x'Hx + c'x  s.t.  Aineq x >= bineq,  x[lb_zero] >= 0."""
    H: np.ndarray
    c: np.ndarray
    Aineq: np.ndarray = None
    bineq: np.ndarray = None
    lb_zero: tuple = field(default=())

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float).reshape(-1)
        n = c.size
        H = np.asarray(self.H, dtype=float).reshape(n, n)
        if self.Aineq is None:
            A, b = np.zeros((0, n)), np.zeros(0)
        else:
            b = np.asarray(self.bineq, dtype=float).reshape(-1)
            A = np.asarray(self.Aineq, dtype=float).reshape(b.size, n)
        if not np.allclose(H, H.T, rtol=1e-12, atol=1e-12 * max(1.0, np.max(np.abs(H), initial=0.0))):
            raise ValueError("H must be symmetric")
        lb = tuple(sorted({int(i) for i in self.lb_zero}))
        if any(i < 0 or i >= n for i in lb):
            raise DimensionMismatch("lb_zero index out of range")
        object.__setattr__(self, "H", 0.5 * (H + H.T))
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "Aineq", A)
        object.__setattr__(self, "bineq", b)
        object.__setattr__(self, "lb_zero", lb)

    @property
    def n(self) -> int:
        return self.c.size

    def objective(self, x) -> float:
        return float(0.5 * x @ self.H @ x + self.c @ x)


@dataclass
class QpDiagnostics:
    pivots: int
    regularization: float
    stationarity: float
    feasibility: float


def _kkt_lcp(q: Qp, ridge=0.0):
    """LCP over (x_free+, x_free-, x_lb, lambda).

    Free variables are split into nonnegative parts so the KKT matrix stays
    positive semidefinite and Lemke's method applies.  The ridge acts on the
    split variables; without it x+ and x- can grow together along a ray.
    """
    H = q.H
    n = q.n
    lb = list(q.lb_zero)
    free = [i for i in range(n) if i not in set(lb)]
    # x = G y where y = [x+ ; x- ; x_lb]
    G = np.zeros((n, 2 * len(free) + len(lb)))
    for j, i in enumerate(free):
        G[i, j] = 1.0
        G[i, len(free) + j] = -1.0
    for j, i in enumerate(lb):
        G[i, 2 * len(free) + j] = 1.0
    A = q.Aineq
    Hy = G.T @ H @ G + ridge * np.eye(G.shape[1])
    Ay = A @ G
    Qm = np.block([[Hy, -Ay.T], [Ay, np.zeros((A.shape[0], A.shape[0]))]])
    r = np.concatenate([G.T @ q.c, -q.bineq])
    return Lcp(r, Qm), G, len(free), lb


def _feasible(q: Qp) -> bool:
    n = q.n
    if q.Aineq.shape[0] == 0:
        return True
    bounds = [(0, None) if i in set(q.lb_zero) else (None, None) for i in range(n)]
    res = linprog(np.zeros(n), A_ub=-q.Aineq, b_ub=-q.bineq, bounds=bounds, method="highs")
    return res.status == 0


def _unbounded(q: Qp) -> bool:
    """Is there a recession direction d with Hd=0, Ad>=0, d_lb>=0, c'd<0?"""
    n = q.n
    lbset = set(q.lb_zero)
    bounds = [(0 if i in lbset else -1, 1) for i in range(n)]
    A_ub = -q.Aineq if q.Aineq.shape[0] else None
    b_ub = np.zeros(q.Aineq.shape[0]) if q.Aineq.shape[0] else None
    res = linprog(q.c, A_ub=A_ub, b_ub=b_ub, A_eq=q.H, b_eq=np.zeros(n), bounds=bounds, method="highs")
    scale = 1e-9 * max(1.0, np.linalg.norm(q.c))
    return res.status == 0 and res.fun < -scale


def _equilibrate(q: Qp):
    """Diagonal variable, row and objective scaling; all preserve the solution set."""
    dH = np.abs(np.diag(q.H))
    top = float(dH.max(initial=0.0))
    d = np.ones(q.n)
    if top > 0:
        d = 1.0 / np.sqrt(np.where(dH > 1e-6 * top, dH, top))
    H = q.H * np.outer(d, d)
    c = q.c * d
    sigma = max(float(np.max(np.abs(H), initial=0.0)), float(np.max(np.abs(c), initial=0.0)))
    sigma = sigma if sigma > 0 else 1.0
    A = q.Aineq * d
    rho = np.linalg.norm(A, axis=1)
    rho = np.where(rho > 0, rho, 1.0)
    scaled = Qp(H / sigma, c / sigma, A / rho[:, None], q.bineq / rho, q.lb_zero)
    return scaled, d, sigma, rho


def solve_qp(q: Qp, schedule=DEFAULT_SCHEDULE):
    """Returns (x, duals, diagnostics); duals are [constraint rows, lb_zero bounds]."""
    qs, d, sigma, rho = _equilibrate(q)
    try:
        y, duals, diag = _solve_kkt(qs, schedule)
    except (Infeasible, Unbounded):
        raise
    x = d * y
    m = q.Aineq.shape[0]
    lam = sigma * duals[:m] / rho
    mu = sigma * duals[m:] / d[list(q.lb_zero)]
    grad = q.H @ x + q.c - q.Aineq.T @ lam
    grad[list(q.lb_zero)] -= mu
    slack = q.Aineq @ x - q.bineq
    feas = max(float(-np.min(slack, initial=0.0)), float(-np.min(x[list(q.lb_zero)], initial=0.0)))
    diag = QpDiagnostics(diag.pivots, diag.regularization * sigma,
                         float(np.max(np.abs(grad), initial=0.0)), feas)
    return x, np.concatenate([lam, mu]), diag


def _kkt_residuals(q: Qp, x, lam, mu):
    grad = q.H @ x + q.c - q.Aineq.T @ lam
    lb = list(q.lb_zero)
    grad[lb] -= mu
    slack = q.Aineq @ x - q.bineq
    feas = max(float(-np.min(slack, initial=0.0)), float(-np.min(x[lb], initial=0.0)))
    dual = float(-min(np.min(lam, initial=0.0), np.min(mu, initial=0.0)))
    comp = max(float(np.max(np.abs(lam * slack), initial=0.0)), float(np.max(np.abs(mu * x[lb]), initial=0.0)))
    return float(np.max(np.abs(grad), initial=0.0)), feas, max(dual, comp)


def _polish(q: Qp, x, lam, mu, tol=1e-9):
    """Re-solve the unregularized equality QP on the active set found by Lemke."""
    lb = np.asarray(q.lb_zero, dtype=int)
    act = np.flatnonzero(lam > tol * (1.0 + np.max(lam, initial=0.0)))
    fixed = lb[mu > tol * (1.0 + np.max(mu, initial=0.0))] if lb.size else lb
    n, na, nf = q.n, act.size, fixed.size
    E = np.zeros((nf, n))
    E[np.arange(nf), fixed] = 1.0
    Aa = np.vstack([q.Aineq[act], E])
    K = np.block([[q.H, -Aa.T], [Aa, np.zeros((na + nf, na + nf))]])
    rhs = np.concatenate([-q.c, q.bineq[act], np.zeros(nf)])
    sol = np.linalg.lstsq(K, rhs, rcond=1e-10)[0]
    x2 = sol[:n]
    lam2 = np.zeros_like(lam)
    lam2[act] = sol[n:n + na]
    mu2 = np.zeros_like(mu)
    if lb.size:
        pos = {int(j): i for i, j in enumerate(lb)}
        for k, j in enumerate(fixed):
            mu2[pos[int(j)]] = sol[n + na + k]
    return x2, lam2, mu2


def _solve_kkt(q: Qp, schedule, tol=1e-8):
    hscale = max(float(np.max(np.abs(np.diag(q.H)), initial=0.0)), 1.0)
    checked = False
    if len(q.lb_zero) < q.n:
        schedule = [lam for lam in schedule if lam > 0] or [1e-12]
    best = None
    for lam in schedule:
        lcp, G, nf, lb = _kkt_lcp(q, lam * hscale)
        try:
            sol = solve_lemke(lcp, tikhonov_schedule=(0.0,))
        except MaxPivotsExceeded:
            continue
        except RayTermination:
            if not checked:
                if not _feasible(q):
                    raise Infeasible("constraint set is empty") from None
                if _unbounded(q):
                    raise Unbounded("objective decreases along a feasible recession direction") from None
                checked = True
            continue
        if not verify_solution(lcp, sol, tol).passed:
            continue
        ny = G.shape[1]
        x = G @ sol.z[:ny]
        lam_ineq = sol.z[ny:]
        mu_lb = sol.w[2 * nf:ny]
        cands = [(x, lam_ineq, mu_lb)]
        if lam > 0:
            pol = _polish(q, x, lam_ineq, mu_lb)
            # a near-singular active set can send the re-solve off to huge values
            if np.linalg.norm(pol[0]) <= 10.0 * (1.0 + np.linalg.norm(x)):
                cands.insert(0, pol)
        for cand in cands:
            err = max(_kkt_residuals(q, *cand))
            if best is None or err < best[0]:
                best = (err, cand, sol.pivot_count, lam * hscale)
        if best[0] <= tol:
            break
    if best is None or best[0] > 1e-6:
        if not _feasible(q):
            raise Infeasible("constraint set is empty")
        if best is None:
            raise Unbounded("KKT system has no solution after regularization")
    err, (x, lam_ineq, mu_lb), piv, reg = best
    stat, feas, _ = _kkt_residuals(q, x, lam_ineq, mu_lb)
    return x, np.concatenate([lam_ineq, mu_lb]), QpDiagnostics(piv, reg, stat, feas)


def nullspace_basis(Amat, tol: float = 1e-10, max_dim: int | None = None) -> np.ndarray:
    """Orthonormal kernel basis; singular values <= tol * sigma_max count as zero.

    With max_dim, only the directions with the smallest singular values are kept.
    """
    Amat = np.atleast_2d(np.asarray(Amat, dtype=float))
    ncol = Amat.shape[1]
    if Amat.size == 0:
        W = np.eye(ncol)
        return W if max_dim is None else W[:, :max_dim]
    _, s, Vt = sla.svd(Amat, full_matrices=True)
    sv = np.zeros(ncol)
    sv[:s.size] = s
    smax = sv.max() if sv.size else 0.0
    kernel = np.flatnonzero(sv <= tol * smax) if smax > 0 else np.arange(ncol)
    kernel = kernel[np.argsort(sv[kernel], kind="stable")]
    if max_dim is not None:
        kernel = kernel[:max_dim]
    return Vt[kernel].T.copy()

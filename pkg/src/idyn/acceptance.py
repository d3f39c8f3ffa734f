"""The ten acceptance checks, shared by the test suite and `idyn verify`.

Every check returns a CriterionResult; nothing here raises on a failed
check.  Sizes and seeds default to the values the acceptance suite uses.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from itertools import combinations

import numpy as np
import scipy.linalg as sla

from .harness import ControllerSpec, RunConfig, run_scenario, run_timing_sweep
from .instances import consistent_qdot, random_contacts, random_mechanism, random_state
from .inverse_dynamics import (
    FORMULATIONS,
    IdynRequest,
    estimate_flops_stage1,
    idyn_qp_stage1,
    idyn_qp_stage2,
    solve_idyn,
)
from .lcp_core import Lcp, solve_lemke, solve_ppm, verify_solution
from .multibody import forward_step_rigid

REST_WEIGHT = 47.0882
DT = 1e-3


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.number:2d} {self.name}: {self.detail}"


# ------------------------------------------------------------------ 1

def enumerate_lcp(Q, r, tol=1e-10):
    """Brute force over all 2^a supports; first complementary point wins."""
    a = r.size
    scale = tol * (1.0 + np.max(np.abs(r), initial=0.0))
    for size in range(a + 1):
        for idx in combinations(range(a), size):
            z = np.zeros(a)
            if idx:
                ix = list(idx)
                try:
                    z[ix] = np.linalg.solve(Q[np.ix_(ix, ix)], -r[ix])
                except np.linalg.LinAlgError:
                    continue
            w = Q @ z + r
            if z.min(initial=0.0) >= -scale and w.min(initial=0.0) >= -scale:
                return np.maximum(z, 0.0)
    return None


def solver_equivalence(count=500, seed=0, max_size=8, obj_tol=1e-7, res_tol=1e-8, budget_s=10.0):
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst_obj, worst_res, bad = 0.0, 0.0, 0
    for _ in range(count):
        a = int(rng.integers(1, max_size + 1))
        B = rng.normal(size=(a, a))
        Q = B.T @ B + 0.1 * np.eye(a)
        r = rng.normal(size=a)
        p = Lcp(r, Q)
        lem = solve_lemke(p)
        L = np.linalg.cholesky(Q)
        ppm = solve_ppm(L, np.eye(a), sla.solve_triangular(L, r, lower=True))
        z3 = enumerate_lcp(Q, r)
        if z3 is None:
            bad += 1
            continue
        objs = [0.5 * z @ Q @ z + r @ z for z in (lem.z, ppm.z, z3)]
        gap = max(objs) - min(objs)
        res = max(verify_solution(p, lem).worst, verify_solution(p, ppm).worst)
        worst_obj, worst_res = max(worst_obj, gap), max(worst_res, res)
        if gap > obj_tol or res > res_tol:
            bad += 1
    elapsed = time.perf_counter() - t0
    ok = bad == 0 and elapsed < budget_s
    return CriterionResult(1, "solver oracle equivalence", ok,
                           f"{count} LCPs, {bad} disagreements, worst objective gap {worst_obj:.1e}, "
                           f"worst residual {worst_res:.1e}, {elapsed:.2f} s")


# ------------------------------------------------------------------ 2

FLOP_TARGETS = {
    (18, 16, 4, 4, "plain"): 77729,
    (18, 16, 4, 4, "optimized"): 73163,
    (18, 12, 4, 4, "plain"): 62109,
    (18, 12, 4, 4, "optimized"): 102457,
}


def flop_counts():
    got = {key: estimate_flops_stage1(*key[:4], variant=key[4]) for key in FLOP_TARGETS}
    ok = all(got[k] == v for k, v in FLOP_TARGETS.items())
    detail = ", ".join(f"{k[1]}/{k[4]}={got[k]}" for k in FLOP_TARGETS)
    return CriterionResult(2, "flop counts", ok, detail)


# ------------------------------------------------------------------ 3

def force_prediction(duration=1.0, tol=0.05, rest_tol=1e-3):
    details, ok = [], True
    for scenario, mu in (("resting_box", 0.6), ("sliding_block", 0.3)):
        run = run_scenario(RunConfig(scenario, ControllerSpec("ID_now", "LCP", mu), duration=duration,
                                     timing=False))
        s = run.summary
        rel = s["force_rel_error"]
        good = rel is not None and rel <= tol and s["faults"] == 0
        details.append(f"{scenario} rel err {rel:.2e}")
        if scenario == "resting_box":
            w = s["mean_fN_pred"]
            good = good and abs(w - REST_WEIGHT) <= rest_tol * REST_WEIGHT
            details.append(f"rest force {w:.4f} N")
        ok = ok and good
    return CriterionResult(3, "matched-model force prediction", ok, ", ".join(details))


# ------------------------------------------------------------------ 4

def _friction_for(name, rng):
    return None if name in ("no_slip", "qp_no_slip") else (0.1, 1.0)


def right_inverse(count=200, seed=0, tol=1e-6):
    rng = np.random.default_rng(seed)
    bad = {k: 0 for k in FORMULATIONS}
    worst = {k: 0.0 for k in FORMULATIONS}
    for _ in range(count):
        st = random_state(rng)
        n = int(rng.integers(1, 6))
        for name, (model, friction) in FORMULATIONS.items():
            cs = random_contacts(rng, st, n, mu=_friction_for(name, rng))
            try:
                qd, _ = consistent_qdot(rng, st, cs, DT, model, friction)
                res = solve_idyn(IdynRequest(st, cs, qd, DT), name)
                step = forward_step_rigid(st, cs, res.tau, DT, model=model, friction=friction)
                err = float(np.max(np.abs(step.v_plus - res.v_plus)))
            except Exception:
                err = math.inf
            worst[name] = max(worst[name], err)
            bad[name] += err > tol
    ok = all(v == 0 for v in bad.values())
    detail = ", ".join(f"{k} {bad[k]}/{count} (worst {worst[k]:.1e})" for k in FORMULATIONS)
    return CriterionResult(4, "right inverse", ok, "mismatches " + detail)


# ------------------------------------------------------------------ 5

def dense_no_slip(state, cs, qdot_des, dt, tol=1e-9):
    """Sticking-contact inverse dynamics on the full, possibly dependent, row set.

    Enumerates which normal impulses are active and solves each equality
    system by least squares, so no row selection is involved.
    """
    m, nq, n = state.dof, state.nq, cs.n
    kappa = -dt * state.f_ext - state.M @ state.v
    X = np.vstack([state.P, cs.S, cs.T])
    for size in range(n + 1):
        for act in combinations(range(n), size):
            act = list(act)
            Na = cs.N[act]
            cols = np.hstack([X.T, Na.T])
            c = cols.shape[1]
            K = np.block([[state.M, -cols], [cols.T, np.zeros((c, c))]])
            rhs = np.concatenate([-kappa, qdot_des, np.zeros(2 * n), -cs.phi[act] / dt])
            sol, *_ = np.linalg.lstsq(K, rhs, rcond=1e-12)
            if np.max(np.abs(K @ sol - rhs)) > 1e-9 * (1.0 + np.max(np.abs(rhs))):
                continue
            v = sol[:m]
            fN = sol[m + nq + 2 * n:]
            gaps = cs.N @ v + cs.phi / dt
            scale = tol * (1.0 + np.max(np.abs(sol)))
            if fN.min(initial=0.0) >= -scale and gaps.min(initial=0.0) >= -scale:
                return v, sol[m:m + nq] / dt
    return None


def _determinate_instance(rng, max_tries=200):
    for _ in range(max_tries):
        mech = random_mechanism(rng, rng.choice(["free_body", "legged_body", "planar_chain"]))
        st = random_state(rng, mech)
        n = int(rng.integers(1, 3))
        cs = random_contacts(rng, st, n, mu=None)
        rows = np.vstack([st.P, cs.S, cs.T, cs.N])
        if rows.shape[0] <= st.dof and np.linalg.matrix_rank(rows) == rows.shape[0]:
            return st, cs
    raise RuntimeError("no determinate instance found")


def duplicate_invariance(count=100, seed=0, tol=1e-8):
    from .contact_geometry import build_wrenches
    rng = np.random.default_rng(seed)
    bad, worst = 0, 0.0
    for _ in range(count):
        st, cs = _determinate_instance(rng)
        qd, _ = consistent_qdot(rng, st, cs, DT, "complementarity", "no_slip")
        pts = list(cs.contacts) + [cs.contacts[int(rng.integers(cs.n))] for _ in range(int(rng.integers(1, 4)))]
        dup = build_wrenches(st, pts, cs.k)
        res = solve_idyn(IdynRequest(st, dup, qd, DT), "no_slip")
        ref = dense_no_slip(st, dup, qd, DT)
        if ref is None:
            bad += 1
            continue
        err = max(np.max(np.abs(res.v_plus - ref[0])), np.max(np.abs(res.tau - ref[1]), initial=0.0))
        worst = max(worst, float(err))
        bad += err > tol
    return CriterionResult(5, "duplicated-row invariance", bad == 0,
                           f"{count} sticking-contact instances, {bad} mismatches, worst {worst:.1e}")


# ------------------------------------------------------------------ 6

def support_bound(count=200, seed=5):
    rng = np.random.default_rng(seed)
    names = ("no_slip", "qp", "qp_no_slip")
    viol = {k: 0 for k in names}
    errors = 0
    for _ in range(count):
        st = random_state(rng)
        m = st.dof
        n = int(rng.integers(m + 1, 3 * m + 1))
        for name in names:
            model, friction = FORMULATIONS[name]
            cs = random_contacts(rng, st, n, mu=None if name != "qp" else (0.3, 1.0))
            try:
                qd, _ = consistent_qdot(rng, st, cs, DT, model, friction)
                res = solve_idyn(IdynRequest(st, cs, qd, DT), name)
            except Exception:
                errors += 1
                continue
            positive = int(np.sum(res.f_N > 1e-10 * max(1.0, res.f_N.max())))
            viol[name] += positive > m
    ok = errors == 0 and all(v == 0 for v in viol.values())
    detail = ", ".join(f"{k} {v}" for k, v in viol.items())
    return CriterionResult(6, "support bound", ok, f"violations {detail}; solver errors {errors}")


# ------------------------------------------------------------------ 7

def anti_chatter(duration=1.0, eps=1e-9, ratio=10.0):
    specs = {
        "stage2": ControllerSpec("ID_now", "QP", 0.6),
        "stage1": ControllerSpec("ID_now", "QP", 0.6, stage2=False),
        "warm": ControllerSpec("ID_now", "LCP", math.inf),
        "cold": ControllerSpec("ID_now", "LCP", math.inf, warm_start=False),
    }
    d = {k: run_scenario(RunConfig("resting_box", s, duration=duration, timing=False)).mean_dtau_after(1)
         for k, s in specs.items()}
    smooth = d["stage2"] <= eps and d["warm"] <= eps
    stage1_chatters = d["stage1"] >= ratio * max(d["stage2"], np.finfo(float).tiny)
    cold_chatters = d["cold"] >= ratio * max(d["warm"], np.finfo(float).tiny)
    ok = smooth and stage1_chatters and cold_chatters
    detail = ", ".join(f"{k} {v:.1e}" for k, v in d.items())
    return CriterionResult(7, "anti-chatter", ok, f"E|dtau| after step 1: {detail}")


# ------------------------------------------------------------------ 8

SIM_MODELS = (("complementarity", "pyramid"), ("complementarity", "no_slip"),
              ("complementarity_free", "pyramid"), ("complementarity_free", "no_slip"))


def energy_dissipation(count=1000, seed=0, tol=1e-10):
    rng = np.random.default_rng(seed)
    worst, bad = -math.inf, 0
    for i in range(count):
        st = random_state(rng, speed=2.0)
        model, friction = SIM_MODELS[i % len(SIM_MODELS)]
        cs = random_contacts(rng, st, int(rng.integers(1, 6)), mu=None if friction == "no_slip" else (0.1, 1.0))
        step = forward_step_rigid(st, cs, np.zeros(st.nq), DT, model=model, friction=friction)
        v_free = st.v + DT * st.Mfac.solve(st.f_ext)
        gain = st.kinetic_energy(step.v_plus) - st.kinetic_energy(v_free)
        worst = max(worst, gain)
        bad += gain > tol
    return CriterionResult(8, "energy dissipation", bad == 0,
                           f"{count} impact steps, {bad} energy gains, largest change {worst:.1e} J")


# ------------------------------------------------------------------ 9

def stage2_preservation(count=100, seed=0, tol=1e-8):
    rng = np.random.default_rng(seed)
    done, bad, worst_ke = 0, 0, 0.0
    tries = 0
    while done < count and tries < 20 * count:
        tries += 1
        st = random_state(rng)
        friction = "pyramid" if done % 2 == 0 else "no_slip"
        model = FORMULATIONS["qp" if friction == "pyramid" else "qp_no_slip"][0]
        n = int(rng.integers(2, 7))
        cs = random_contacts(rng, st, n, mu=None if friction == "no_slip" else (0.2, 1.0))
        qd, _ = consistent_qdot(rng, st, cs, DT, model, friction)
        req = IdynRequest(st, cs, qd, DT)
        try:
            r1, rec = idyn_qp_stage1(req, friction)
        except Exception:
            continue
        rank = np.linalg.matrix_rank(rec.Z) if rec.Z.shape[0] else 0
        if rec.Z.shape[1] <= rank:
            continue  # determinate: nothing for the second stage to choose
        r2 = idyn_qp_stage2(rec)
        done += 1
        dke = abs(st.kinetic_energy(r2.v_plus) - st.kinetic_energy(r1.v_plus))
        worst_ke = max(worst_ke, dke)
        bad += dke > tol or np.linalg.norm(r2.tau) > np.linalg.norm(r1.tau) * (1 + 1e-12) + 1e-12
    ok = done == count and bad == 0
    return CriterionResult(9, "stage two preservation", ok,
                           f"{done} indeterminate instances, {bad} violations, worst |dKE| {worst_ke:.1e}")


# ------------------------------------------------------------------ 10

def timing_shape(counts=tuple(range(4, 41, 4)), reps=15, r2_min=0.9, ratio_min=2.0):
    table = run_timing_sweep(RunConfig("resting_box", timing=True), list(counts), reps=reps)
    ns = table["fits"]["no_slip"]
    co = table["fits"]["coulomb_lcp"]
    ratio = co["slope_ratio"] or 0.0
    ok = ns["r2"] >= r2_min and ratio >= ratio_min
    return CriterionResult(10, "timing shape", ok,
                           f"sticking R^2 {ns['r2']:.3f} (slope {ns['slope_us_per_contact']:.1f} us/contact), "
                           f"Coulomb late/early slope ratio {ratio:.1f}, log-log exponent {co['loglog_exponent']:.2f}")


CRITERIA = {
    1: solver_equivalence,
    2: flop_counts,
    3: force_prediction,
    4: right_inverse,
    5: duplicate_invariance,
    6: support_bound,
    7: anti_chatter,
    8: energy_dissipation,
    9: stage2_preservation,
    10: timing_shape,
}


def run_all(selected=None, echo=None):
    out = []
    for k, fn in CRITERIA.items():
        if selected and k not in selected:
            continue
        res = fn()
        out.append(res)
        if echo:
            echo(res.line())
    return out

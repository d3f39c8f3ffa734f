"""Closed-loop scenarios: controllers, simulator loop, metrics and reports."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from .contact_geometry import build_wrenches
from .errors import ConfigError, IdynError, IoError
from .inverse_dynamics import IdynRequest, remap_warm, solve_idyn
from .multibody import (
    Composite,
    FreeBody,
    LeggedBody,
    Mechanism,
    PlanarChain,
    assemble_dynamics,
    box_inertia,
    find_contacts,
    forward_step_compliant,
    forward_step_rigid,
)

CONTROLLER_KINDS = ("PID", "ID_prev1", "ID_prev2", "ID_now")
SOLVERS = ("LCP", "QP")
SIM_MODELS = ("rigid", "rigid_qp", "compliant")
CSV_COLUMNS = ("t", "err_pos_mean", "err_vel_mean", "tau_norm", "dtau_norm",
               "fN_pred_sum", "fN_sim_sum", "pivots", "step_us")

DIVERGED_SPEED = 1e6
BOX_MASS = 4.6049  # plus four 0.05 kg feet: 4.8049 kg in total
HIPS = [(sx * 0.15, sy * 0.08, -0.05) for sx in (1, -1) for sy in (1, -1)]


# ------------------------------------------------------------------ scenarios

@dataclass
class Scenario:
    name: str
    mechanism: Mechanism
    trajectory: Callable  # t -> (q_des, qdot_des) over actuated coordinates
    gains: tuple = (100.0, 10.0, 0.0)
    mu: float = 0.6
    margin: float = 2e-3
    pairs: tuple = ()
    ground: bool = True
    duplicate_to: int = 0  # contact duplication for timing sweeps

    def contacts(self, state, mu):
        pts = find_contacts(state, mu=mu, margin=self.margin, ground=self.ground, pairs=self.pairs)
        if self.duplicate_to and pts:
            pts = [pts[i % len(pts)] for i in range(max(self.duplicate_to, len(pts)))]
        return build_wrenches(state, pts, 4)


def _hold(q0):
    q0 = np.asarray(q0, dtype=float)
    return lambda t: (q0.copy(), np.zeros_like(q0))


def _sinusoid(center, amp, freq, phase=0.0):
    center, amp, phase = (np.asarray(x, dtype=float) for x in (center, amp, phase))
    w = 2 * np.pi * freq

    def traj(t):
        return center + amp * np.sin(w * t + phase), amp * w * np.cos(w * t + phase)
    return traj


def resting_box():
    mech = LeggedBody(BOX_MASS, box_inertia(BOX_MASS, (0.2, 0.1, 0.05)), HIPS,
                      q0=np.r_[0, 0, 0.17, 0, 0, 0, 1, 0, 0, 0, 0])
    return Scenario("resting_box", mech, _hold(np.zeros(4)), mu=0.6)


def sliding_block():
    mass = 4.8049
    corners = [((sx * 0.09, sy * 0.09, -0.04), 0.01) for sx in (1, -1) for sy in (1, -1)]
    mech = FreeBody(mass, box_inertia(mass, (0.1, 0.1, 0.05)), corners, actuated=(0,),
                    q0=np.r_[0, 0, 0.05, 0, 0, 0, 1])
    v_top, ramp = 0.2, 0.5

    def traj(t):
        if t < ramp:
            return np.array([0.5 * v_top * t * t / ramp]), np.array([v_top * t / ramp])
        return np.array([0.5 * v_top * ramp + v_top * (t - ramp)]), np.array([v_top])
    return Scenario("sliding_block", mech, traj, gains=(200.0, 20.0, 0.0), mu=0.3)


def _two_link_ik(anchor, target, l1, l2, elbow=1.0):
    dx, dz = target[0] - anchor[0], target[1] - anchor[1]
    c2 = (dx * dx + dz * dz - l1 * l1 - l2 * l2) / (2 * l1 * l2)
    th2 = elbow * math.acos(max(-1.0, min(1.0, c2)))
    th1 = math.atan2(dz, dx) - math.atan2(l2 * math.sin(th2), l1 + l2 * math.cos(th2))
    return th1, th2


def hopper_1leg():
    a = 0.3
    lengths = (0.25, 0.25)
    base_z = lengths[0] * math.cos(a) + lengths[1] * math.cos(a) + 0.02
    q0 = np.array([0.0, base_z, 0.0, -np.pi / 2 + a, -2 * a])
    mech = PlanarChain(lengths, (0.3, 0.3), floating=True, base_mass=1.0, base_inertia=0.01,
                       base_radius=0.05, name="leg", q0=q0)
    traj = _sinusoid(q0[3:], (0.15, 0.3), 2.0, (0.0, 0.0))
    return Scenario("hopper_1leg", mech, traj, gains=(30.0, 3.0, 0.0), mu=0.8)


def pinch_grasp():
    l1 = l2 = 0.12
    r_box, r_tip = 0.04, 0.02
    left_anchor, right_anchor = (-0.2, 0.2), (0.2, 0.2)
    reach = r_box + r_tip
    left = _two_link_ik(left_anchor, (-reach, r_box), l1, l2, elbow=1.0)
    right = _two_link_ik(right_anchor, (reach, r_box), l1, l2, elbow=-1.0)
    fingers = [
        PlanarChain((l1, l2), (0.2, 0.2), anchor=(left_anchor[0], 0.0, left_anchor[1]),
                    tip_radius=r_tip, name="left", q0=np.array(left)),
        PlanarChain((l1, l2), (0.2, 0.2), anchor=(right_anchor[0], 0.0, right_anchor[1]),
                    tip_radius=r_tip, name="right", q0=np.array(right)),
    ]
    box = FreeBody(0.3, box_inertia(0.3, (0.04, 0.04, 0.04)), [((0.0, 0.0, 0.0), r_box)],
                   name="box", q0=np.r_[0, 0, r_box, 0, 0, 0, 1])
    mech = Composite(fingers + [box])
    lift, freq = 0.01, 1.0
    w = 2 * np.pi * freq

    def traj(t):
        # both fingertips rise and fall together; the right finger mirrors the left
        h = 0.5 * lift * (1 - math.cos(w * t))
        hd = 0.5 * lift * w * math.sin(w * t)
        a1, a2 = _two_link_ik(left_anchor, (-reach, r_box + h), l1, l2, elbow=1.0)
        b1, b2 = _two_link_ik(right_anchor, (reach, r_box + h), l1, l2, elbow=-1.0)
        J = np.array([[-l1 * math.sin(a1) - l2 * math.sin(a1 + a2), -l2 * math.sin(a1 + a2)],
                      [l1 * math.cos(a1) + l2 * math.cos(a1 + a2), l2 * math.cos(a1 + a2)]])
        da = np.linalg.solve(J, [0.0, hd])
        return np.array([a1, a2, b1, b2]), np.r_[da, -da]
    return Scenario("pinch_grasp", mech, traj, gains=(5.0, 0.2, 0.0), mu=1.0,
                    pairs=(("left_link1", "box"), ("right_link1", "box")))


def free_flight():
    q0 = np.array([-np.pi / 2 + 0.3, 0.2])
    mech = PlanarChain((0.3, 0.3), (1.0, 1.0), anchor=(0.0, 0.0, 1.0), name="arm", q0=q0)
    traj = _sinusoid(q0, (0.3, 0.3), 1.0)
    return Scenario("free_flight", mech, traj, gains=(100.0, 10.0, 0.0), ground=False)


SCENARIOS = {f.__name__: f for f in (resting_box, sliding_block, hopper_1leg, pinch_grasp, free_flight)}


def make_scenario(name) -> Scenario:
    try:
        return SCENARIOS[name]()
    except KeyError:
        raise ConfigError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None


# ------------------------------------------------------------------ configuration

def parse_friction(text: str) -> float:
    t = text.strip().lower()
    if t in ("inf", "infinite", "mu=inf"):
        return math.inf
    if t.startswith("mu="):
        t = t[3:]
    try:
        mu = float(t)
    except ValueError:
        raise ConfigError(f"friction must be 'inf' or 'mu=<value>', got {text!r}") from None
    if not mu >= 0:
        raise ConfigError("friction coefficient must be nonnegative")
    return mu



@dataclass
class ControllerSpec:
    kind: str = "ID_now"
    solver: str = "LCP"
    friction: float = math.inf  # controller's friction coefficient; inf means no-slip
    gains: tuple | None = None  # (kp, kv, ki), scalars or per-joint; None takes the scenario's
    dt: float = 1e-3
    stage2: bool = True
    warm_start: bool = True  # carry the no-slip nonbasic set between steps
    mindiff: bool = False  # Coulomb path: pick the solution nearest the previous one

    def __post_init__(self):
        if isinstance(self.friction, str):
            self.friction = parse_friction(self.friction)
        if self.kind not in CONTROLLER_KINDS:
            raise ConfigError(f"controller kind must be one of {CONTROLLER_KINDS}")
        if self.solver not in SOLVERS:
            raise ConfigError(f"solver must be one of {SOLVERS}")
        if not (self.friction >= 0):
            raise ConfigError("friction must be nonnegative or inf")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")

    @property
    def formulation(self) -> str:
        inf = math.isinf(self.friction)
        if self.solver == "LCP":
            return "no_slip" if inf else "coulomb_lcp"
        return "qp_no_slip" if inf else "qp"


@dataclass
class RunConfig:
    scenario: str
    controller: ControllerSpec = field(default_factory=ControllerSpec)
    duration: float = 1.0
    seed: int = 0
    sim: str = "rigid"
    sim_mu: float | None = None  # defaults to the controller's coefficient
    stiffness: float = 47088.2
    damping: float = 500.0
    init_noise: float = 0.0  # std of random initial velocity perturbation
    timing: bool = True  # False writes step_us = 0 for bitwise-reproducible reports

    def __post_init__(self):
        if isinstance(self.controller, dict):
            self.controller = ControllerSpec(**self.controller)
        if self.sim not in SIM_MODELS:
            raise ConfigError(f"sim must be one of {SIM_MODELS}")
        if not self.duration >= 0:
            raise ConfigError("duration must be nonnegative")

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e


# ------------------------------------------------------------------ run record

@dataclass
class ScenarioRun:
    scenario: str
    controller: dict
    t: list = field(default_factory=list)
    err_pos_mean: list = field(default_factory=list)
    err_vel_mean: list = field(default_factory=list)
    tau_norm: list = field(default_factory=list)
    dtau_norm: list = field(default_factory=list)
    fN_pred_sum: list = field(default_factory=list)
    fN_sim_sum: list = field(default_factory=list)
    pivots: list = field(default_factory=list)
    step_us: list = field(default_factory=list)
    faults: list = field(default_factory=list)
    taus: list = field(default_factory=list)
    predicts: bool = True

    def __len__(self):
        return len(self.t)

    @property
    def summary(self) -> dict:
        def mean(x):
            return float(np.mean(x)) if len(x) else 0.0
        pred, sim = np.asarray(self.fN_pred_sum), np.asarray(self.fN_sim_sum)
        loaded = sim > 1e-9
        rel = None
        if self.predicts and np.any(loaded):
            rel = float(np.mean(np.abs(pred[loaded] - sim[loaded]) / sim[loaded]))
        return {
            "steps": len(self.t),
            "mean_err_pos": mean(self.err_pos_mean),
            "mean_err_vel": mean(self.err_vel_mean),
            "mean_dtau": mean(self.dtau_norm),
            "mean_tau": mean(self.tau_norm),
            "force_rel_error": rel,
            "mean_fN_pred": mean(self.fN_pred_sum),
            "mean_fN_sim": mean(self.fN_sim_sum),
            "faults": len(self.faults),
        }

    def mean_dtau_after(self, k: int = 1) -> float:
        d = self.dtau_norm[k:]
        return float(np.mean(d)) if d else 0.0


# ------------------------------------------------------------------ controllers

class Controller:
    """Computes actuator torques from the current (perfectly sensed) state."""

    def __init__(self, spec: ControllerSpec, scenario: Scenario):
        self.spec = spec
        self.scn = scenario
        kp, kv, ki = spec.gains if spec.gains is not None else scenario.gains
        nq = scenario.mechanism.nq
        self.kp, self.kv, self.ki = (np.broadcast_to(np.asarray(g, dtype=float), (nq,)) for g in (kp, kv, ki))
        self.integral = np.zeros(nq)
        self.sensed = []  # generalized contact impulses applied by the simulator, oldest first
        self.sensed_normal = []
        self.prev = None
        self.warm = ()
        self.prev_contacts = None

    def feedback(self, state, t):
        mech = self.scn.mechanism
        qd, vd = self.scn.trajectory(t)
        e = qd - mech.actuated_q(state.q)
        ed = vd - state.P @ state.v
        self.integral += e * self.spec.dt
        return self.kp * e + self.kv * ed + self.ki * self.integral

    def __call__(self, state, t):
        """Returns (tau, predicted normal impulses summed, pivots)."""
        dt = self.spec.dt
        fb = self.feedback(state, t)
        if self.spec.kind == "PID":
            return fb, 0.0, 0
        _, vd_next = self.scn.trajectory(t + dt)
        qdot_cmd = vd_next + dt * fb
        if self.spec.kind == "ID_now":
            return self._predictive(state, qdot_cmd)
        lag = 1 if self.spec.kind == "ID_prev1" else 2
        imp, normal = np.zeros(state.dof), 0.0
        if len(self.sensed) >= lag:
            imp, normal = self.sensed[-lag], self.sensed_normal[-lag]
        sensed_state = replace(state, f_ext=state.f_ext + imp / dt)
        res = solve_idyn(IdynRequest(sensed_state, None, qdot_cmd, dt), "no_slip")
        return res.tau, normal, 0

    def _predictive(self, state, qdot_cmd):
        spec = self.spec
        cs = self.scn.contacts(state, spec.friction)
        # penetration is the simulator's business; correcting it here fights compliant terrain
        cs = replace(cs, phi=np.maximum(cs.phi, 0.0))
        req = IdynRequest(state, cs, qdot_cmd, spec.dt)
        form = spec.formulation
        warm, x_prev = (), None
        if spec.warm_start and form == "no_slip" and self.prev_contacts is not None:
            warm = remap_warm(self.prev_contacts, self.warm, cs)
        if spec.mindiff and form == "coulomb_lcp" and self.prev is not None and cs.n <= 2:
            x_prev = np.concatenate([self.prev.v_plus, self.prev.tau * spec.dt]) \
                if self.prev.v_plus.size == state.dof else None
        res = solve_idyn(req, form, warm=warm, stage2=spec.stage2, x_prev=x_prev)
        self.prev, self.warm, self.prev_contacts = res, res.nonbasic_set, cs
        return res.tau, float(np.sum(res.f_N)), int(res.diagnostics.get("pivots", 0))

    def observe(self, impulse, normal_sum):
        self.sensed.append(impulse)
        self.sensed_normal.append(normal_sum)
        del self.sensed[:-2]
        del self.sensed_normal[:-2]


# ------------------------------------------------------------------ simulation loop

def _simulate(cfg: RunConfig, scn: Scenario, state, tau, mu):
    dt = cfg.controller.dt
    cs = scn.contacts(state, mu)
    if cfg.sim == "compliant":
        return forward_step_compliant(state, cs, tau, dt, cfg.stiffness, cfg.damping)
    friction = "no_slip" if math.isinf(mu) else "pyramid"
    model = "complementarity" if cfg.sim == "rigid" else "complementarity_free"
    return forward_step_rigid(state, cs, tau, dt, model=model, friction=friction)


def run_scenario(config) -> ScenarioRun:
    cfg = config if isinstance(config, RunConfig) else RunConfig.from_dict(dict(config))
    scn = make_scenario(cfg.scenario)
    spec = cfg.controller
    dt = spec.dt
    mech = scn.mechanism
    sim_mu = spec.friction if cfg.sim_mu is None else cfg.sim_mu
    rng = np.random.default_rng(cfg.seed)
    v0 = rng.normal(size=mech.dof) * cfg.init_noise if cfg.init_noise > 0 else np.zeros(mech.dof)
    v0[mech.actuated] += scn.trajectory(0.0)[1]  # start on the desired trajectory
    state = assemble_dynamics(mech, mech.default_q(), v0)
    ctrl = Controller(spec, scn)
    run = ScenarioRun(cfg.scenario, asdict(spec), predicts=spec.kind != "PID")
    steps = int(round(cfg.duration / dt))
    tau_prev = None
    for i in range(steps):
        t = i * dt
        t0 = time.perf_counter()
        try:
            tau, pred, piv = ctrl(state, t)
        except IdynError as e:
            run.faults.append((i, "controller", f"{type(e).__name__}: {e}"))
            tau, pred, piv = (tau_prev if tau_prev is not None else np.zeros(mech.nq)), 0.0, 0
        elapsed = (time.perf_counter() - t0) * 1e6 if cfg.timing else 0.0
        tau = np.asarray(tau, dtype=float)
        try:
            step = _simulate(cfg, scn, state, tau, sim_mu)
            v_plus = step.v_plus
            sim_sum = float(np.sum(step.f_N))
        except IdynError as e:
            run.faults.append((i, "simulator", f"{type(e).__name__}: {e}"))
            v_plus, sim_sum = state.v.copy(), 0.0
        if not np.all(np.isfinite(v_plus)) or np.max(np.abs(v_plus)) > DIVERGED_SPEED:
            run.faults.append((i, "simulator", "state diverged; run stopped"))
            break
        impulse = state.M @ (v_plus - state.v) - dt * (state.f_ext + state.P.T @ tau)
        ctrl.observe(impulse, sim_sum)
        q_next = mech.integrate(state.q, v_plus, dt)
        state = assemble_dynamics(mech, q_next, v_plus)
        qd, vd = scn.trajectory(t + dt)
        run.t.append(t + dt)
        run.err_pos_mean.append(float(np.mean(np.abs(qd - mech.actuated_q(state.q)))))
        run.err_vel_mean.append(float(np.mean(np.abs(vd - state.P @ state.v))))
        run.tau_norm.append(float(np.linalg.norm(tau)))
        run.dtau_norm.append(0.0 if tau_prev is None else float(np.linalg.norm(tau - tau_prev)))
        run.fN_pred_sum.append(pred / dt)
        run.fN_sim_sum.append(sim_sum / dt)
        run.pivots.append(int(piv))
        run.step_us.append(float(elapsed))
        run.taus.append(tau.tolist())
        tau_prev = tau
    return run


# ------------------------------------------------------------------ reports

def emit_report(run: ScenarioRun, path, format: str = "csv"):
    if format not in ("csv", "json"):
        raise ConfigError("format must be csv or json")
    try:
        with open(path, "w", newline="") as fh:
            if format == "csv":
                w = csv.writer(fh)
                w.writerow(CSV_COLUMNS)
                for row in zip(*(getattr(run, c) for c in CSV_COLUMNS)):
                    w.writerow([repr(float(x)) if isinstance(x, float) else x for x in row])
            else:
                doc = {
                    "scenario": run.scenario,
                    "controller": _jsonable(run.controller),
                    "columns": {c: getattr(run, c) for c in CSV_COLUMNS},
                    "faults": [list(f) for f in run.faults],
                    "summary": run.summary,
                }
                json.dump(doc, fh, indent=1, allow_nan=False)
    except OSError as e:
        raise IoError(str(e)) from e
    return path


def _jsonable(d):
    return {k: (str(v) if isinstance(v, float) and not math.isfinite(v) else v) for k, v in d.items()}


# ------------------------------------------------------------------ timing sweep

def _fit_linear(x, y):
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    A = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    ss_res = float(np.sum((A @ coef - y) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return float(coef[0]), float(coef[1]), 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0


def run_timing_sweep(config, contact_counts, formulations=("no_slip", "coulomb_lcp"), reps=15, mu=0.6) -> dict:
    """Controller step time against duplicated contact counts at fixed m.

    Returns {"rows": [...], "fits": {...}}; each row holds the best, median
    and 95th percentile microseconds for one (formulation, n).  Fits use the
    best time, which is the least sensitive to scheduler noise.
    """
    cfg = config if isinstance(config, RunConfig) else RunConfig.from_dict(dict(config))
    rows, fits = [], {}
    for form in formulations:
        xs, meds = [], []
        for n in contact_counts:
            scn = make_scenario(cfg.scenario)
            scn.duplicate_to = int(n)
            state = assemble_dynamics(scn.mechanism)
            fric = math.inf if form in ("no_slip", "qp_no_slip") else mu
            cs = scn.contacts(state, fric)
            if n and cs.n == 0:
                raise ConfigError(f"scenario {cfg.scenario!r} has no contacts to duplicate")
            if n == 0:
                cs = None
            qd = np.zeros(state.nq)
            samples = []
            for _ in range(reps + 1):
                t0 = time.perf_counter()
                solve_idyn(IdynRequest(state, cs, qd, cfg.controller.dt), form)
                samples.append((time.perf_counter() - t0) * 1e6)
            samples = samples[1:]  # first call warms caches
            best = float(np.min(samples))
            rows.append({"formulation": form, "n": int(n), "best_us": best,
                         "median_us": float(np.median(samples)),
                         "p95_us": float(np.percentile(samples, 95))})
            xs.append(n)
            meds.append(best)
        slope, icpt, r2 = _fit_linear(xs, meds)
        # superlinearity: log-log growth exponent between the extreme counts
        pos = [(x, y) for x, y in zip(xs, meds) if x > 0]
        expo = None
        if len(pos) >= 2 and pos[-1][0] > pos[0][0]:
            expo = math.log(pos[-1][1] / pos[0][1]) / math.log(pos[-1][0] / pos[0][0])
        # growth of the marginal cost: slope over the upper half against the lower half
        ratio = None
        if len(xs) >= 4:
            h = len(xs) // 2
            lo = _fit_linear(xs[:h + 1], meds[:h + 1])[0]
            hi = _fit_linear(xs[h:], meds[h:])[0]
            ratio = hi / lo if lo > 0 else None
        fits[form] = {"slope_us_per_contact": slope, "intercept_us": icpt, "r2": r2,
                      "loglog_exponent": expo, "slope_ratio": ratio}
    return {"scenario": cfg.scenario, "rows": rows, "fits": fits}


def emit_timing(table: dict, path):
    try:
        if str(path).endswith(".json"):
            with open(path, "w") as fh:
                json.dump(table, fh, indent=1)
        else:
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                cols = ["formulation", "n", "best_us", "median_us", "p95_us"]
                w.writerow(cols)
                for r in table["rows"]:
                    w.writerow([r[c] for c in cols])
    except OSError as e:
        raise IoError(str(e)) from e
    return path

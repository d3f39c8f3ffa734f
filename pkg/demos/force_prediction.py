"""Predicted against simulated ground force for each controller on the resting table.

Run: python3 demos/force_prediction.py
"""
from idyn import ControllerSpec, RunConfig, run_scenario

CASES = [
    ("PID", "LCP", "inf"),
    ("ID_prev1", "LCP", "inf"),
    ("ID_now", "LCP", "inf"),
    ("ID_now", "LCP", "mu=0.6"),
    ("ID_now", "QP", "mu=0.6"),
]

print(f"{'controller':<28}{'pred N':>10}{'sim N':>10}{'rel err':>11}{'E|dtau|':>11}")
for kind, solver, fric in CASES:
    run = run_scenario(RunConfig("resting_box", ControllerSpec(kind, solver, fric), duration=0.5, timing=False))
    s = run.summary
    rel = "-" if s["force_rel_error"] is None else f"{s['force_rel_error']:.2e}"
    name = f"{kind} {solver} {fric}"
    print(f"{name:<28}{s['mean_fN_pred']:>10.4f}{s['mean_fN_sim']:>10.4f}{rel:>11}{s['mean_dtau']:>11.2e}")

# the same controllers against compliant ground: the model no longer matches exactly
for solver, fric in (("LCP", "mu=0.6"), ("QP", "mu=0.6")):
    cfg = RunConfig("resting_box", ControllerSpec("ID_now", solver, fric), duration=0.5, sim="compliant", timing=False)
    s = run_scenario(cfg).summary
    print(f"compliant sim, ID_now {solver}: rel err {s['force_rel_error']:.2e}, E|dtau| {s['mean_dtau']:.2e}")

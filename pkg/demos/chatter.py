"""Torque smoothness on the resting table with and without a determinate force choice.

Cold-started sticking-contact control re-solves the indeterminate split
from scratch each step; warm starting and the second QP stage both keep it
fixed.  Run: python3 demos/chatter.py
"""
from idyn import ControllerSpec, RunConfig, run_scenario

VARIANTS = {
    "no-slip LCP, warm start": ControllerSpec("ID_now", "LCP", "inf"),
    "no-slip LCP, cold start": ControllerSpec("ID_now", "LCP", "inf", warm_start=False),
    "pyramid QP, both stages": ControllerSpec("ID_now", "QP", "mu=0.6"),
    "pyramid QP, stage one": ControllerSpec("ID_now", "QP", "mu=0.6", stage2=False),
}
for noise in (0.0, 1e-3):
    print(f"initial velocity noise {noise:g}")
    for name, spec in VARIANTS.items():
        run = run_scenario(RunConfig("resting_box", spec, duration=0.5, init_noise=noise, seed=1, timing=False))
        print(f"  {name:<26} E|dtau| after step 1 = {run.mean_dtau_after(1):.3e}")

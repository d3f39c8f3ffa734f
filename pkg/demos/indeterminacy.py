"""How the four formulations split the weight of a four-legged table.

Every split that sums to the weight is physically valid; the formulations
differ in which one they report.  Run: python3 demos/indeterminacy.py
"""
import numpy as np

from idyn import IdynRequest, assemble_dynamics, make_scenario, solve_idyn

scn = make_scenario("resting_box")
state = assemble_dynamics(scn.mechanism)
dt = 1e-3
for form, mu in (("no_slip", np.inf), ("coulomb_lcp", 0.6), ("qp", 0.6), ("qp_no_slip", np.inf)):
    cs = scn.contacts(state, mu)
    res = solve_idyn(IdynRequest(state, cs, np.zeros(state.nq), dt), form)
    feet = " ".join(f"{f:7.3f}" for f in res.f_N / dt)
    print(f"{form:<12} feet [N]: {feet}   sum {res.f_N.sum() / dt:.4f}   |tau| {np.linalg.norm(res.tau):.3f}")

"""Controller step time against contact count (duplicated contacts, fixed m).

Run: python3 demos/timing.py
"""
from idyn import RunConfig, run_timing_sweep

table = run_timing_sweep(RunConfig("resting_box"), list(range(4, 41, 4)), reps=10)
for row in table["rows"]:
    print(f"{row['formulation']:<12} n={row['n']:>3}  best {row['best_us']:8.1f} us")
for form, fit in table["fits"].items():
    print(f"{form}: R^2 {fit['r2']:.3f}, late/early slope ratio {fit['slope_ratio']:.2f}")

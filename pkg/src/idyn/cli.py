"""Command line: `idyn run`, `idyn sweep-timing`, `idyn verify`.

Exit codes: 0 success, 1 configuration or I/O error, 2 failed acceptance check.
"""
from __future__ import annotations

import argparse
import json
import sys

from .errors import ConfigError, IoError
from .harness import parse_friction

CONTROLLERS = {"pid": "PID", "id-now": "ID_now", "id-prev1": "ID_prev1", "id-prev2": "ID_prev2"}


class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors here; argparse would exit with 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def parse_counts(text: str) -> list:
    """'4..40' (step 4 by default), '4..40:2', or '4,8,16'."""
    try:
        if ".." in text:
            span, _, step = text.partition(":")
            lo, hi = (int(x) for x in span.split(".."))
            step = int(step) if step else 4
            if step <= 0 or hi < lo:
                raise ValueError
            return list(range(lo, hi + 1, step))
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad contact counts {text!r}") from None


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e


def _run_config(args):
    from .harness import ControllerSpec, RunConfig
    base = _load_json(args.config) if args.config else {}
    if not isinstance(base, dict):
        raise ConfigError("config file must hold a JSON object")
    ctrl = dict(base.get("controller", {}))
    if args.controller:
        ctrl["kind"] = CONTROLLERS[args.controller]
    if args.solver:
        ctrl["solver"] = args.solver.upper()
    if args.friction is not None:
        ctrl["friction"] = parse_friction(args.friction)
    if args.dt is not None:
        ctrl["dt"] = args.dt
    try:
        ctrl = ControllerSpec(**ctrl)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    cfg = {k: v for k, v in base.items() if k != "controller"}
    for key in ("scenario", "duration", "seed", "sim"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if "scenario" not in cfg:
        raise ConfigError("a scenario is required (--scenario or config file)")
    cfg["controller"] = ctrl
    return RunConfig.from_dict(cfg)


def cmd_run(args):
    from .harness import emit_report, run_scenario
    cfg = _run_config(args)
    if args.no_timing:
        cfg.timing = False
    run = run_scenario(cfg)
    fmt = args.format or ("json" if str(args.out).endswith(".json") else "csv")
    emit_report(run, args.out, fmt)
    s = run.summary
    print(f"{cfg.scenario}: {s['steps']} steps, E|e_pos| {s['mean_err_pos']:.3e}, "
          f"E|dtau| {s['mean_dtau']:.3e}, faults {s['faults']} -> {args.out}")
    return 0


def cmd_sweep(args):
    from .harness import RunConfig, emit_timing, run_timing_sweep
    counts = parse_counts(args.contacts)
    forms = tuple(f.strip() for f in args.formulations.split(","))
    table = run_timing_sweep(RunConfig(args.scenario), counts, formulations=forms, reps=args.reps)
    emit_timing(table, args.out)
    for form, fit in table["fits"].items():
        print(f"{form}: slope {fit['slope_us_per_contact']:.1f} us/contact, R^2 {fit['r2']:.3f}")
    return 0


def cmd_verify(args):
    from .acceptance import run_all
    selected = None
    if args.only:
        try:
            selected = {int(x) for x in args.only.split(",")}
        except ValueError:
            raise ConfigError(f"bad criterion list {args.only!r}") from None
    results = run_all(selected, echo=lambda line: print(line, flush=True))
    failed = [r.number for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed")
    return 2 if failed else 0


def build_parser():
    from .harness import SCENARIOS, SIM_MODELS
    p = _Parser(prog="idyn", description="Inverse dynamics with contact force prediction.")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run one scenario and write a report")
    r.add_argument("--config", help="JSON run configuration; flags override its fields")
    r.add_argument("--scenario", choices=sorted(SCENARIOS))
    r.add_argument("--controller", choices=sorted(CONTROLLERS))
    r.add_argument("--solver", choices=["lcp", "qp"])
    r.add_argument("--friction", help="'inf' or 'mu=<value>'")
    r.add_argument("--sim", choices=SIM_MODELS)
    r.add_argument("--dt", type=float)
    r.add_argument("--duration", type=float)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", required=True)
    r.add_argument("--format", choices=["csv", "json"])
    r.add_argument("--no-timing", action="store_true", help="write step_us = 0 for reproducible files")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep-timing", help="controller step time against contact count")
    s.add_argument("--scenario", default="resting_box", choices=sorted(SCENARIOS))
    s.add_argument("--contacts", default="4..40")
    s.add_argument("--formulations", default="no_slip,coulomb_lcp")
    s.add_argument("--reps", type=int, default=15)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("verify", help="run the acceptance checks")
    v.add_argument("--only", help="comma separated criterion numbers")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, IoError, ValueError, OSError) as e:
        print(f"idyn: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

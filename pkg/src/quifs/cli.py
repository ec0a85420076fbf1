"""Command-line entry points.

Exit codes: 0 on success, 2 when a certification check fails, 3 when
synthesis is infeasible, 1 on usage or input errors.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import io as qio
from . import sim
from .errors import (BudgetInfeasibleError, ConfigError, EmptyNetError,
                     QuifsError, SynthesisError, TableFormatError)
from .synth import certify, evaluate_policy, synthesize

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CERT_FAIL = 2
EXIT_INFEASIBLE = 3


def _parse_point(text: str, dim: int) -> np.ndarray:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise SystemExit(f"cannot parse point {text!r}")
    if len(vals) != dim:
        raise SystemExit(f"expected {dim} coordinates, got {len(vals)}")
    return np.array(vals)


def cmd_synth(args) -> int:
    cfg = qio.load_config(args.config)
    spec = cfg.synthesis
    try:
        pol, events = synthesize(
            cfg.problem, spec.epsilon, spec.kernel,
            sample_box=spec.sample_box, rank_override=spec.rank_override,
            shape_override=spec.shape_override,
            radius_override=spec.radius_override,
            config_hash=cfg.config_hash,
        )
    except (BudgetInfeasibleError, EmptyNetError, SynthesisError) as exc:
        print(f"synthesis failed: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    qio.save_table(pol, args.output)
    if args.log:
        qio.write_log(events, args.log)
    b = pol.budget
    print(f"wrote {args.output}")
    print(f"  epsilon {b.epsilon:g}  h {b.spacing:.6g}  D {b.shape:g}  "
          f"r0 {b.truncation_radius:.4g}  L0 {b.lipschitz_rank:.4g}")
    print(f"  error terms: interpolation {b.interp_term:.3e}  "
          f"saturation {b.saturation_term:.3e}  truncation {b.truncation_term:.3e}")
    print(f"  certified bound {b.certified:.3e} <= {b.epsilon:g}")
    return EXIT_OK


def cmd_eval(args) -> int:
    pol = qio.load_table(args.table)
    x = _parse_point(args.at, pol.dim)
    u = evaluate_policy(pol, x)
    if u is None:
        print("out of domain")
    else:
        print(",".join(repr(float(v)) for v in u))
    return EXIT_OK


def cmd_info(args) -> int:
    pol = qio.load_table(args.table)
    f = pol.field
    b = pol.budget
    info = {
        "dim": f.dim,
        "control_dim": f.control_dim,
        "kernel": pol.kernel.name,
        "spacing": f.spacing,
        "shape_parameter": b.shape,
        "truncation_radius": b.truncation_radius,
        "epsilon": b.epsilon,
        "lipschitz_rank": b.lipschitz_rank,
        "sup_norm": b.sup_norm,
        "error_terms": {
            "interpolation": b.interp_term,
            "saturation": b.saturation_term,
            "truncation": b.truncation_term,
            "certified": b.certified,
        },
        "box_lo_index": [int(v) for v in f.lo],
        "box_shape": list(f.box_shape),
        "points": int(np.prod(f.box_shape)),
        "feasible_points": int(f.feasible.sum()),
        "extended_points": int(f.extended.sum()),
        "config_hash": pol.config_hash,
    }
    print(json.dumps(info, indent=2))
    return EXIT_OK


def cmd_certify(args) -> int:
    pol = qio.load_table(args.table)
    cfg = qio.load_config(args.config)
    if pol.config_hash and cfg.config_hash != pol.config_hash:
        print("warning: config hash differs from the one the table was "
              "synthesized from", file=sys.stderr)
    rep = certify(pol, cfg.problem, grid_div=args.grid_div,
                  max_points=args.max_points, seed=args.seed)
    print(json.dumps({
        "sup_error": rep.sup_error,
        "epsilon": rep.epsilon,
        "checked": rep.n_checked,
        "outside_feasible_set": rep.n_outside,
        "nonconverged": rep.n_nonconverged,
        "passed": rep.passed,
        "worst_state": None if rep.worst_state is None
        else [float(v) for v in rep.worst_state],
    }, indent=2))
    return EXIT_OK if rep.passed else EXIT_CERT_FAIL


def cmd_simulate(args) -> int:
    pol = qio.load_table(args.table)
    cfg = qio.load_config(args.config)
    x0 = _parse_point(args.x0, pol.dim)
    traj = sim.simulate_closed_loop(cfg.problem, pol, x0, args.steps,
                                    disturbance=args.disturbance,
                                    seed=args.seed)
    if args.out:
        sim.trajectory_to_csv(traj, args.out)
    rep = sim.run_report(cfg.problem, traj)
    print(json.dumps(rep.to_dict(), indent=2))
    return EXIT_OK


def cmd_compare(args) -> int:
    pol = qio.load_table(args.table)
    cfg = qio.load_config(args.config)
    x0 = _parse_point(args.x0, pol.dim)
    rep, traj, traj_on = sim.compare_with_online_rhc(
        cfg.problem, pol, x0, args.steps,
        disturbance=args.disturbance, seed=args.seed)
    if args.out:
        sim.twin_csv(traj, traj_on, args.out)
    print(json.dumps(rep.to_dict(), indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="quifs",
        description="Synthesize, inspect, certify and simulate explicit "
                    "feedback lookup tables.")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="synthesize a policy table from a config")
    s.add_argument("config")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--log", help="write the synthesis log (JSON lines)")
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("eval", help="evaluate a table at one state")
    s.add_argument("table")
    s.add_argument("--at", required=True, help="comma-separated coordinates")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("info", help="print table header and budget")
    s.add_argument("table")
    s.set_defaults(fn=cmd_info)

    s = sub.add_parser("certify", help="re-check the sup-error certificate")
    s.add_argument("table")
    s.add_argument("--config", required=True)
    s.add_argument("--grid-div", type=int, default=3)
    s.add_argument("--max-points", type=int, default=2000)
    s.add_argument("--seed", type=int, default=7)
    s.set_defaults(fn=cmd_certify)

    s = sub.add_parser("simulate", help="closed-loop rollout under the table")
    s.add_argument("table")
    s.add_argument("--config", required=True)
    s.add_argument("--x0", required=True)
    s.add_argument("--steps", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--disturbance", choices=["zero", "vertices", "uniform"],
                   default="zero")
    s.add_argument("--out", help="trajectory CSV path")
    s.set_defaults(fn=cmd_simulate)

    s = sub.add_parser("compare", help="twin run against online control")
    s.add_argument("table")
    s.add_argument("--config", required=True)
    s.add_argument("--x0", required=True)
    s.add_argument("--steps", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--disturbance", choices=["zero", "vertices", "uniform"],
                   default="zero")
    s.add_argument("-o", "--out", help="combined twin-run CSV path")
    s.set_defaults(fn=cmd_compare)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, TableFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except QuifsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``mmdpt {gen,lp,simulate,learn,experiment}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .domain import RunConfig, load_config, write_trace
from .env import IndexPolicy, instance_kernels, rollout
from .harness import (LEARNERS, POLICIES, RUNNERS, reference_rate, run_global_attractor,
                      run_optimality_gap, run_regret_suite, write_attractor, write_gap,
                      write_regret, write_suite_summary)
from .learning import kt_bound
from .relaxation import LITERAL, MANDATORY, build_lp, check_solution, extract_policy, solve_lp, write_lp_file

log = logging.getLogger("mmdpt")


def _instance(args):
    rc = load_config(args.config) if args.config else RunConfig()
    return rc, rc.instance(mandatory=args.mode == MANDATORY)


def _out(args, name: str) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out / f"{name}.{args.format}"


def _emit(obj, args, name):
    """Write a summary object as JSON (both formats keep summaries in JSON) and echo it."""
    path = Path(args.out)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / f"{name}.json", "w") as fh:
        json.dump(obj, fh, indent=1)
    print(json.dumps(obj))


def cmd_gen(args):
    rc = load_config(args.config) if args.config else RunConfig()
    for key in ("M", "N", "B", "S_max", "n_frames", "arrival_mean"):
        val = getattr(args, key)
        if val is not None:
            setattr(rc, key, val)
    rc.seed = args.seed
    cfg = rc.instance(mandatory=args.mode == MANDATORY)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_trace(cfg.frames, out / "trace.csv")
    meta = {"M": cfg.M, "N": cfg.N, "B": cfg.B, "S_max": cfg.S_max, "d_max": cfg.d_max,
            "p": cfg.p.tolist(), "seed": args.seed, "n_frames": cfg.frames.n_frames,
            "slots_per_frame": cfg.frames.slots_per_frame, "trace": "trace.csv"}
    import yaml
    with open(out / "instance.yaml", "w") as fh:
        yaml.safe_dump(meta, fh, sort_keys=False)
    print(json.dumps({"instance": str(out / "instance.yaml"), "trace": str(out / "trace.csv")}))


def cmd_lp(args):
    _, cfg = _instance(args)
    model = build_lp(instance_kernels(cfg, args.frame), cfg.p, cfg.B, args.mode)
    sol = solve_lp(model)
    viol = check_solution(model, sol)
    phi = extract_policy(sol)
    path = _out(args, "index_table")
    if args.lp_file:
        Path(args.lp_file).parent.mkdir(parents=True, exist_ok=True)
        write_lp_file(model, args.lp_file)
    rows = [[m + 1, n + 1, s, float(phi[m, n, s])] for m, n, s in np.ndindex(*phi.shape)]
    if args.format == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["m", "n", "s", "index"])
            w.writerows(rows)
    else:
        with open(path, "w") as fh:
            json.dump([dict(zip(("m", "n", "s", "index"), r)) for r in rows], fh)
    print(json.dumps({"value": sol.value, "mode": args.mode, "max_violation": viol,
                      "index_table": str(path)}))


def cmd_simulate(args):
    from .harness import policy_table

    _, cfg = _instance(args)
    tables = [policy_table(args.policy, cfg.with_frame(f), 0, args.mode) for f in range(cfg.frames.n_frames)]
    res = rollout(cfg, IndexPolicy(np.stack(tables), cfg.B, args.policy), args.T,
                  np.random.default_rng(args.seed))
    _emit({"policy": args.policy, "T": args.T, "seed": args.seed,
           "avg_cost": float(res.costs.mean()), "drops": int(res.drops)}, args, "simulate")


def cmd_learn(args):
    _, cfg = _instance(args)
    one = cfg.with_frame(0)
    J = args.j_ref if args.j_ref is not None else reference_rate(one, args.ref_T, mode=args.mode)
    rec = RUNNERS[args.algo](one, args.T, args.prior_strength, np.random.default_rng(args.seed), J,
                             seed=args.seed)
    write_regret([rec], _out(args, "regret"), args.format, args.stride)
    rec.write_episodes(Path(args.out) / "episodes.csv")
    K = rec.regret.n_episodes
    _emit({"algo": args.algo, "T": args.T, "seed": args.seed, "J_ref": J,
           "final_regret": float(rec.regret.regret[-1]), "episodes": K,
           "kt_bound": kt_bound(one, args.T), "kt_ok": K <= kt_bound(one, args.T),
           "mean_episode_compute_s": float(rec.compute_times.mean())}, args, "learn")


def cmd_experiment(args):
    _, cfg = _instance(args)
    seeds = list(range(args.seed, args.seed + args.seeds))
    if args.suite == "gap":
        recs = run_optimality_gap(cfg, args.rho, args.policies, args.T, seeds, mode=args.mode)
        write_gap(recs, _out(args, "gap"), args.format)
        print(json.dumps({"records": len(recs), "out": str(_out(args, "gap"))}))
    elif args.suite == "attractor":
        tuples = np.array(args.track, dtype=np.int64).reshape(-1, 4)
        tuples[:, :2] -= 1  # command line uses 1-based user / AP ids
        trace = run_global_attractor(cfg, tuples, args.T, args.seed, mode=args.mode)
        write_attractor(trace, _out(args, "attractor"), args.format, args.stride)
        print(json.dumps({"convergence": trace.convergence_statistic().tolist(),
                          "final": trace.final.tolist()}))
    else:
        suite = run_regret_suite(cfg, args.algos, args.T, seeds, args.prior_strength, args.j_ref)
        path = _out(args, "regret_checkpoints")
        write_suite_summary(suite, Path(args.out) / "regret_summary.json")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["algo", "seed", "t", "regret"])
            for algo, r in suite.regret.items():
                for i, seed in enumerate(suite.seeds):
                    for t, v in zip(suite.checkpoints, r[i]):
                        w.writerow([algo, seed, int(t), float(v)])
        print(json.dumps({"J_ref": suite.J_ref, "final_mean_regret":
                          {a: float(r[:, -1].mean()) for a, r in suite.regret.items()}}))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="instance config (YAML)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="out")
    common.add_argument("--mode", choices=(LITERAL, MANDATORY), default=MANDATORY)
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mmdpt", description=__doc__, parents=[common])
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen", parents=[common], help="write a synthetic instance and its trace")
    g.add_argument("--M", type=int)
    g.add_argument("--N", type=int)
    g.add_argument("--B", type=int)
    g.add_argument("--S-max", dest="S_max", type=int)
    g.add_argument("--frames", dest="n_frames", type=int)
    g.add_argument("--arrival-mean", dest="arrival_mean", type=float)
    g.set_defaults(func=cmd_gen)

    lp = sub.add_parser("lp", parents=[common], help="solve the relaxation and emit the index table")
    lp.add_argument("--frame", type=int, default=0)
    lp.add_argument("--lp-file", help="also write the model in LP text format")
    lp.set_defaults(func=cmd_lp)

    s = sub.add_parser("simulate", parents=[common], help="known-kernel rollout of an index policy")
    s.add_argument("--policy", choices=POLICIES, default="mmdpt")
    s.add_argument("--T", type=int, default=100_000)
    s.set_defaults(func=cmd_simulate)

    le = sub.add_parser("learn", parents=[common], help="run one learning algorithm")
    le.add_argument("--algo", choices=LEARNERS, default="mmdpt_ts")
    le.add_argument("--T", type=int, default=10_000)
    le.add_argument("--prior-strength", type=float, default=1.0)
    le.add_argument("--j-ref", type=float, help="reference rate (default: long known-kernel rollout)")
    le.add_argument("--ref-T", type=int, default=1_000_000)
    le.add_argument("--stride", type=int, default=100)
    le.set_defaults(func=cmd_learn)

    e = sub.add_parser("experiment", parents=[common], help="gap | attractor | regret suites")
    e.add_argument("suite", choices=("gap", "attractor", "regret"))
    e.add_argument("--T", type=int, default=10_000)
    e.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds from --seed")
    e.add_argument("--rho", type=int, nargs="+", default=[1, 2, 5, 10])
    e.add_argument("--policies", nargs="+", choices=POLICIES, default=list(POLICIES))
    e.add_argument("--algos", nargs="+", choices=LEARNERS, default=list(LEARNERS))
    e.add_argument("--prior-strength", type=float, default=1.0)
    e.add_argument("--j-ref", type=float)
    e.add_argument("--track", type=int, nargs="+", default=[1, 3, 5, 1, 20, 2, 5, 0, 70, 4, 13, 0],
                   help="flattened (user, ap, s, a) tuples, user/AP 1-based")
    e.add_argument("--stride", type=int, default=100)
    e.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Exception as exc:  # reported as a machine-readable object
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.cmd}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

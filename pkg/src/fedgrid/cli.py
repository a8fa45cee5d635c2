"""Command line entry point: ``fedgrid train|eval|simulate|gradcheck|report``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import load_config
from .env import read_pool
from .errors import FedGridError
from .gradcheck import TOLERANCE, corrupted_backward, run_gradcheck
from .runner import load_agents, run_evaluation, run_report, run_simulation, run_training

log = logging.getLogger("fedgrid")


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = run_training(cfg, args.mode, args.seed, args.out, args.episodes)
    R = out.result.reward_matrix(len(out.agents))
    n = max(1, len(R) // 10)
    print(f"trained {args.mode} seed {args.seed}: {out.result.global_step} env steps, "
          f"{len(out.result.federation_steps)} federation rounds")
    print(f"final-10% mean reward per agent: {' '.join(f'{x:.3f}' for x in R[-n:].mean(axis=0))}")
    print(f"wrote {out.rewards_csv}, {out.checkpoint}" + (f", {out.figure}" if out.figure else ""))
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    agents = load_agents(Path(args.checkpoint), cfg)
    s = run_evaluation(cfg, agents, args.n_scenarios, args.out)
    print(f"{s.n} held-out scenarios")
    print(f"  controller: mean {s.mean:.3f}  median {s.median:.3f}  recovered {s.recovered:.1%}")
    print(f"  baseline:   mean {s.base_mean:.3f}  median {s.base_median:.3f}  recovered {s.base_recovered:.1%}")
    return 0


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    scenario = None
    if args.scenario:
        pool = read_pool(args.scenario)
        if not 0 <= args.index < len(pool):
            print(f"error: {args.scenario} has {len(pool)} scenarios, no index {args.index}", file=sys.stderr)
            return 2
        scenario = pool[args.index]
    if args.no_agent:
        agents = None
    elif args.checkpoint:
        agents = load_agents(Path(args.checkpoint), cfg)
    else:
        print("error: pass --checkpoint or --no-agent", file=sys.stderr)
        return 2
    ro = run_simulation(cfg, scenario, agents, Path(args.out))
    print(f"wrote {args.out}: {ro.V.size} rows, recovered={ro.recovered}, "
          f"episodic rewards {' '.join(f'{r:.3f}' for r in ro.rewards)}")
    return 0


def cmd_gradcheck(args) -> int:
    if args.corrupt_backward:
        with corrupted_backward():
            errors = run_gradcheck(args.n_nets, args.seed)
    else:
        errors = run_gradcheck(args.n_nets, args.seed)
    bad = 0
    for name, err in errors.items():
        ok = err < TOLERANCE
        bad += not ok
        print(f"{name:<18} max rel err {err:.3e}  {'ok' if ok else 'FAIL'}")
    return 1 if bad else 0


def cmd_report(args) -> int:
    path = run_report(Path(args.out), plots=not args.no_plots)
    print(Path(path).read_text(encoding="utf-8"), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedgrid", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train agents and write rewards CSV, checkpoint and figure")
    t.add_argument("-c", "--config", help="JSON config (defaults to built-in settings)")
    t.add_argument("--mode", choices=["federated", "decentralized"], default="federated")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--episodes", type=int, help="override train.episodes")
    t.add_argument("--out", help="output directory (default: output.dir from the config)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on held-out scenarios")
    e.add_argument("checkpoint")
    e.add_argument("-c", "--config")
    e.add_argument("--n-scenarios", type=int, help="held-out pool size (default: train.n_test)")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("simulate", help="run one episode and write its voltage trace")
    s.add_argument("-c", "--config")
    s.add_argument("--scenario", help="scenario CSV; omit for an unattacked episode")
    s.add_argument("--index", type=int, default=0, help="row of the scenario file to run")
    s.add_argument("--no-agent", action="store_true", help="zero residual actions")
    s.add_argument("--checkpoint", help="drive the inverters with a trained policy instead")
    s.add_argument("--out", default="trace.csv")
    s.set_defaults(func=cmd_simulate)

    g = sub.add_parser("gradcheck", help="finite-difference check of all analytic gradients")
    g.add_argument("--n-nets", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--corrupt-backward", action="store_true", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("report", help="compare training modes from the reward CSVs in a directory")
    r.add_argument("--out", default="runs")
    r.add_argument("--no-plots", action="store_true")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except FedGridError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

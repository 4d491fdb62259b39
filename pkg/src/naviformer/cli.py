"""Command-line entry point: ``naviformer {generate,train,eval,plan,compare}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .core import read_instances
from .env import write_traces
from .generate import STANDARD_BUDGETS, GenConfig, generate_dataset

log = logging.getLogger("naviformer")


def _gen_config(args) -> GenConfig:
    budget = args.budget if args.budget is not None else STANDARD_BUDGETS.get(args.n, 2.0)
    return GenConfig(n_nodes=args.n, obstacle_count_range=tuple(args.obstacles),
                     budget_T=budget, step_len=args.step, seed=args.seed)


def _add_gen_args(p: argparse.ArgumentParser, n: int, obstacles: tuple[int, int], budget) -> None:
    p.add_argument("--n", type=int, default=n, help="interior nodes per instance")
    p.add_argument("--obstacles", type=int, nargs=2, default=list(obstacles), metavar=("MIN", "MAX"))
    p.add_argument("--budget", type=float, default=budget,
                   help="time budget T (default: standard value for n)")
    p.add_argument("--step", type=float, default=0.02, help="step length")


def cmd_generate(args) -> int:
    cfg = _gen_config(args)
    summary = generate_dataset(cfg, args.count, args.out)
    print(f"wrote {summary.count} instances to {summary.path} (sha256 {summary.sha256})")
    return 0


def cmd_train(args) -> int:
    from .model import ModelConfig
    from .train import TrainConfig, train
    gen = _gen_config(args)
    cfg = TrainConfig(gen=gen, model=ModelConfig.micro() if args.micro else ModelConfig(),
                      batch=args.batch, iterations=args.iterations, lr=args.lr,
                      entropy_weight=args.entropy, advantage_norm=args.advantage_norm, seed=args.seed,
                      checkpoint_every=args.checkpoint_every)
    _, report = train(cfg, args.out, progress=True)
    if report.records:
        last = report.records[-min(100, len(report.records)):]
        print(f"final mean reward {sum(r.mean_reward for r in last) / len(last):.3f} "
              f"over the last {len(last)} iterations")
    print(f"checkpoints in {args.out}")
    return 0


def _load_model(path):
    from .model import load_checkpoint
    if not Path(path).exists():
        raise SystemExit(f"checkpoint not found: {path}")
    model, _ = load_checkpoint(path)
    return model


def _summary(traces) -> str:
    from .bench import node_rate, success_rate
    s, s_se = success_rate(traces)
    nr, nr_se = node_rate(traces)
    return f"success {s:.3f} ± {s_se:.3f}  node rate {nr:.3f} ± {nr_se:.3f}  ({len(traces)} episodes)"


def cmd_eval(args) -> int:
    from .train import evaluate
    model = _load_model(args.checkpoint)
    instances = read_instances(args.instance_file)
    traces = evaluate(model, instances, args.mode, args.seed, per_instance_timing=args.timing)
    for i, (t, inst) in enumerate(zip(traces, instances)):
        t.algorithm = "naviformer"
        t.instance_index = i
        t.num_obstacles = len(inst.obstacles)
    if args.out:
        write_traces(args.out, traces)
    print(_summary(traces))
    return 0


def cmd_plan(args) -> int:
    from .bench import ALGO_NAVIFORMER, run_naviformer, run_two_step
    instances = read_instances(args.instance_file)
    if args.algo == ALGO_NAVIFORMER:
        if not args.checkpoint:
            raise SystemExit("--checkpoint is required for naviformer")
        traces = run_naviformer(_load_model(args.checkpoint), instances, args.seed)
    else:
        traces = run_two_step(instances, args.eps)
    for t in traces:
        t.algorithm = args.algo
    write_traces(args.out, traces)
    print(_summary(traces))
    return 0


def cmd_compare(args) -> int:
    from .bench import AlgorithmSpec, compare
    specs = [AlgorithmSpec.parse(a) for a in args.algo]
    instances = read_instances(args.dataset)
    res = compare(specs, instances, args.out, seed=args.seed, plots=not args.no_plots)
    print(f"{'algorithm':<28} {'success':>15} {'node rate':>15} {'time/inst (s)':>14}")
    for r in res.rows:
        print(f"{r.algorithm:<28} {r.success_rate:>7.3f} ± {r.success_se:.3f} "
              f"{r.node_rate:>7.3f} ± {r.node_se:.3f} {r.mean_wall_time_s:>14.4f}")
    for k in ("comparison", "breakdown", "timing"):
        print(f"{k}: {res.files[k]}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    from .bench import ALGO_NAVIFORMER
    from .baselines import ALGO_TWO_STEP

    ap = argparse.ArgumentParser(prog="naviformer", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a dataset of random instances")
    _add_gen_args(p, 20, (5, 20), None)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="actor-critic training on freshly sampled instances")
    _add_gen_args(p, 10, (3, 6), 1.5)
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--entropy", type=float, default=0.0, help="entropy bonus weight")
    p.add_argument("--advantage-norm", action="store_true")
    p.add_argument("--checkpoint-every", type=int, default=500)
    p.add_argument("--micro", action="store_true", help="tiny model for smoke tests")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="roll out a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--instance-file", required=True)
    p.add_argument("--mode", choices=("greedy", "sample"), default="greedy")
    p.add_argument("--timing", action="store_true", help="time each instance separately")
    p.add_argument("--out", help="trace file to write")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plan", help="plan every instance of a dataset with one algorithm")
    p.add_argument("--algo", choices=(ALGO_NAVIFORMER, ALGO_TWO_STEP), required=True)
    p.add_argument("--instance-file", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--eps", type=float, default=0.3, help="budget slack for the two-step planner")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("compare", help="metrics table, per-obstacle breakdown and plots")
    p.add_argument("--dataset", required=True)
    p.add_argument("--algo", action="append", required=True,
                   help="naviformer=CKPT, two-step-greedy-astar[=EPS] or traces=FILE; repeatable")
    p.add_argument("--out", required=True)
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_compare)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

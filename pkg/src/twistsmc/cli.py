"""Command-line entry point.

Subcommands:
  train-base   fit a feed-forward denoiser to the task's data distribution
  train-twist  learn a twist head (objective cdm or svdd), write checkpoint
  sample       one sampling run (bon | smc | is), JSON record on stdout
  eval-oracle  exact target/tilted tables and KL/TV for a twist checkpoint
  ablate       rerun twist training over values of one training parameter
  sweep        run every cell of a sweep config, streaming CSV rows
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from . import nn
from .bench import build_task, resolve_output, run_experiment, sweep_cells
from .config import load_config
from .diffusion import DenoiserTrainConfig, train_denoiser
from .oracle import ExactOracle, kl, tv
from .smc import BaseProposal, SmcConfig, best_of_n, tilted_proposal, twist_smc
from .training import TrainConfig, time_averaged_target_kl, train
from .twist import ConstantTwist, LearnedTwist, make_twist


def _add_config(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="TOML experiment config")


def cmd_train_base(args) -> int:
    cfg = load_config(args.config)
    task = build_task(cfg)
    dcfg = DenoiserTrainConfig(steps=args.steps, learning_rate=args.lr, seed=args.seed)
    den = train_denoiser(task.data, task.sched, dcfg)
    out = resolve_output(args.out)
    nn.save_checkpoint(out, den.spec, den.params, step=dcfg.steps)
    print(f"wrote denoiser checkpoint to {out}")
    return 0


def cmd_train_twist(args) -> int:
    cfg = load_config(args.config)
    task = build_task(cfg)
    tcfg_kw = dict(cfg.get("training", {}))
    tcfg_kw.setdefault("beta", task.beta)
    tcfg_kw["seed"] = args.seed
    if "hidden" in tcfg_kw:
        tcfg_kw["hidden"] = tuple(tcfg_kw["hidden"])
    if args.steps:
        tcfg_kw["steps"] = args.steps
    tcfg = TrainConfig(**tcfg_kw)
    oracle = ExactOracle(task.den, task.sched) if args.oracle_metrics else None
    result = train(args.objective, task.den, task.sched, task.reward, tcfg, oracle)
    out = resolve_output(args.out)
    head = result.ema_head  # the stabilized copy is the shipped twist
    nn.save_checkpoint(out, head.spec, head.params, step=tcfg.steps)
    if args.metrics:
        _write_metrics(resolve_output(args.metrics), result.metrics)
    last = result.metrics[-1]
    print(f"wrote twist checkpoint to {out} "
          f"(reward_calls={last['reward_calls']}, mean_reward={last['mean_reward']:.4f},"
          f" oracle_kl={last['oracle_kl']:.6f})")
    return 0


def _write_metrics(path: str, metrics: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["step", "wall_ms", "reward_calls", "mean_reward",
                            "oracle_kl", "loss"])
        writer.writeheader()
        for row in metrics:
            writer.writerow({k: row[k] for k in writer.fieldnames})


def cmd_sample(args) -> int:
    cfg = load_config(args.config)
    task = build_task(cfg)
    rng = np.random.default_rng(args.seed)
    r = task.reward
    if args.method == "bon":
        x = best_of_n(args.n, task.den, task.sched, r, rng)
        states, weights = x[None, :], np.ones(1)
        wall_ms = 0.0
    else:
        twist = (make_twist(args.twist, den=task.den, sched=task.sched, r=r,
                            beta=task.beta, seed=args.seed)
                 if args.twist != "none" else ConstantTwist())
        if args.proposal == "base":
            proposal = BaseProposal(task.den, task.sched)
        else:
            _, _, b = args.proposal.partition(":")
            proposal = tilted_proposal(task.data, r, float(b), task.sched)
        ess = 0.0 if args.method == "is" else args.ess_thres
        res = twist_smc(SmcConfig(args.particles, ess, args.t_stop), proposal,
                        twist, task.den, task.sched, rng)
        states, weights, wall_ms = res.states, res.weights, res.wall_ms
    calls = r.calls
    record = {
        "method": args.method,
        "samples": states.tolist(),
        "weights": weights.tolist(),
        "reward_calls": calls,
        "wall_ms": wall_ms,
        "simulated_wall_ms": wall_ms + r.simulated_ms,
    }
    if args.t_stop == 0 or args.method == "bon":
        values = r.batch(states)
        record["mean_reward"] = float(weights @ values)
        record["max_reward"] = float(values.max())
        r.calls = calls
    text = json.dumps(record)
    if args.out:
        with open(resolve_output(args.out), "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return 0


def cmd_eval_oracle(args) -> int:
    cfg = load_config(args.config)
    task = build_task(cfg)
    oracle = ExactOracle(task.den, task.sched)
    if args.checkpoint:
        twist = LearnedTwist.from_checkpoint(resolve_output(args.checkpoint),
                                             task.vocab, task.sched.T)
    else:
        twist = ConstantTwist()
    ts = [args.t] if args.t is not None else list(range(1, task.sched.T + 1))
    for t in ts:
        target = oracle.exact_target(task.reward, task.beta, t)
        base = oracle.exact_base_marginal(t)
        tilted = oracle.exact_tilted(twist.log_psi_batch(oracle.states, t), t)
        print(f"t={t} KL(target||tilted)={kl(target, tilted):.6f} "
              f"KL(target||base)={kl(target, base):.6f} "
              f"TV(target,tilted)={tv(target, tilted):.6f}")
        if args.tables:
            for state, p_star, p_phi in zip(oracle.states, target.probs, tilted.probs):
                if p_star > 0 or p_phi > 0:
                    print("  " + " ".join(map(str, state)) +
                          f"  target={p_star:.6g} tilted={p_phi:.6g}")
    avg = time_averaged_target_kl(oracle, task.reward, task.beta, twist)
    print(f"time-averaged KL(target||tilted) = {avg:.6f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    task = build_task(cfg)
    oracle = ExactOracle(task.den, task.sched)
    values = args.values.split(",")
    for value in values:
        tcfg_kw = dict(cfg.get("training", {}))
        tcfg_kw.setdefault("beta", task.beta)
        tcfg_kw["seed"] = args.seed
        if "hidden" in tcfg_kw:
            tcfg_kw["hidden"] = tuple(tcfg_kw["hidden"])
        field_type = type(getattr(TrainConfig(), args.param))
        tcfg_kw[args.param] = field_type(value) if field_type is not str else value
        result = train(args.objective, task.den, task.sched, task.reward,
                       TrainConfig(**tcfg_kw), oracle)
        out = resolve_output(f"{args.out_prefix}_{args.param}_{value}.csv")
        _write_metrics(out, result.metrics)
        last = result.metrics[-1]
        print(f"{args.param}={value}: final oracle_kl={last['oracle_kl']:.6f} "
              f"mean_reward={last['mean_reward']:.4f} "
              f"reward_calls={last['reward_calls']} -> {out}")
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    try:
        rows = run_experiment(cfg, out_path=args.out, workers=args.workers,
                              json_mirror=args.json or None)
    except Exception as exc:  # a failed cell means a failed sweep
        print(f"sweep failed: {exc}", file=sys.stderr)
        return 1
    print(f"completed {len(rows)} cells "
          f"({len(sweep_cells(cfg))} configured)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="twistsmc", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-base", help="train a learned denoiser")
    _add_config(p)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_train_base)

    p = sub.add_parser("train-twist", help="train a twist head")
    _add_config(p)
    p.add_argument("--objective", choices=["cdm", "svdd"], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", help="CSV path for the training time series")
    p.add_argument("--steps", type=int, default=0, help="override config step count")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-oracle-metrics", dest="oracle_metrics", action="store_false")
    p.set_defaults(fn=cmd_train_twist, oracle_metrics=True)

    p = sub.add_parser("sample", help="run one sampler and print a JSON record")
    _add_config(p)
    p.add_argument("--method", choices=["bon", "smc", "is"], default="smc")
    p.add_argument("--particles", type=int, default=256)
    p.add_argument("--ess-thres", type=float, default=0.5)
    p.add_argument("--t-stop", type=int, default=0)
    p.add_argument("--proposal", default="base", help="base | tilted:BETA")
    p.add_argument("--twist", default="exact", help="exact | mc:M | learned:PATH | none")
    p.add_argument("--n", type=int, default=1, help="best-of-n draw count")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval-oracle", help="exact tables and divergences")
    _add_config(p)
    p.add_argument("--checkpoint", help="twist checkpoint (default: twist == 1)")
    p.add_argument("--t", type=int)
    p.add_argument("--tables", action="store_true", help="dump per-state tables")
    p.set_defaults(fn=cmd_eval_oracle)

    p = sub.add_parser("ablate", help="sweep one training parameter")
    _add_config(p)
    p.add_argument("--param", required=True,
                   help="TrainConfig field, e.g. n_update | mc_samples | positive_sampler")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--objective", choices=["cdm", "svdd"], default="cdm")
    p.add_argument("--out-prefix", default="ablate")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("sweep", help="run a sweep config to CSV")
    _add_config(p)
    p.add_argument("--out", help="override [output].path")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--json", action="store_true", help="also write a JSON mirror")
    p.set_defaults(fn=cmd_sweep)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())

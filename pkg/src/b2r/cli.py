"""Command-line pipeline: generate, filter, realign, train, evaluate, verify, report.

Every option may also come from ``--config file.json`` (keys are the option
names with dashes turned into underscores). Precedence is built-in defaults,
then the config file, then flags. ``B2R_SEED`` supplies the seed when neither
a flag nor the config sets one.

Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as D
from .evaluate import RolloutConfig, evaluate, rollout, write_eval
from .model import ModelConfig, Policy
from .theory import TheoryConfig, assumption1_audit, simulate_theorem1, verify_theorem2, write_report
from .trainer import TrainConfig, train, train_boundary_baseline


class UsageError(Exception):
    pass


MODEL_OPTS = {
    "hidden_dim": 64,
    "n_layers": 2,
    "n_heads": 4,
    "context_len": 3,
    "dropout": 0.1,
}
TRAIN_OPTS = {
    "learning_rate": 1e-4,
    "batch_size": 64,
    "grad_clip_norm": 0.25,
    "steps_per_epoch": 500,
    "epochs": 20,
    "weight_decay": 1e-4,
}

DEFAULTS = {
    "gen-data": {"env": "velocity", "n": 2000},
    "filter": {},
    "realign": {"strategy": "shift", "rand_mode": "discrete"},
    "train": {**MODEL_OPTS, **TRAIN_OPTS},
    "train-boundary": {**MODEL_OPTS, **TRAIN_OPTS, "epsilon": 2.0},
    "rollout": {"env": "velocity", "mode": "sample"},
    "eval": {"env": "velocity", "mode": "sample", "episodes": 20, "seeds": [0, 1, 2], "eps": 0.1},
    "audit": {},
    "verify-theorem1": {"trials": 100_000, "c_max": 1.0},
    "verify-theorem2": {"epsilon": 0.5},
    "report": {},
}
REQUIRED = {
    "gen-data": ["out"],
    "filter": ["data", "kappa", "out"],
    "realign": ["data", "out"],
    "train": ["data", "out"],
    "train-boundary": ["data", "kappa", "out"],
    "rollout": ["ckpt", "kappa", "target_return", "out"],
    "eval": ["ckpt", "kappa", "out"],
    "audit": ["data"],
    "verify-theorem1": ["sigma", "delta", "horizon", "kappa", "out"],
    "verify-theorem2": ["data", "kappa", "out"],
    "report": ["evals", "out"],
}
SEEDED = {"gen-data", "realign", "train", "train-boundary", "rollout", "verify-theorem1"}


def _model_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--hidden-dim", type=int, help="transformer width (default 64)")
    g.add_argument("--n-layers", type=int, help="transformer blocks (default 2)")
    g.add_argument("--n-heads", type=int, help="attention heads (default 4)")
    g.add_argument("--context-len", type=int, help="timesteps per window K (default 3)")
    g.add_argument("--dropout", type=float, help="dropout rate (default 0.1)")
    g = p.add_argument_group("optimiser")
    g.add_argument("--learning-rate", type=float, help="AdamW step size (default 1e-4)")
    g.add_argument("--batch-size", type=int, help="windows per step (default 64)")
    g.add_argument("--grad-clip-norm", type=float, help="global gradient norm cap (default 0.25)")
    g.add_argument("--steps-per-epoch", type=int, help="optimiser steps per epoch (default 500)")
    g.add_argument("--epochs", type=int, help="epochs (default 20)")
    g.add_argument("--weight-decay", type=float, help="decoupled weight decay (default 1e-4)")
    p.add_argument("--loss-csv", help="write the per-step loss curve here")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="b2r", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def cmd(name, help_):
        p = sub.add_parser(name, help=help_, description=help_, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON file of option defaults")
        return p

    p = cmd("gen-data", "generate a behaviour dataset")
    p.add_argument("--env", choices=["velocity", "chain"], help="environment (default velocity)")
    p.add_argument("--n", type=int, help="number of trajectories (default 2000)")
    p.add_argument("--seed", type=int, help="generator seed")
    p.add_argument("--out", help="output dataset (.jsonl; manifest written alongside)")

    p = cmd("filter", "keep trajectories with total cost <= kappa")
    p.add_argument("--data", help="input dataset")
    p.add_argument("--kappa", type=float, help="cost budget")
    p.add_argument("--out", help="output dataset")

    p = cmd("realign", "rewrite cost-to-go so the first token equals the budget")
    p.add_argument("--data", help="input dataset")
    p.add_argument("--strategy", choices=list(D.STRATEGIES), help="realignment strategy (default shift)")
    p.add_argument("--kappa", type=float, help="single budget")
    p.add_argument("--kappas", type=float, nargs="+", help="several budgets: filter, realign and merge per budget")
    p.add_argument("--rand-mode", choices=["discrete", "continuous"], help="cost increments for rand (default discrete)")
    p.add_argument("--subsample", type=float, help="keep this fraction of the result")
    p.add_argument("--seed", type=int, help="seed for rand and subsampling")
    p.add_argument("--out", help="output dataset")

    p = cmd("train", "train the policy on a filtered, realigned dataset")
    p.add_argument("--data", help="realigned dataset")
    p.add_argument("--seed", type=int, help="training seed")
    p.add_argument("--out", help="checkpoint path")
    _model_flags(p)

    p = cmd("train-boundary", "train the same policy on the band of costs around kappa, raw cost-to-go")
    p.add_argument("--data", help="unfiltered dataset")
    p.add_argument("--kappa", type=float, help="band centre")
    p.add_argument("--epsilon", type=float, help="band half-width (default 2)")
    p.add_argument("--seed", type=int, help="training seed")
    p.add_argument("--out", help="checkpoint path")
    _model_flags(p)

    p = cmd("rollout", "run one episode and write its trajectory and token history")
    p.add_argument("--ckpt", help="checkpoint")
    p.add_argument("--env", choices=["velocity", "chain"], help="environment (default velocity)")
    p.add_argument("--kappa", type=float, help="initial cost-to-go")
    p.add_argument("--target-return", type=float, help="initial return-to-go")
    p.add_argument("--mode", choices=["mean", "sample"], help="action selection (default sample)")
    p.add_argument("--seed", type=int, help="action sampling seed")
    p.add_argument("--out", help="output JSON")

    p = cmd("eval", "evaluate a checkpoint over episodes and seeds")
    p.add_argument("--ckpt", help="checkpoint")
    p.add_argument("--env", choices=["velocity", "chain"], help="environment (default velocity)")
    p.add_argument("--kappa", type=float, help="budget")
    p.add_argument("--target-return", type=float, help="initial return-to-go")
    p.add_argument("--data", help="dataset whose best return under kappa sets the target return")
    p.add_argument("--episodes", type=int, help="episodes per seed (default 20)")
    p.add_argument("--seeds", type=int, nargs="+", help="evaluation seeds (default 0 1 2)")
    p.add_argument("--mode", choices=["mean", "sample"], help="action selection (default sample)")
    p.add_argument("--eps", type=float, help="normalised-cost stabiliser (default 0.1)")
    p.add_argument("--task", help="task label for report (default env name)")
    p.add_argument("--method", help="method label for report (default checkpoint stem)")
    p.add_argument("--out", help="summary JSON")
    p.add_argument("--csv", help="per-episode CSV")

    p = cmd("audit", "check a realigned dataset against the alignment conditions")
    p.add_argument("--data", help="realigned dataset")
    p.add_argument("--strategy", choices=list(D.STRATEGIES), help="strategy (default from manifest)")
    p.add_argument("--c-max", type=float, help="per-step cost bound (default from env)")
    p.add_argument("--out", help="optional JSON result")

    p = cmd("verify-theorem1", "Monte Carlo check of the budget safety bound")
    p.add_argument("--sigma", type=float, help="mean absolute per-step cost error")
    p.add_argument("--delta", type=float, help="safety margin")
    p.add_argument("--c-max", type=float, help="per-step cost bound (default 1)")
    p.add_argument("--horizon", type=int, help="episode length")
    p.add_argument("--kappa", type=float, help="budget")
    p.add_argument("--plan-total", type=float, help="planned total cost (default kappa - delta)")
    p.add_argument("--trials", type=int, help="simulated processes (default 100000)")
    p.add_argument("--seed", type=int, help="simulation seed")
    p.add_argument("--out", help="report JSON")

    p = cmd("verify-theorem2", "compare best return over the safe region and the boundary band")
    p.add_argument("--data", help="dataset")
    p.add_argument("--kappa", type=float, help="budget")
    p.add_argument("--epsilon", type=float, help="band half-width (default 0.5)")
    p.add_argument("--out", help="report JSON")

    p = cmd("report", "collect eval summaries into a reward/cost table")
    p.add_argument("--evals", nargs="+", help="eval JSON files")
    p.add_argument("--out", help="output CSV (task, method, reward, cost, safe)")
    return ap


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults < config file < flags; fill the seed from B2R_SEED."""
    cmd = args.command
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    opts = dict(DEFAULTS[cmd])
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        p = Path(cfg_path)
        if not p.exists():
            raise UsageError(f"config file not found: {p}")
        try:
            cfg = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {p} is not valid JSON: {e}") from None
        if not isinstance(cfg, dict):
            raise UsageError(f"config file {p} must hold a JSON object")
        opts.update({k.replace("-", "_"): v for k, v in cfg.items()})
    opts.update(flags)
    if cmd in SEEDED and "seed" not in opts:
        env_seed = os.environ.get("B2R_SEED")
        if env_seed is not None:
            try:
                opts["seed"] = int(env_seed)
            except ValueError:
                raise UsageError(f"B2R_SEED must be an integer, got {env_seed!r}") from None
        else:
            opts["seed"] = 0
    missing = [k for k in REQUIRED[cmd] if opts.get(k) is None]
    if cmd == "realign" and opts.get("kappa") is None and not opts.get("kappas"):
        missing.append("kappa (or kappas)")
    if missing:
        raise UsageError(f"{cmd}: missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return opts


def _input(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"input file not found: {p}")
    return p


def _out(path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _dump(obj, path) -> None:
    _out(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


def _configs(o: dict) -> tuple[ModelConfig, TrainConfig]:
    ds = o["_dataset"]
    at = ds[0]
    mc = ModelConfig(
        state_dim=at.traj.states.shape[1],
        action_dim=at.traj.actions.shape[1],
        hidden_dim=o["hidden_dim"],
        n_heads=o["n_heads"],
        n_layers=o["n_layers"],
        dropout=o["dropout"],
        context_len=o["context_len"],
    )
    if ds.manifest.env != "unknown":
        spec = D.dataset_env(ds.manifest.env).spec
        mc = replace(mc, action_low=spec.action_low, action_high=spec.action_high)
    tc = TrainConfig(**{k: o[k] for k in TRAIN_OPTS}, seed=o["seed"])
    return mc, tc


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(o):
    ds = D.generate_dataset(o["env"], o["n"], o["seed"])
    D.save_dataset(ds, _out(o["out"]))
    _say(f"wrote {len(ds)} trajectories to {o['out']}: {D.cost_summary(ds)}")


def cmd_filter(o):
    ds = D.filter_safe(D.load_dataset(_input(o["data"])), o["kappa"])
    D.save_dataset(ds, _out(o["out"]))
    m = ds.manifest
    _say(f"kept {m.kept} of {m.total} (dropped {m.dropped}) at kappa={m.kappa}")


def cmd_realign(o):
    ds = D.load_dataset(_input(o["data"]))
    if o.get("kappas"):
        out = D.prepare_multi_target(ds, o["kappas"], o["strategy"], o["seed"])
    else:
        spec = D.RealignmentSpec(o["strategy"], o["kappa"], o["seed"], o["rand_mode"])
        out = D.realign_dataset(ds, spec)
    if o.get("subsample") is not None:
        out = D.subsample(out, o["subsample"], o["seed"])
    D.save_dataset(out, _out(o["out"]))
    _say(f"realigned {len(out)} trajectories ({o['strategy']})")


def cmd_train(o):
    ds = D.load_dataset(_input(o["data"]))
    if not len(ds):
        raise ValueError(f"dataset {o['data']} is empty")
    o["_dataset"] = ds
    mc, tc = _configs(o)
    rep = train(ds, mc, tc, checkpoint=_out(o["out"]), loss_csv=o.get("loss_csv"), log=_say)
    _say(f"trained {rep.steps} steps in {rep.wall_time:.1f}s; final loss {rep.losses[-1] if rep.steps else math.nan:.4f}")


def cmd_train_boundary(o):
    ds = D.load_dataset(_input(o["data"]))
    if not len(ds):
        raise ValueError(f"dataset {o['data']} is empty")
    o["_dataset"] = ds
    mc, tc = _configs(o)
    rep = train_boundary_baseline(ds, o["kappa"], o["epsilon"], mc, tc, checkpoint=_out(o["out"]),
                                  loss_csv=o.get("loss_csv"), log=_say)
    _say(f"trained {rep.steps} steps in {rep.wall_time:.1f}s")


def _policy(o) -> Policy:
    p = _input(o["ckpt"])
    return Policy.load(p)


def cmd_rollout(o):
    pol = _policy(o)
    env = D.dataset_env(o["env"])
    cfg = RolloutConfig(kappa=o["kappa"], target_return=o["target_return"], n_episodes=1, action_mode=o["mode"])
    rng = np.random.default_rng(o["seed"]) if o["mode"] == "sample" else None
    ro = rollout(pol, env, cfg, rng)
    tr = ro.traj
    _dump(
        {
            "kappa": o["kappa"],
            "target_return": o["target_return"],
            "states": tr.states.tolist(),
            "actions": tr.actions.tolist(),
            "rewards": tr.rewards.tolist(),
            "costs": tr.costs.tolist(),
            "rtg_tokens": ro.rtg.tolist(),
            "ctg_tokens": ro.ctg.tolist(),
            "final_ctg": ro.final_ctg,
            "return": float(np.sum(tr.rewards)),
            "cost": float(np.sum(tr.costs)),
        },
        o["out"],
    )


def cmd_eval(o):
    pol = _policy(o)
    env = D.dataset_env(o["env"])
    target = o.get("target_return")
    if target is None:
        if not o.get("data"):
            raise UsageError("eval: give --target-return or --data to derive it")
        safe = D.filter_safe(D.load_dataset(_input(o["data"])), o["kappa"])
        if not len(safe):
            raise ValueError(f"no trajectory in {o['data']} has cost <= {o['kappa']}; cannot set a target return")
        target = max(at.total_return for at in safe)
    cfg = RolloutConfig(
        kappa=o["kappa"], target_return=target, n_episodes=o["episodes"], seeds=tuple(o["seeds"]),
        action_mode=o["mode"], epsilon=o["eps"],
    )
    s = evaluate(pol, env, cfg)
    extra = {
        "task": o.get("task") or o["env"],
        "method": o.get("method") or Path(o["ckpt"]).stem,
        "target_return": target,
        "action_mode": o["mode"],
    }
    write_eval(s, _out(o["out"]), _out(o["csv"]) if o.get("csv") else None, extra)
    _say(f"reward {s.normalized_reward:.2f} cost {s.normalized_cost:.3f} violation rate {s.violation_rate:.3f}")


def cmd_audit(o):
    ds = D.load_dataset(_input(o["data"]))
    r = assumption1_audit(ds, c_max=o.get("c_max"), strategy=o.get("strategy"))
    for w in r.warnings:
        _say("warning: " + w)
    if o.get("out"):
        _dump({"ok": r.ok, "index": r.index, "t": r.t, "clause": r.clause, "detail": r.detail,
               "warnings": r.warnings}, o["out"])
    if not r.ok:
        _say(f"audit failed: record {r.index}, t={r.t}, {r.clause}: {r.detail}")
        return 1
    _say("audit passed")
    return 0


def cmd_verify_theorem1(o):
    cfg = TheoryConfig(
        sigma=o["sigma"], delta=o["delta"], c_max=o["c_max"], horizon=o["horizon"], kappa=o["kappa"],
        n_trials=o["trials"], seed=o["seed"], plan_total=o.get("plan_total"),
    )
    r = simulate_theorem1(cfg)
    write_report(r, _out(o["out"]))
    _say(f"violation rate {r.violation_rate:.5f} (allowed {1 - r.prob_bound:.5f}); "
         f"mean cost {r.mean_cost:.5f} (bound {r.expected_bound:.5f})")
    return 0 if r.ok else 1


def cmd_verify_theorem2(o):
    ds = D.load_dataset(_input(o["data"]))
    r = verify_theorem2(ds, o["kappa"], o["epsilon"])
    d = {"kappa": o["kappa"], "epsilon": o["epsilon"], **r.__dict__}
    for k in ("region_max", "boundary_max"):
        if not math.isfinite(d[k]):
            d[k] = None  # empty set
    _dump(d, o["out"])
    return 0 if r.holds else 1


def cmd_report(o):
    rows = []
    for path in o["evals"]:
        d = json.loads(_input(path).read_text(encoding="utf-8"))
        try:
            rows.append([d.get("task", "?"), d.get("method", Path(path).stem), d["normalized_reward"],
                         d["normalized_cost"], int(bool(d["safe"]))])
        except KeyError as e:
            raise ValueError(f"{path} is not an eval summary (missing {e})") from None
    with _out(o["out"]).open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["task", "method", "reward", "cost", "safe"])
        w.writerows(rows)


HANDLERS = {
    "gen-data": cmd_gen_data,
    "filter": cmd_filter,
    "realign": cmd_realign,
    "train": cmd_train,
    "train-boundary": cmd_train_boundary,
    "rollout": cmd_rollout,
    "eval": cmd_eval,
    "audit": cmd_audit,
    "verify-theorem1": cmd_verify_theorem1,
    "verify-theorem2": cmd_verify_theorem2,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on bad flags
    try:
        opts = resolve(args)
        return int(HANDLERS[args.command](opts) or 0)
    except UsageError as e:
        _say(f"usage error: {e}")
        return 2
    except D.DatasetFormatError as e:
        _say(f"dataset format error: {e}")
        return 1
    except (ValueError, ArithmeticError, KeyError) as e:
        _say(f"error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())

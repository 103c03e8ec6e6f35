"""Command-line entry point: train, search, eval, analyze, criterion-dump.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure,
4 infeasible search budget.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import analysis
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config
from .data import IDXError, load_dataset
from .scheduler import unstable_criterion
from .search import InfeasibleBudgetError, PolicyEvaluator, bitops, search, write_trajectory
from .supernet import NumericalError, Policy, Supernet, bn_recalibrate, evaluate
from .trainer import Trainer, calibration_batches, load_model

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_INFEASIBLE = 0, 2, 3, 4

log = logging.getLogger("sharedbit")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# shared helpers


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig().validate()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if getattr(args, "epochs", None) is not None:
        if args.epochs < 1:
            raise ConfigError("--epochs must be >= 1")
        cfg.optimizer.epochs = args.epochs
    if getattr(args, "no_schedule", False):
        cfg.schedule.enabled = False
    if getattr(args, "no_idm", False):
        cfg.idm.enabled = False
    if getattr(args, "no_fairness", False):
        cfg.optimizer.fairness = False
    if getattr(args, "criterion_mode", None):
        cfg.schedule.mode = args.criterion_mode
    return cfg


def out_dir(cfg: RunConfig) -> str:
    path = cfg.out if os.path.isabs(cfg.out) else os.path.join(os.getcwd(), cfg.out)
    os.makedirs(path, exist_ok=True)
    return path


def parse_bits(text: str) -> list[int]:
    try:
        bits = [int(b) for b in text.split(",") if b.strip()]
    except ValueError:
        raise UsageError(f"bad bit list {text!r}; expected e.g. 2,6") from None
    if not bits:
        raise UsageError("empty bit list")
    return bits


def read_policy(spec: str, net: Supernet) -> Policy:
    """``max``, ``min``, ``uniform:B`` or a path to a JSON array of [bw, ba] pairs."""
    space = net.space
    try:
        if spec == "max":
            return space.max_policy()
        if spec == "min":
            return space.min_policy()
        if spec.startswith("uniform:"):
            return space.uniform_policy(int(spec.split(":", 1)[1]))
        with open(spec) as fh:
            raw = json.load(fh)
        if isinstance(raw, dict):
            raw = raw.get("policy")
        policy = Policy.from_json(raw)
        space.validate(policy)
        return policy
    except (OSError, ValueError, TypeError) as err:
        raise UsageError(f"invalid policy {spec!r}: {err}") from None


def dump_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_data(cfg: RunConfig):
    try:
        return load_dataset(cfg.data, cfg.base_dir)
    except (IDXError, KeyError, ValueError, OSError) as err:
        raise ConfigError(f"dataset: {err}") from None


def load_net(cfg: RunConfig, path: str) -> Supernet:
    if not path:
        raise UsageError("--checkpoint is required")
    return load_model(path, cfg)


def search_budget(args, cfg: RunConfig, net: Supernet) -> float:
    if args.budget is not None:
        return args.budget
    if args.budget_bits is not None:
        return bitops(net.space.uniform_policy(args.budget_bits), net.macs)
    if cfg.search.budget is not None:
        return cfg.search.budget
    if cfg.search.budget_bits is not None:
        return bitops(net.space.uniform_policy(int(cfg.search.budget_bits)), net.macs)
    raise UsageError("no BitOps budget: pass --budget, --budget-bits or set search.budget")


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    data = load_data(cfg)
    out = out_dir(cfg)
    ckpt = os.path.join(out, "checkpoint.bin")
    log_path = os.path.join(out, "train_log.csv")
    if args.resume:
        trainer = Trainer.load(args.resume, cfg, data["train"], log_path=log_path)
    else:
        trainer = Trainer(cfg, data["train"], log_path=log_path)
    dump_json(os.path.join(out, "config.json"), cfg.to_dict())
    while trainer.epoch < cfg.optimizer.epochs:
        trainer.run(trainer.epoch + 1)
        trainer.save(ckpt)
    calib = calibration_batches(data["train"], cfg.search.calib_batches, cfg.search.calib_batch_size, cfg.seed)
    report = {}
    for name, policy in (("max", trainer.net.space.max_policy()), ("min", trainer.net.space.min_policy())):
        loss, acc = evaluate(trainer.net, policy, data["val"].x, data["val"].y, bn_recalibrate(trainer.net, policy, calib))
        report[name] = {"loss": loss, "accuracy": acc}
    dump_json(os.path.join(out, "train_summary.json"), {"epochs": trainer.epoch, "steps": trainer.step, "val": report})
    print(f"trained {trainer.epoch} epochs ({trainer.step} steps); checkpoint {ckpt}")
    print(f"val accuracy: max-bit {report['max']['accuracy']:.4f}, min-bit {report['min']['accuracy']:.4f}")
    return EXIT_OK


def _evaluator(cfg: RunConfig, net: Supernet, data) -> PolicyEvaluator:
    val = data["val"]
    n = min(cfg.search.val_size, len(val))
    calib = calibration_batches(data["train"], cfg.search.calib_batches, cfg.search.calib_batch_size, cfg.seed)
    return PolicyEvaluator(net, val.x[:n], val.y[:n], calib, cfg.search.recalibrate)


def cmd_search(args) -> int:
    cfg = resolve_config(args)
    data = load_data(cfg)
    net = load_net(cfg, args.checkpoint)
    budget = search_budget(args, cfg, net)
    if args.no_revisit:
        cfg.search.revisit = False
    ev = _evaluator(cfg, net, data)
    policy, state = search(net.space.max_policy(), cfg.search_config(budget, args.workers), net.space, ev, net.macs)
    out = out_dir(cfg)
    loss, acc = ev.metrics(policy)
    ops = bitops(policy, net.macs)
    dump_json(os.path.join(out, "policy.json"), policy.to_json())
    write_trajectory(os.path.join(out, "trajectory.jsonl"), state)
    print(json.dumps({"loss": loss, "val_accuracy": acc, "bitops": ops, "budget": budget, "steps": state.step, "policy": policy.to_json()}))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    data = load_data(cfg)
    net = load_net(cfg, args.checkpoint)
    policy = read_policy(args.policy, net)
    ds = data[args.split]
    calib = calibration_batches(data["train"], cfg.search.calib_batches, cfg.search.calib_batch_size, cfg.seed)
    loss, acc = evaluate(net, policy, ds.x, ds.y, bn_recalibrate(net, policy, calib))
    report = {"policy": policy.to_json(), "split": args.split, "samples": len(ds), "loss": loss, "accuracy": acc, "bitops": bitops(policy, net.macs)}
    dump_json(os.path.join(out_dir(cfg), "eval.json"), report)
    print(json.dumps(report))
    return EXIT_OK


def cmd_criterion_dump(args) -> int:
    cfg = resolve_config(args)
    net = load_net(cfg, args.checkpoint)
    report = unstable_criterion(net, args.epsilon if args.epsilon is not None else cfg.schedule.epsilon, cfg.schedule.mode)
    path = os.path.join(out_dir(cfg), "criterion.csv")
    with open(path, "w") as fh:
        fh.write(report.to_csv())
    sys.stdout.write(report.to_csv())
    return EXIT_OK


def _regress_one(job):
    bits, seed, steps, lr = job
    return analysis.regress2d(bits, seed=seed, steps=steps, lr=lr)


def cmd_analyze_regress2d(args) -> int:
    bits = parse_bits(args.bits)
    out = out_dir(resolve_config(args))
    jobs = [(bits, args.seed_start + k, args.steps, args.lr) for k in range(args.seeds)]
    with ThreadPoolExecutor(max(1, args.workers)) as pool:
        runs = list(pool.map(_regress_one, jobs))
    tag = "-".join(str(b) for b in sorted(set(bits)))
    rows = []
    for run in runs:
        analysis.write_regress_csv(os.path.join(out, f"regress2d_b{tag}_seed{run.seed}.csv"), run)
        for b in run.bits:
            levels = analysis.brs(b, run.gammas[b])
            rows.append([run.seed, b, repr(float(run.w_star)), repr(float(analysis.gradient_variance(run, b))), analysis.count_boundary_crossings(run.latent, levels)])
    analysis.write_rows(os.path.join(out, f"regress2d_b{tag}_summary.csv"), ["seed", "bit", "w_star", "grad_var", "crossings"], rows)
    print(f"wrote {len(runs)} runs to {out}")
    return EXIT_OK


def cmd_analyze_distance(args) -> int:
    cfg = resolve_config(args)
    data = load_data(cfg)
    trainer = Trainer(cfg, data["train"])
    trace = analysis.weight_distance_trace(trainer.net, args.layer, parse_bits(args.bits), args.every)
    trainer.hooks.append(trace)
    trainer.run()
    path = os.path.join(out_dir(cfg), "distance.csv")
    trace.write_csv(path)
    print(f"wrote {len(trace.rows)} rows to {path}")
    return EXIT_OK


def cmd_analyze_density(args) -> int:
    cfg = resolve_config(args)
    data = load_data(cfg)
    net = load_net(cfg, args.checkpoint)
    x = data["val"].x[: args.samples]
    reports = analysis.output_density(net, args.layer, parse_bits(args.bits), x, args.bins)
    out = out_dir(cfg)
    for r in reports:
        r.write_csv(os.path.join(out, f"density_{r.layer}_{r.bit}.csv"))
    if len(reports) >= 2:
        print(json.dumps({"symmetric_kl": analysis.symmetric_kl(reports[0].probs, reports[-1].probs), "bits": [reports[0].bit, reports[-1].bit]}))
    return EXIT_OK


def cmd_analyze_perturb(args) -> int:
    cfg = resolve_config(args)
    data = load_data(cfg)
    net = load_net(cfg, args.checkpoint)
    high = net.space.uniform_policy(args.high)
    lows = parse_bits(args.low)
    train = data["train"]
    rng = np.random.default_rng(cfg.seed)
    rows = []
    for k in range(args.batches):
        idx = rng.choice(len(train), size=args.batch_size, replace=False)
        for b in lows:
            d = analysis.loss_perturbation_probe(net, high, net.space.uniform_policy(b), train.x[idx], train.y[idx], args.lr)
            rows.append([k, args.high, b, repr(float(args.lr)), repr(float(d))])
    analysis.write_rows(os.path.join(out_dir(cfg), "perturb.csv"), ["batch", "high_bit", "low_bit", "lr", "delta_loss"], rows)
    med = {b: float(np.median([float(r[4]) for r in rows if r[2] == b])) for b in lows}
    print(json.dumps({"median_delta_loss": med}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")

    train_flags = argparse.ArgumentParser(add_help=False)
    train_flags.add_argument("--epochs", type=int)
    train_flags.add_argument("--no-schedule", action="store_true")
    train_flags.add_argument("--no-idm", action="store_true")
    train_flags.add_argument("--no-fairness", action="store_true")
    train_flags.add_argument("--criterion-mode", choices=["literal", "bound"])

    p = argparse.ArgumentParser(prog="sharedbit", description="Weight-sharing mixed-precision quantization")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common, train_flags], help="train the weight-sharing supernet")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("search", parents=[common], help="greedy bit-width search under a BitOps budget")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--budget", type=float)
    s.add_argument("--budget-bits", type=int, help="budget = BitOps of the uniform policy at this bit-width")
    s.add_argument("--no-revisit", action="store_true", help="never accept a policy visited earlier in the search")
    s.set_defaults(func=cmd_search)

    e = sub.add_parser("eval", parents=[common], help="evaluate one policy")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--policy", default="max", help="max | min | uniform:B | path to policy JSON")
    e.add_argument("--split", choices=["train", "val", "test"], default="test")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("criterion-dump", parents=[common], help="write per-layer unstable-weight scores")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--epsilon", type=float)
    c.add_argument("--criterion-mode", choices=["literal", "bound"])
    c.set_defaults(func=cmd_criterion_dump)

    a = sub.add_parser("analyze", help="diagnostic experiments")
    asub = a.add_subparsers(dest="analysis", required=True)
    r = asub.add_parser("regress2d", parents=[common])
    r.add_argument("--bits", default="4")
    r.add_argument("--seeds", type=int, default=20)
    r.add_argument("--seed-start", type=int, default=0)
    r.add_argument("--steps", type=int, default=2000)
    r.add_argument("--lr", type=float, default=0.01)
    r.set_defaults(func=cmd_analyze_regress2d)
    d = asub.add_parser("distance", parents=[common, train_flags])
    d.add_argument("--layer", type=int, required=True)
    d.add_argument("--bits", default="2,6")
    d.add_argument("--every", type=int, default=1)
    d.set_defaults(func=cmd_analyze_distance)
    h = asub.add_parser("density", parents=[common])
    h.add_argument("--checkpoint", required=True)
    h.add_argument("--layer", type=int, required=True)
    h.add_argument("--bits", default="2,6")
    h.add_argument("--bins", type=int, default=64)
    h.add_argument("--samples", type=int, default=500)
    h.set_defaults(func=cmd_analyze_density)
    q = asub.add_parser("perturb", parents=[common])
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--high", type=int, default=6)
    q.add_argument("--low", default="2,5")
    q.add_argument("--batches", type=int, default=20)
    q.add_argument("--batch-size", type=int, default=64)
    q.add_argument("--lr", type=float, default=0.04)
    q.set_defaults(func=cmd_analyze_perturb)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):  # non-finite values raise explicitly
            return args.func(args)
    except (ConfigError, UsageError, CheckpointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except InfeasibleBudgetError as err:
        print(f"infeasible: {err}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())

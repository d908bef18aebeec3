"""Command-line entry point.

Subcommands: ``generate`` (datasets), ``train`` (weights), ``solve``
(iterative refinement with optional multi-start), ``baseline`` (greedy
coloring / direct gradient descent), and ``gradcheck`` (finite-difference
verification of penalties and a toy model).

Exit codes: 0 success, 2 usage, 3 I/O or compatibility, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import tensor as T
from .csp import CspError, build_maxcut, NotEqual
from .data import (
    DataError,
    gen_coloring_dataset,
    gen_maxcut_dataset,
    gen_nurse_dataset,
    load_gset,
    load_instances,
    load_sudoku,
    load_weights,
    save_instances,
    save_weights,
)
from .model import ModelConfig, init_weights
from .penalty import pen_alldiff_atmost, pen_alldiff_exact, pen_cardinality, pen_not_equal
from .solve import (
    Budget,
    direct_sgd_counts,
    greedy_coloring,
    instance_cut_value,
    iterate,
    multi_start,
)
from .tensor import NumericError, Tensor, grad_check
from .train import TrainConfig, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _config_hash(args: argparse.Namespace) -> str:
    blob = json.dumps({k: str(v) for k, v in vars(args).items() if k != "func"},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _model_config(args, index_dim: int = 1) -> ModelConfig:
    return ModelConfig(
        layers=args.layers,
        heads=args.heads,
        d_model=args.d_model,
        select_p=args.p,
        rpe_mode=args.rpe,
        ape_mode=args.ape,
        tau=args.tau,
        sampler=args.sampler,
        dropout=args.dropout,
    )


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.problem == "coloring":
        instances, manifest = gen_coloring_dataset(
            args.count, args.n, args.seed,
            fixed_k=args.fixed_k, pose_at_greedy=args.pose_at_greedy,
        )
    elif args.problem == "nurse":
        instances, _inits, manifest = gen_nurse_dataset(
            args.count, args.days, args.shifts, args.per_shift, args.nurses, args.seed
        )
    elif args.problem == "maxcut":
        instances, manifest = gen_maxcut_dataset(args.count, args.n, args.seed)
    else:
        print(f"unknown problem {args.problem!r}", file=sys.stderr)
        return EXIT_USAGE
    save_instances(instances, out / "instances.jsonl")
    (out / "manifest.txt").write_text(manifest.to_text())
    print(f"wrote {len(instances)} {args.problem} instances to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _load_dataset(args) -> list:
    path = Path(args.dataset)
    if not path.exists():
        raise DataError(f"dataset not found: {path}")
    if path.suffix == ".sudoku" or args.format == "sudoku":
        return load_sudoku(path)
    return load_instances(path)


def cmd_train(args) -> int:
    from .train import AdamW

    instances = _load_dataset(args)
    tcfg = TrainConfig(
        batch_size=args.batch_size,
        epochs=args.epochs,
        lr=args.lr,
        weight_decay=args.weight_decay,
        seed=args.seed,
        grad_clip=args.grad_clip,
    )
    if args.resume:
        weights = load_weights(args.resume)
        mcfg = weights.config
        opt = AdamW(weights, tcfg)
        state_path = Path(str(args.resume) + ".opt.npz")
        if state_path.exists():
            state = np.load(state_path)
            opt.step_count = int(state["step_count"])
            for name in weights.params:
                opt.m[name] = state[f"m::{name}"]
                opt.v[name] = state[f"v::{name}"]
    else:
        mcfg = _model_config(args)
        weights = init_weights(mcfg, instances[0].m, np.random.default_rng(args.seed))
        opt = AdamW(weights, tcfg)
    result = train(instances, mcfg, tcfg, weights=weights, opt=opt, log=print)
    result.load_best()
    save_weights(result.weights, args.out)
    if args.save_opt_state:
        blobs = {"step_count": np.array(opt.step_count)}
        for name in weights.params:
            blobs[f"m::{name}"] = opt.m[name]
            blobs[f"v::{name}"] = opt.v[name]
        np.savez(str(args.out) + ".opt.npz", **blobs)
    print(f"trained {tcfg.epochs} epochs; checkpoint at {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# solve


def cmd_solve(args) -> int:
    weights = load_weights(args.weights)
    instances = _load_dataset(args)
    budget = Budget(
        max_iterations=args.iters,
        time_limit_ms=args.time_ms,
    )
    chash = _config_hash(args)
    solved = 0
    iters_used = []
    out_lines = []
    for idx, inst in enumerate(instances):
        if args.pool > 1:
            report = multi_start(weights, inst, args.pool, budget, seed=args.seed + idx)
        else:
            rng = np.random.default_rng([args.seed + idx, 0])
            init = rng.integers(0, inst.m, size=inst.n)
            for i, v in enumerate(inst.fixed):
                if v is not None:
                    init[i] = v
            report = iterate(weights, inst, init, budget, seed=args.seed + idx)
        rec = {
            "instance": idx,
            "feasible": report.feasible,
            "iterations": report.iterations_used,
            "elapsed_ms": round(report.elapsed_ms, 3),
            "seed": args.seed,
            "config": chash,
        }
        if inst.mode == "maximization":
            rec["objective"] = report.objective
        solved += int(report.feasible)
        iters_used.append(report.iterations_used)
        out_lines.append(rec)

    stream = open(args.report, "w") if args.report else sys.stdout
    try:
        if args.report_format == "csv":
            keys = sorted({k for rec in out_lines for k in rec})
            stream.write(",".join(keys) + "\n")
            for rec in out_lines:
                stream.write(",".join(str(rec.get(k, "")) for k in keys) + "\n")
        else:
            for rec in out_lines:
                stream.write(json.dumps(rec, sort_keys=True) + "\n")
        summary = {
            "summary": True,
            "total": len(instances),
            "solved": solved,
            "pct_solved": round(100.0 * solved / max(1, len(instances)), 2),
            "mean_iterations": round(float(np.mean(iters_used)), 2) if iters_used else 0,
            "seed": args.seed,
            "config": chash,
        }
        stream.write(json.dumps(summary, sort_keys=True) + "\n")
    finally:
        if stream is not sys.stdout:
            stream.close()
    return EXIT_OK


# ---------------------------------------------------------------------------
# baselines


def cmd_baseline(args) -> int:
    chash = _config_hash(args)
    if args.kind == "greedy":
        instances = _load_dataset(args)
        for idx, inst in enumerate(instances):
            edges = [(c.i, c.k) for c in inst.constraints if isinstance(c, NotEqual)]
            _, k_greedy = greedy_coloring(inst.n, edges)
            rec = {"instance": idx, "k_greedy": k_greedy, "k_posed": inst.m,
                   "solved_by_greedy": k_greedy <= inst.m,
                   "seed": args.seed, "config": chash}
            print(json.dumps(rec, sort_keys=True))
        return EXIT_OK
    if args.kind == "direct-sgd":
        instances = _load_dataset(args)
        for idx, inst in enumerate(instances):
            counts = direct_sgd_counts(
                inst, runs=args.runs, steps=args.steps, lr=args.lr, seed=args.seed + idx
            )
            rec = {"instance": idx, "satisfied_mean": float(np.mean(counts)),
                   "satisfied": [int(c) for c in counts],
                   "total_constraints": len(inst.constraints),
                   "seed": args.seed, "config": chash}
            print(json.dumps(rec, sort_keys=True))
        return EXIT_OK
    print(f"unknown baseline {args.kind!r}", file=sys.stderr)
    return EXIT_USAGE


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    ok = True

    def report(name, res):
        nonlocal ok
        ok = ok and res.passed
        print(f"gradcheck {name}: max_rel_err={res.max_rel_err:.3e} "
              f"{'pass' if res.passed else 'FAIL'}")

    rel = Tensor(rng.uniform(0.05, 0.95, size=(4, 3)))
    report("cardinality", grad_check(lambda x: pen_cardinality(x, [0, 1, 2], 1, 2), rel))
    rel3 = Tensor(rng.uniform(0.05, 0.95, size=(3, 3)))
    report("alldiff_exact", grad_check(lambda x: pen_alldiff_exact(x, [0, 1, 2]), rel3))
    rel2 = Tensor(rng.uniform(0.05, 0.95, size=(2, 3)))
    report("alldiff_atmost", grad_check(lambda x: pen_alldiff_atmost(x, [0, 1]), rel2))
    report("not_equal", grad_check(lambda x: pen_not_equal(x, 0, 1), rel2))

    x = Tensor(rng.normal(size=(5,)))
    report("gelu", grad_check(lambda t: T.gelu(t).sum(), x))
    coeff = Tensor(rng.normal(size=5))  # fixed projection, drawn once
    report("softmax", grad_check(lambda t: (T.softmax(t) * coeff).sum(), x))
    return EXIT_OK if ok else 1


# ---------------------------------------------------------------------------
# argument plumbing


def _add_model_args(p):
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--p", type=float, default=0.5, help="variable selection probability")
    p.add_argument("--rpe", choices=["masked", "learned", "none"], default="masked")
    p.add_argument("--ape", choices=["none", "1d", "multi"], default="multi")
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--sampler", choices=["gumbel", "softmax"], default="gumbel")
    p.add_argument("--dropout", type=float, default=0.1)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="csprefine")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a dataset")
    g.add_argument("--problem", required=True, choices=["coloring", "nurse", "maxcut"])
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--n", type=int, default=50, help="vertex count (coloring/maxcut)")
    g.add_argument("--days", type=int, default=10)
    g.add_argument("--shifts", type=int, default=3)
    g.add_argument("--per-shift", type=int, default=3)
    g.add_argument("--nurses", type=int, default=10)
    g.add_argument("--fixed-k", type=int, default=None)
    g.add_argument("--pose-at-greedy", action="store_true")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a refiner")
    t.add_argument("--dataset", required=True)
    t.add_argument("--format", choices=["jsonl", "sudoku"], default="jsonl")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None)
    t.add_argument("--save-opt-state", action="store_true")
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--epochs", type=int, default=100)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--weight-decay", type=float, default=0.01)
    t.add_argument("--grad-clip", type=float, default=None)
    t.add_argument("--seed", type=int, default=0)
    _add_model_args(t)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("solve", help="solve instances with trained weights")
    s.add_argument("--weights", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--format", choices=["jsonl", "sudoku"], default="jsonl")
    s.add_argument("--iters", type=int, default=None)
    s.add_argument("--time-ms", type=float, default=None)
    s.add_argument("--pool", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--report", default=None, help="write report here instead of stdout")
    s.add_argument("--report-format", choices=["jsonl", "csv"], default="jsonl")
    s.set_defaults(func=cmd_solve)

    b = sub.add_parser("baseline", help="non-neural baselines")
    b.add_argument("--kind", required=True, choices=["greedy", "direct-sgd"])
    b.add_argument("--dataset", required=True)
    b.add_argument("--format", choices=["jsonl", "sudoku"], default="jsonl")
    b.add_argument("--runs", type=int, default=1)
    b.add_argument("--steps", type=int, default=10000)
    b.add_argument("--lr", type=float, default=0.1)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_baseline)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except (DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError,) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CspError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

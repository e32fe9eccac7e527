"""Command-line entry point wiring all modules.

Subcommands: analyze, reduce, split, infer, bench, train, select-blocks.
Every output CSV is accompanied by a ``<output>.manifest.json`` recording the
command, flags, seeds, toolkit version, input digests, and timestamp.  Exit
codes: 0 success, 2 validation error, 3 runtime numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, analyzer, archspec, engine, training, weightstore


@dataclass
class RunManifest:
    command: str
    flags: dict
    seeds: list[int]
    version: str
    input_digests: dict[str, str] = field(default_factory=dict)
    timestamp: str = ""

    def write_beside(self, output: Path) -> Path:
        path = Path(str(output) + ".manifest.json")
        path.write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")
        return path


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _data_dir() -> Path:
    return Path(os.environ.get("RRRKIT_DATA_DIR", "."))


def _resolve(path_str: str) -> Path:
    path = Path(path_str)
    if path.is_absolute() or path.exists():
        return path
    candidate = _data_dir() / path
    return candidate if candidate.exists() else path


def _manifest(args, inputs: list[Path]) -> RunManifest:
    flags = {k: v for k, v in vars(args).items() if k != "func" and v is not None}
    for k, v in list(flags.items()):
        if isinstance(v, Path):
            flags[k] = str(v)
    seeds = args.seeds if getattr(args, "seeds", None) else [getattr(args, "seed", 0)]
    return RunManifest(
        command=args.command,
        flags=flags,
        seeds=list(seeds),
        version=__version__,
        input_digests={str(p): _digest(p) for p in inputs if p.exists()},
        timestamp=time.strftime("%Y-%m-%dT%H:%M:%S"),
    )


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _fail_validation(message: str):
    print(f"error: {message}", file=sys.stderr)
    raise SystemExit(2)


def _parse_arch(args) -> archspec.ArchSpec:
    try:
        counts = tuple(int(x) for x in args.arch.split(","))
        if len(counts) != 4:
            raise ValueError("--arch needs four comma-separated block counts")
        plan = None
        if getattr(args, "branches", None):
            if getattr(args, "solve_a", False):
                base = archspec.make_arch(*counts, args.classes, input_side=args.input_side)
                offset = weightstore.solve_budget_offset(base, args.branches)
            else:
                offset = getattr(args, "offset", 0) or 0
            plan = archspec.BranchPlan(
                num_branches=args.branches,
                budget_offset=offset,
                split_phase=getattr(args, "split_phase", 4),
            )
        return archspec.make_arch(*counts, args.classes, plan, input_side=args.input_side)
    except ValueError as err:
        _fail_validation(str(err))


def _arch_flags(parser, classes_default=20):
    parser.add_argument("--arch", required=True, help="block counts x1,x2,x3,x4")
    parser.add_argument("--classes", type=int, default=classes_default)
    parser.add_argument("--input-side", type=int, default=128, dest="input_side")
    parser.add_argument("--branches", type=int, default=None)
    parser.add_argument("--offset", type=int, default=None, help="branch budget offset a")
    parser.add_argument("--solve-a", action="store_true", dest="solve_a",
                        help="solve the smallest budget offset for --branches")
    parser.add_argument("--split-phase", type=int, default=4, dest="split_phase")


def cmd_analyze(args) -> int:
    spec = _parse_arch(args)
    report = analyzer.analyze(spec)
    rows = [
        [report.name, row.phase, row.params, row.flops,
         row.first_block_params, row.first_block_flops,
         report.total_params, report.total_flops]
        for row in report.per_phase
    ]
    rows.append([report.name, "total", "", "", "", "", report.total_params, report.total_flops])
    header = ["name", "phase", "params", "flops", "first_block_params",
              "first_block_flops", "total_params", "total_flops"]
    if args.out:
        out = Path(args.out)
        _write_csv(out, header, rows)
        _manifest(args, []).write_beside(out)
    else:
        writer = csv.writer(sys.stdout)
        writer.writerow(header)
        writer.writerows(rows)
    return 0


def cmd_reduce(args) -> int:
    spec = _parse_arch(args)
    store = weightstore.load(_resolve(args.weights))
    reduced = weightstore.extract_reduced(store, spec, seed=args.seed)
    out = Path(args.out)
    weightstore.save(reduced, out)
    _manifest(args, [_resolve(args.weights)]).write_beside(out)
    return 0


def cmd_split(args) -> int:
    spec = _parse_arch(args)
    if spec.branch_plan is None:
        _fail_validation("split requires --branches")
    store = weightstore.load(_resolve(args.weights))
    split = weightstore.split_kernels(store, spec, seed=args.seed)
    out = Path(args.out)
    weightstore.save(split, out)
    _manifest(args, [_resolve(args.weights)]).write_beside(out)
    return 0


def cmd_infer(args) -> int:
    spec = _parse_arch(args)
    store = weightstore.load(_resolve(args.weights))
    image = np.load(_resolve(args.image)).astype(np.float32)
    prediction = engine.forward(spec, store, image)
    order = np.argsort(prediction.probs)[::-1][: args.topk]
    header = ["class", "prob"]
    rows = [[int(c), f"{prediction.probs[c]:.6f}"] for c in order]
    if args.out:
        out = Path(args.out)
        _write_csv(out, header, rows)
        _manifest(args, [_resolve(args.weights), _resolve(args.image)]).write_beside(out)
    else:
        writer = csv.writer(sys.stdout)
        writer.writerow(header)
        writer.writerows(rows)
    return 0


def cmd_bench(args) -> int:
    spec = _parse_arch(args)
    if args.weights:
        store = weightstore.load(_resolve(args.weights))
        inputs = [_resolve(args.weights)]
    else:
        store = weightstore.init_store(spec, seed=args.seed)
        inputs = []
    granularities = [g.strip() for g in args.granularity.split(",") if g.strip()]
    sparsities = [float(s) for s in args.sparsity.split(",")]
    header = ["granularity", "sparsity", "mean_s", "ci95_s", "n"]
    rows = []
    for seed in args.seeds or [args.seed]:
        sweep = [
            engine.PruneSpec(g, s, seed=seed) for g in granularities for s in sparsities
        ]
        for row in engine.bench_latency(spec, store, sweep, repeats=args.repeats,
                                        warmup=args.warmup):
            rows.append([row.granularity, row.sparsity, f"{row.mean_s:.6g}",
                         f"{row.ci95_s:.6g}", row.n])
    out = Path(args.out)
    _write_csv(out, header, rows)
    _manifest(args, inputs).write_beside(out)
    return 0


def _load_synth(text: str, seed: int, split: str) -> training.Dataset:
    """Parse 'synth:classes x per_class x side' dataset descriptors."""
    if not text.startswith("synth:"):
        _fail_validation(f"unknown dataset {text!r}; use synth:C,N,S")
    try:
        classes, per_class, side = (int(v) for v in text[len("synth:"):].split(","))
    except ValueError:
        _fail_validation("dataset must look like synth:4,20,64")
    return training.synth_dataset(classes, per_class, side, seed, split=split)


def cmd_train(args) -> int:
    spec = _parse_arch(args)
    store = weightstore.load(_resolve(args.weights))
    train_ds = _load_synth(args.data, args.seed, "train")
    test_ds = _load_synth(args.data, args.seed, "test")
    config = training.TrainConfig(
        learning_rate=args.lr,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        epochs=args.epochs,
        ema_window_epochs=args.ema_window,
    )
    if spec.branch_plan is not None:
        store2, curve = training.train_branches(
            spec, store, train_ds, config, seed=args.seed, eval_dataset=test_ds
        )
    else:
        store2, curve = training.train(
            spec, store, train_ds, config, seed=args.seed, eval_dataset=test_ds,
            head_only=args.head_only,
        )
    weightstore.save(store2, Path(args.out))
    curve_path = Path(args.curve)
    _write_csv(
        curve_path,
        ["epoch", "train_acc", "test_acc", "loss"],
        [[e, f"{tr:.6f}", f"{te:.6f}", f"{l:.6f}"] for e, tr, te, l in curve],
    )
    _manifest(args, [_resolve(args.weights)]).write_beside(curve_path)
    return 0


def cmd_select(args) -> int:
    config = training.TrainConfig(
        learning_rate=args.lr, weight_decay=args.weight_decay,
        batch_size=args.batch_size, epochs=args.epochs, ema_window_epochs=0,
    )
    if args.stub_oracle:
        accuracies = []
        with open(_resolve(args.stub_oracle), newline="") as fh:
            for row in csv.DictReader(fh):
                accuracies.append(float(row["accuracy"]))
        it = iter(accuracies)

        def scripted(_spec, _store):
            try:
                return next(it)
            except StopIteration:
                _fail_validation("stub oracle ran out of accuracies")

        train_ds = _load_synth(args.data, args.seed, "train")
        test_ds = _load_synth(args.data, args.seed, "test")
        state = training.forward_block_selection(
            None, (train_ds, test_ds), config, args.epsilon, seed=args.seed,
            train_and_eval=scripted,
        )
        inputs = [_resolve(args.stub_oracle)]
    else:
        if not args.weights:
            _fail_validation("select-blocks needs --weights or --stub-oracle")
        store = weightstore.load(_resolve(args.weights))
        train_ds = _load_synth(args.data, args.seed, "train")
        test_ds = _load_synth(args.data, args.seed, "test")
        state = training.forward_block_selection(
            store, (train_ds, test_ds), config, args.epsilon, seed=args.seed
        )
        inputs = [_resolve(args.weights)]
    out = Path(args.out)
    _write_csv(
        out,
        ["step", "spec_name", "accuracy", "relative_gain", "accepted"],
        [
            [r.step, r.spec_name, f"{r.accuracy:.6f}",
             "" if r.step == 0 else f"{r.relative_gain:.6f}", str(r.accepted).lower()]
            for r in state.history
        ],
    )
    _manifest(args, inputs).write_beside(out)
    print(state.current_spec.name)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rrrkit", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="parameter/FLOP accounting CSV")
    _arch_flags(p)
    p.add_argument("-o", "--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("reduce", help="extract a reduced spec's tensors from a template store")
    _arch_flags(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_reduce)

    p = sub.add_parser("split", help="split tail kernels into branches")
    _arch_flags(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("infer", help="single-image inference, top-k CSV")
    _arch_flags(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True, help=".npy file with a (3, H, W) image")
    p.add_argument("--topk", type=int, default=3)
    p.add_argument("-o", "--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", help="pruning-granularity latency benchmark CSV")
    _arch_flags(p)
    p.add_argument("--weights", default=None, help="optional store; default seeded synthetic")
    p.add_argument("--granularity", default="block,channel,element")
    p.add_argument("--sparsity", default="0,0.3,0.6,0.9")
    p.add_argument("--repeats", type=int, default=100)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=lambda s: [int(x) for x in s.split(",")], default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("train", help="train a spec on a synthetic dataset")
    _arch_flags(p, classes_default=4)
    p.add_argument("--weights", required=True)
    p.add_argument("--data", default="synth:4,20,64")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=0.01, dest="weight_decay")
    p.add_argument("--batch-size", type=int, default=32, dest="batch_size")
    p.add_argument("--ema-window", type=int, default=0, dest="ema_window")
    p.add_argument("--head-only", action="store_true", dest="head_only")
    p.add_argument("--out", required=True)
    p.add_argument("--curve", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("select-blocks", help="greedy forward block selection")
    p.add_argument("--epsilon", type=float, default=0.01)
    p.add_argument("--weights", default=None)
    p.add_argument("--stub-oracle", default=None, dest="stub_oracle",
                   help="CSV with an 'accuracy' column consumed per training round")
    p.add_argument("--data", default="synth:4,8,64")
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=0.01, dest="weight_decay")
    p.add_argument("--batch-size", type=int, default=32, dest="batch_size")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_select)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SystemExit:
        raise
    except (ValueError, KeyError, OSError, weightstore.FormatError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (FloatingPointError, ArithmeticError, RuntimeError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

"""``coda`` command line: route, train, bench, flops, heatmap, verify.

Exit codes: 0 success, 1 usage error, 2 verification failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench, checkpoint, heatmap, tensor, verify
from .flops import count_flops
from .layer import AdapterVariant, AttentionVariant, CodaConfig
from .router import RouterVariant
from .soft_topk import CapacityError, EpsSchedule, capacity, oracle_bisection, soft_topk
from .training import DivergenceError, SyntheticTask, TrainConfig, toy_config, train

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_IO = 0, 1, 2, 3

class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# config handling

LAYER_FLAGS = {
    "n": int, "d": int, "heads": int, "d_ffn": int, "d_adpt": int, "r": float, "k": int,
    "eps0": float, "eps_target": float, "beta": float, "T": int, "lora_rank": int, "lora_alpha": float,
}
VARIANT_FLAGS = {
    "attention_variant": [v.value for v in AttentionVariant],
    "router_variant": [v.value for v in RouterVariant],
    "adapter_variant": [v.value for v in AdapterVariant],
}


def _add_layer_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("layer config (flags override --config)")
    for name, typ in LAYER_FLAGS.items():
        g.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ)
    for name, choices in VARIANT_FLAGS.items():
        g.add_argument(f"--{name.split('_')[0]}", dest=name, choices=choices)


def _read_json(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a JSON object")
    unknown = set(data) - {"layer", "task", "train"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    return data


def _layer_fields(args, section: dict) -> dict:
    fields = dict(section)
    for name in list(LAYER_FLAGS) + list(VARIANT_FLAGS):
        value = getattr(args, name, None)
        if value is not None:
            fields[name] = value
    if "k" in fields and getattr(args, "r", None) is not None:
        fields.pop("k")
    if "r" in fields and getattr(args, "k", None) is not None:
        fields.pop("r")
    return fields


def build_layer_config(args, section: dict, base: CodaConfig | None = None) -> CodaConfig:
    fields = _layer_fields(args, section)
    try:
        if base is not None:
            if "r" in fields or "k" in fields:
                base = dataclasses.replace(base, r=None, k=None)
            return dataclasses.replace(base, **fields) if fields else base
        return CodaConfig.from_dict(fields)
    except TypeError as exc:
        raise UsageError(f"incomplete layer config: {exc}") from exc


def _dataclass_from(cls, section: dict, overrides: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise UsageError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    merged = {**section, **{k: v for k, v in overrides.items() if v is not None}}
    return cls(**merged)


# ---------------------------------------------------------------------------
# subcommands


def cmd_route(args) -> int:
    scores = tensor.read_tensor(args.scores)
    n = scores.shape[-1]
    k = args.k if args.k is not None else capacity(n, args.r)
    if not 1 <= k <= n:
        raise CapacityError(f"k={k} outside [1, {n}]")
    sched = EpsSchedule(args.eps0, args.eps_target, args.beta, args.T)
    result = soft_topk(scores, k, sched)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["row", "index", "score", "lambda", "a", "residual", "oracle_lambda", "oracle_delta"])
    for r, s in enumerate(scores):
        oracle = oracle_bisection(s, k, sched.eps_target).lam
        for i in range(n):
            lam = float(result.lam[r, i])
            writer.writerow([r, i, repr(float(s[i])), repr(lam), repr(float(result.a[r])),
                             repr(float(result.constraint_residual[r])), repr(float(oracle[i])),
                             repr(abs(lam - float(oracle[i])))])
    if args.out:
        Path(args.out).write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_train(args) -> int:
    config = _read_json(args.config)
    base = toy_config(args.router_variant or config.get("layer", {}).get("router_variant", RouterVariant.SOFT_TOPK))
    cfg = build_layer_config(args, config.get("layer", {}), base)
    task_section = config.get("task", {})
    task = _dataclass_from(SyntheticTask, task_section,
                           {"n": cfg.n, "d": cfg.d, "seed": args.seed, "relevant_count": args.relevant_count})
    tc = _dataclass_from(TrainConfig, config.get("train", {}), {
        "steps": args.steps, "lr": args.lr, "seed": args.seed, "optimizer": args.optimizer,
        "eval_interval": args.eval_interval, "layers": args.layers,
    })
    result = train(task, cfg, tc)
    Path(args.metrics).write_text(verify.trace_csv(result.trace))
    if args.checkpoint:
        checkpoint.save(args.checkpoint, result.model, cfg,
                        {"task": dataclasses.asdict(task), "train": dataclasses.asdict(tc)})
    final = result.final
    print(f"step={final['step']} accuracy={final['accuracy']:.4f} recall={final['recall']:.4f} "
          f"eval_loss={final['eval_loss']:.4f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    spec = bench.load_spec(args.spec) if args.spec else bench.default_spec()
    if args.repetitions is not None:
        spec.repetitions = args.repetitions
    rows = bench.run(spec)
    out = args.out or spec.output
    text = bench.to_csv(rows)
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_flops(args) -> int:
    config = _read_json(args.config)
    cfg = build_layer_config(args, config.get("layer", {}))
    report = count_flops(cfg)
    lines = ["field,value"] + [f"{k},{v}" for k, v in report.as_dict().items()]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_heatmap(args) -> int:
    model, cfg, _ = checkpoint.load(args.checkpoint)
    fixture = heatmap.load_fixture(args.fixture)
    layers = [int(v) for v in args.layers.split(",")] if args.layers else list(range(len(model.layers)))
    try:
        paths = heatmap.write_heatmaps(model, cfg, fixture, layers, args.out)
    except IndexError as exc:
        raise UsageError(str(exc)) from exc
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_verify(args) -> int:
    results = verify.run_all(include_training=not args.skip_training, training_steps=args.training_steps)
    for r in results:
        print(r.line())
    if args.out:
        Path(args.out).write_text(verify.results_csv(results))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_VERIFY if failed else EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="coda", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("route", help="soft top-k weights of each score row, next to the bisection oracle")
    p.add_argument("--scores", required=True, help="tensor text file, one score vector per row")
    cap = p.add_mutually_exclusive_group(required=True)
    cap.add_argument("--k", type=int)
    cap.add_argument("--r", type=float)
    p.add_argument("--eps0", type=float, default=4.0)
    p.add_argument("--eps-target", type=float, default=0.03)
    p.add_argument("--beta", type=float, default=0.7)
    p.add_argument("--T", type=int, default=20)
    p.add_argument("--out")
    p.set_defaults(func=cmd_route)

    p = sub.add_parser("train", help="train on the planted-relevance task")
    p.add_argument("--config", help="JSON with optional 'layer', 'task' and 'train' sections")
    p.add_argument("--metrics", required=True, help="CSV path for the metrics trace")
    p.add_argument("--checkpoint")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--optimizer", choices=["adam", "momentum"])
    p.add_argument("--eval-interval", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--relevant-count", type=int)
    _add_layer_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", help="wall-clock and FLOPs sweep")
    p.add_argument("--spec", help=f"JSON BenchSpec; parallelism from ${bench.THREADS_ENV}")
    p.add_argument("--out")
    p.add_argument("--repetitions", type=int)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("flops", help="closed-form multiply-add report")
    p.add_argument("--config")
    p.add_argument("--out")
    _add_layer_flags(p)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("heatmap", help="routing weights of a checkpoint as PGM images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fixture", required=True, help="tensor text n x d, optional '# grid H W' line")
    p.add_argument("--layers", help="comma-separated layer indices (default: all)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("verify", help="run the property and oracle suite")
    p.add_argument("--out", help="CSV path for the check table")
    p.add_argument("--skip-training", action="store_true")
    p.add_argument("--training-steps", type=int, default=2000)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, checkpoint.CheckpointError) as exc:
        print(f"coda {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, CapacityError, tensor.DimensionError, DivergenceError, ValueError) as exc:
        print(f"coda {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``fdlora {run,sweep,partition,evaluate,fuse}``.

Exit codes: 0 success, 1 run error, 2 usage or validation error.
"""
import argparse
import json
import math
import os
import sys

import numpy as np

from fdlora import lora
from fdlora.datagen import class_proportion_std, load_jsonl, partition_manifest
from fdlora.errors import ConfigError, FdloraError
from fdlora.federation import FederationConfig, build_base_model, build_dataset, partition
from fdlora.harness import AXES, SweepSpec, execute_run, run_sweep
from fdlora.metrics import score_predictions

EXIT_OK, EXIT_RUN_ERROR, EXIT_USAGE = 0, 1, 2

# argparse dest -> FederationConfig field
OVERRIDES = {
    "clients": "num_clients",
    "rounds": "outer_rounds",
    "inner_steps": "inner_steps",
    "sync_every": "sync_every",
    "alpha": "dirichlet_alpha",
    "rank": "rank",
    "seed": "seed",
    "fusion_mode": "fusion_mode",
    "lambda_": "fusion_lambda",
    "inner_lr": "inner_lr",
    "outer_lr": "outer_lr",
    "outer_momentum": "outer_momentum",
    "local_epochs": "local_epochs",
    "batch_size": "batch_size",
    "task": "task",
    "jobs": "jobs",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _add_config_flags(p):
    p.add_argument("--config", help="JSON file with FederationConfig fields")
    p.add_argument("--clients", type=int, help="number of clients N")
    p.add_argument("--rounds", type=int, help="outer rounds T")
    p.add_argument("--inner-steps", type=int, help="inner steps per round K")
    p.add_argument("--sync-every", help="sync period H (integer or 'inf')")
    p.add_argument("--alpha", type=float, help="Dirichlet concentration")
    p.add_argument("--rank", type=int, help="adapter rank r")
    p.add_argument("--seed", type=int)
    p.add_argument("--fusion-mode", choices=[m.value for m in lora.FusionMode])
    p.add_argument("--lambda", dest="lambda_", type=float, help="L1 weight of the fusion search")
    p.add_argument("--inner-lr", type=float)
    p.add_argument("--outer-lr", type=float)
    p.add_argument("--outer-momentum", type=float)
    p.add_argument("--local-epochs", type=int)
    p.add_argument("--batch-size", type=int, help="0 = full batch")
    p.add_argument("--task", choices=["clusters", "two_skill"])
    p.add_argument("--jobs", type=int, help="parallel workers")
    p.add_argument("--data", help="JSONL dataset instead of the synthetic task")


def build_parser():
    parser = _Parser(prog="fdlora", description="Dual-adapter federated learning simulator.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="one full protocol run")
    _add_config_flags(p)
    p.add_argument("--out", default="fdlora-run", help="output directory")
    p.add_argument("--no-checkpoints", action="store_true")

    p = sub.add_parser("sweep", help="repeat runs over one axis")
    _add_config_flags(p)
    p.add_argument("--axis", required=True, choices=sorted(AXES))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out", default="fdlora-sweep")

    p = sub.add_parser("partition", help="write a Dirichlet partition manifest")
    _add_config_flags(p)
    p.add_argument("--out", default="partition.json", help="manifest path")

    p = sub.add_parser("evaluate", help="score an adapter set on a dataset")
    _add_config_flags(p)
    p.add_argument("--adapters", help="adapter-set JSON (omit for the bare base model)")
    p.add_argument("--out", help="write scores as JSON here")

    p = sub.add_parser("fuse", help="fuse a personalized and a global adapter set")
    p.add_argument("--personalized", required=True)
    p.add_argument("--global", dest="global_", required=True)
    p.add_argument("--w1", type=float)
    p.add_argument("--w2", type=float)
    p.add_argument("--fusion-mode", choices=["random", "average", "sum", "personalized", "global"])
    p.add_argument("--seed", type=int, default=0, help="rng seed for --fusion-mode random")
    p.add_argument("--out", required=True)
    return parser


def resolve_config(args):
    doc = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
    for flag, name in OVERRIDES.items():
        v = getattr(args, flag, None)
        if v is not None:
            doc[name] = v
    try:
        return FederationConfig.from_dict(doc)
    except (ConfigError, TypeError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def _dataset(args, cfg):
    return load_jsonl(args.data) if getattr(args, "data", None) else build_dataset(cfg)


def _parse_value(axis, text):
    if axis == "fusion_mode":
        return text
    if axis == "H":
        return math.inf if text.lower() in ("inf", "infinity") else int(text)
    if axis == "alpha":
        return float(text)
    return int(text)


def cmd_run(args, out):
    cfg = resolve_config(args)
    data = load_jsonl(args.data) if args.data else None
    report, _ = execute_run(cfg, args.out, data, run_id=f"seed{cfg.seed}",
                            checkpoints=not args.no_checkpoints)
    m = report.mean
    print(f"accuracy={m['accuracy']:.4f} f1={m['f1']:.4f} loss={m['loss']:.4f} "
          f"bytes_up={report.ledger['bytes_up']} -> {args.out}", file=out)
    return EXIT_OK


def cmd_sweep(args, out):
    cfg = resolve_config(args)
    try:
        values = [_parse_value(args.axis, v.strip()) for v in args.values.split(",") if v.strip()]
        spec = SweepSpec(args.axis, values, cfg, args.repeats)
    except (ValueError, ConfigError) as exc:
        raise UsageError(f"invalid sweep: {exc}") from None
    data = load_jsonl(args.data) if args.data else None
    result = run_sweep(spec, args.out, jobs=cfg.jobs, dataset=data)
    for a in result.aggregates:
        print(f"{a['axis']}={a['value']}: accuracy {a['accuracy_mean']:.4f} ± {a['accuracy_std']:.4f} "
              f"({a['runs']} runs)", file=out)
    for f in result.failures:
        print(f"FAILED {f['run_id']}: {f['error']}", file=sys.stderr)
    return EXIT_OK if result.ok else EXIT_RUN_ERROR


def cmd_partition(args, out):
    cfg = resolve_config(args)
    data = _dataset(args, cfg)
    shards, spec = partition(data, cfg)
    manifest = partition_manifest(
        shards, spec, {"imbalance": class_proportion_std(shards, data.num_classes),
                       "dataset_digest": data.digest()}
    )
    parent = os.path.dirname(args.out)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"{len(shards)} shards, imbalance={manifest['imbalance']:.4f} -> {args.out}", file=out)
    return EXIT_OK


def cmd_evaluate(args, out):
    cfg = resolve_config(args)
    data = _dataset(args, cfg)
    num_classes = max(data.num_classes, cfg.num_classes)
    base = build_base_model(cfg, data.dim, num_classes)
    adapters = lora.load(args.adapters) if args.adapters else None
    if isinstance(adapters, lora.LoraAdapter):
        adapters = lora.AdapterSet([adapters])
    s = score_predictions(data.y, base.predict(data.x, adapters), num_classes)
    doc = {"accuracy": s.accuracy, "f1": s.f1, "f1_degenerate": s.f1_degenerate, "n": len(data)}
    text = json.dumps(doc, sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text + "\n")
    print(text, file=out)
    return EXIT_OK


def cmd_fuse(args, out):
    if args.fusion_mode is not None:
        if args.w1 is not None or args.w2 is not None:
            raise UsageError("give either --fusion-mode or --w1/--w2, not both")
        w = lora.baseline_fusion(args.fusion_mode, np.random.default_rng(args.seed))
    elif args.w1 is None or args.w2 is None:
        raise UsageError("fuse needs --w1 and --w2 (or --fusion-mode)")
    else:
        w = lora.FusionWeights(args.w1, args.w2)
    p = lora.load(args.personalized)
    g = lora.load(args.global_)
    if isinstance(p, lora.LoraAdapter) and isinstance(g, lora.LoraAdapter):
        fused = lora.ada_fuse(p, g, w)
    else:
        if isinstance(p, lora.LoraAdapter):
            p = lora.AdapterSet([p])
        if isinstance(g, lora.LoraAdapter):
            g = lora.AdapterSet([g])
        fused = lora.ada_fuse_set(p, g, w)
    lora.save(fused, args.out)
    print(f"fused with w=({w.w1}, {w.w2}) -> {args.out}", file=out)
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "sweep": cmd_sweep,
    "partition": cmd_partition,
    "evaluate": cmd_evaluate,
    "fuse": cmd_fuse,
}


def cli_main(argv=None, out=None):
    out = out or sys.stdout
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(f"fdlora {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FdloraError, OSError) as exc:
        print(f"fdlora {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUN_ERROR


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()

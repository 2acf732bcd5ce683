"""Command-line entry point.

Exit codes: 0 success, 1 bad input or usage, 2 numeric failure (non-finite
loss or a failed gradient check).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import typing
from pathlib import Path

import numpy as np

from . import gradcheck
from . import tensor as T
from .ablation import run_ablation, write_ablation
from .dataset import FeatureRecord, SynthConfig, generate_synthetic, load_dataset, write_dataset, write_features
from .training import NumericError, RunConfig, build_pairs, load_model, run_eval, run_train, SampleSource

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(doc: dict) -> None:
    print(json.dumps(doc, sort_keys=True), flush=True)


# ---------------------------------------------------------------------------
# RunConfig <-> flags


_ALIASES = {"data_dir": ["--data"]}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    """One flag per RunConfig field; unset flags leave the config value alone."""
    p.add_argument("--config", help="JSON file with RunConfig fields")
    hints = typing.get_type_hints(RunConfig)
    for f in dataclasses.fields(RunConfig):
        names = ["--" + f.name.replace("_", "-")] + _ALIASES.get(f.name, [])
        kind = hints[f.name]
        kw: dict = {"dest": f.name, "default": None}
        if kind is bool:
            kw["action"] = argparse.BooleanOptionalAction
        elif kind == list[int]:
            kw.update(type=int, nargs="+")
        elif kind in (int, float, str):
            kw["type"] = kind
        else:  # Optional[...]
            inner = [a for a in typing.get_args(kind) if a is not type(None)][0]
            kw["type"] = inner
        p.add_argument(*names, **kw)


def _run_config(args: argparse.Namespace) -> RunConfig:
    doc = {}
    if args.config:
        doc = RunConfig.from_file(args.config).to_dict()
    for f in dataclasses.fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            doc[f.name] = value
    return RunConfig.from_dict(doc)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = SynthConfig(num_images=args.images, image_size=args.size, num_verbs=args.verbs, seed=args.seed,
                      max_objects=args.max_objects)
    images, anns = generate_synthetic(cfg)
    write_dataset(args.out, images, anns)
    _emit({"out": str(args.out), "images": len(images), "hois": sum(len(a.hois) for a in anns)})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    result = run_train(cfg, log=_emit)
    _emit({"checkpoint": cfg.checkpoint, "iterations": cfg.iterations, "start_iteration": result.start_iteration})
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    report = run_eval(cfg, log=lambda _table: None)
    _emit({"report": cfg.report, **report.to_json()})
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    report = run_ablation(cfg, log=_emit)
    write_ablation(cfg.report, report)
    print(report.table())
    return EXIT_OK


def cmd_grad_check(args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.corrupt:
        with T.corrupt_backward(args.corrupt, args.corrupt_factor):
            ops = gradcheck.op_suite(rng)
            net = gradcheck.network_check(args.seed, args.per_tensor)
    else:
        ops = gradcheck.op_suite(rng)
        net = gradcheck.network_check(args.seed, args.per_tensor)
    worst = 0.0
    for name, err in ops.items():
        worst = max(worst, err)
        print(f"op    {name:<16} {err:.3e}  {'ok' if err <= gradcheck.TOLERANCE else 'FAIL'}")
    for group in gradcheck.NETWORK_GROUPS:
        err = net.errors[group]
        worst = max(worst, err)
        print(f"group {group:<16} {err:.3e}  {'ok' if err <= gradcheck.TOLERANCE else 'FAIL'}"
              f"  ({net.checked[group]} checked, {net.skipped[group]} on a kink)")
    ok = worst <= gradcheck.TOLERANCE
    print(f"max relative error {worst:.3e} (tolerance {gradcheck.TOLERANCE:.0e}): {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_dump_features(args) -> int:
    """Write the stem's (f_s, f_h, f_o) maps for every candidate pair as features.jsonl."""
    model, _ = load_model(args.checkpoint)
    images, anns = load_dataset(args.data)
    items = build_pairs(anns, model.cfg.num_categories, model.cfg.pattern_size)
    source = SampleSource(model, images, anns)
    records = []
    for it, s in zip(items, source.samples(items)):
        records.append(FeatureRecord(anns[it.image_index].image_id, it.pair_index,
                                     s.f_s.map.data, s.f_h.map.data, s.f_o.map.data))
    write_features(args.out, records)
    _emit({"out": str(args.out), "records": len(records)})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ingraphnet", description="in-GraphNet HOI detection at desk scale")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--images", type=int, default=200)
    p.add_argument("--verbs", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=32, help="image side in pixels")
    p.add_argument("--max-objects", type=int, default=2)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model, logging JSON lines")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score candidate pairs and report role mAP")
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="in-Graph configurations and node-count sweep")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("grad-check", help="finite-difference check of every op and the full network")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-tensor", type=int, default=6)
    p.add_argument("--corrupt", help=argparse.SUPPRESS)
    p.add_argument("--corrupt-factor", type=float, default=1.01, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("dump-features", help="dump per-pair target features from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_dump_features)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, T.UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

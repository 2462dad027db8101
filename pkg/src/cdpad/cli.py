"""Command line entry point: ``cdpad <subcommand> ...``.

Subcommands: generate-data, train, evaluate, ablate, report, run. The output
root comes from the config (``output_dir``) unless ``CDPAD_OUTPUT_ROOT`` is set.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import checkpoint
from . import experiment as ex
from .errors import CDPADError, ConfigError, StageError
from .metrics import metric_report, write_report, write_scores
from .synthdata import SyntheticConfig, generate_dataset, read_dataset, write_dataset

log = logging.getLogger("cdpad")

PHASE_DIRS = {"1": "phase1", "2": "phase2", "idr": "idr", "dil": "dil", "mmd": "mmd"}


def cmd_generate_data(args) -> int:
    cfg = ex.load_config(args.config)
    out = Path(args.out) if args.out else cfg.dataset_root
    ex.check_writable(out)
    ds = generate_dataset(cfg.data)
    write_dataset(ds, out)
    print(json.dumps({"out": str(out), **{k: len(v) for k, v in ds.splits.items()}}))
    return 0


def cmd_train(args) -> int:
    cfg = ex.load_config(args.config)
    root = cfg.output_root
    ex.check_writable(root)
    seed_dir = root / f"seed{args.seed}"
    ds = ex.ensure_dataset(cfg)
    extra = {"data": asdict(cfg.data), "data_dir": str(cfg.dataset_root)}
    if args.phase == "1":
        state = ex.run_phase1(cfg, ds, args.seed)
    else:
        base = seed_dir / ("phase1" if args.phase == "2" else "phase2")
        if not (base / checkpoint.MANIFEST_NAME).is_file():
            raise StageError(f"missing prerequisite checkpoint {base}; train the earlier phase first")
        state = checkpoint.load_checkpoint(base)
        if args.phase == "2":
            ex.run_phase2(cfg, ds, state, args.seed)
        else:
            _, info = ex.run_variant(cfg, ds, state, args.seed, args.phase)
            extra["info"] = info
            if info:
                print(json.dumps(info))
    out = seed_dir / PHASE_DIRS[args.phase]
    checkpoint.save_checkpoint(state, out, extra)
    print(f"checkpoint written to {out}")
    return 0


def cmd_evaluate(args) -> int:
    manifest = checkpoint.read_manifest(args.checkpoint)
    state = checkpoint.load_checkpoint(args.checkpoint)
    extra = manifest.get("extra", {})
    data_dir = extra.get("data_dir")
    if data_dir and (Path(data_dir) / "manifest.json").is_file():
        ds = read_dataset(data_dir)
    else:
        ds = generate_dataset(SyntheticConfig(**extra.get("data", {})))
    if args.split not in ds.splits:
        raise ConfigError(f"unknown split {args.split!r}")
    split = ds.splits[args.split]
    adapted = any(s.startswith("adapt") for s in state.stages)
    methods = ["target", "baseline"] + (["adapted"] if adapted else [])
    out = Path(args.out) if args.out else Path(args.checkpoint) / f"eval_{args.split}"
    ex.check_writable(out)
    result = {}
    for method in methods:
        s = ex.evaluate(state, split, args.split, method)
        write_scores(out / f"scores_{method}.tsv", s)
        report = metric_report(s)
        write_report(out / f"report_{method}.json", report)
        result[method] = report.summary()
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    cfg = ex.load_config(args.config)
    rec = ex.run_ablation(cfg)
    table = ex.emit_report([rec], cfg.output_root / "ablation")
    print(ex.format_table(table))
    return 0


def cmd_report(args) -> int:
    records = [ex.RunRecord.load(p) for p in args.runs]
    out = Path(args.out) if args.out else Path(args.runs[0]).parent / "report"
    table = ex.emit_report(records, out)
    print(ex.format_table(table))
    return 0


def cmd_run(args) -> int:
    cfg = ex.load_config(args.config)
    rec = ex.run_experiment(cfg)
    table = ex.emit_report([rec], cfg.output_root / "report")
    print(ex.format_table(table))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cdpad", description="Cross-domain PAD experiments on synthetic data.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="render the synthetic two-domain dataset")
    g.add_argument("--config")
    g.add_argument("--out")
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="run one training phase for one seed")
    t.add_argument("--config")
    t.add_argument("--phase", required=True, choices=sorted(PHASE_DIRS))
    t.add_argument("--seed", type=int, default=7)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint on a data split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="test", choices=("train", "dev", "test"))
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="subnet type x placement grid")
    a.add_argument("--config")
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", help="aggregate run records into CSV/JSON")
    r.add_argument("--runs", nargs="+", required=True)
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)

    x = sub.add_parser("run", help="full protocol for every configured seed")
    x.add_argument("--config")
    x.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CDPADError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

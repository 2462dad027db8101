"""Experiment runner: config loading, per-seed runs, the ablation grid, reports."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import checkpoint
from .dda import SubnetConfig, build_dda, insert_subnet
from .errors import CDPADError, ConfigError, StageError
from .metrics import ScoreSet, aggregate, metric_report, write_report, write_scores
from .model import BackboneConfig
from .synthdata import Dataset, SyntheticConfig, generate_dataset, read_dataset, write_dataset
from .trainer import (PhaseConfig, TrainState, adapt_source_phase, adapt_with_regularizer, build_state,
                      domain_accuracy, domain_probs, score_split, source_embeddings, target_embeddings,
                      train_domain_classifier, train_target_phase)

log = logging.getLogger(__name__)

OUTPUT_ENV = "CDPAD_OUTPUT_ROOT"
METHODS = ("target", "baseline", "adapted")
REPORT_METRICS = ("bpcer_at_1", "bpcer_at_5", "acer", "auc")
ABLATION_TAPS = ("pool2", "pool3", "pool4")


def _phase_defaults():
    return {
        "target": PhaseConfig(phase="target", epochs=30, patience=5),
        "adapt": PhaseConfig(phase="adapt", epochs=40, patience=10, lr=1e-3),
        "domain": PhaseConfig(phase="domain", epochs=30, patience=5, lr=1e-3),
        "regularized": PhaseConfig(phase="regularized", epochs=40, patience=10, lr=1e-3),
    }


@dataclass
class ExperimentConfig:
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    subnet: SubnetConfig = field(default_factory=SubnetConfig)
    phases: dict[str, PhaseConfig] = field(default_factory=_phase_defaults)
    variant: str = "none"
    weight: float = 1.0
    seeds: list[int] = field(default_factory=lambda: [7, 8, 9])
    output_dir: str = "runs"
    data_dir: str | None = None
    pca: bool = False

    def __post_init__(self):
        if self.variant not in ("none", "mmd", "dil", "idr"):
            raise ConfigError(f"unknown regularizer variant {self.variant!r}")
        if self.weight < 0:
            raise ConfigError("weight must be >= 0")
        if not self.seeds:
            raise ConfigError("at least one seed is required")

    @property
    def output_root(self) -> Path:
        return Path(os.environ.get(OUTPUT_ENV) or self.output_dir)

    @property
    def dataset_root(self) -> Path:
        return Path(self.data_dir) if self.data_dir else self.output_root / "data"

    def echo(self) -> dict:
        d = asdict(self)
        d["output_dir"] = str(self.output_root)
        return d


def _build(cls, raw, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Validate a raw mapping; every unknown key anywhere is an error."""
    raw = dict(raw or {})
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}")
    phases = _phase_defaults()
    for name, sub in (raw.pop("phases", None) or {}).items():
        if name not in phases:
            raise ConfigError(f"unknown phase {name!r}; expected one of {sorted(phases)}")
        base = asdict(phases[name])
        if not isinstance(sub, dict):
            raise ConfigError(f"phases.{name}: expected a mapping")
        bad = sorted(set(sub) - set(base))
        if bad:
            raise ConfigError(f"phases.{name}: unknown keys {bad}")
        phases[name] = PhaseConfig(**{**base, **sub})
    data = _build(SyntheticConfig, raw.pop("data", None), "data")
    backbone = _build(BackboneConfig, raw.pop("backbone", None), "backbone")
    subnet = _build(SubnetConfig, raw.pop("subnet", None), "subnet")
    if "seeds" in raw:
        raw["seeds"] = [int(s) for s in raw["seeds"]]
    return ExperimentConfig(data=data, backbone=backbone, subnet=subnet, phases=phases, **raw)


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Read a YAML (or JSON) config file; ``None`` gives the defaults."""
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    cfg = config_from_dict(raw or {})
    if cfg.data_dir and not (Path(cfg.data_dir) / "manifest.json").is_file():
        raise ConfigError(f"data_dir {cfg.data_dir} holds no dataset manifest")
    return cfg


def check_writable(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {path} is not writable: {exc}") from exc


def ensure_dataset(cfg: ExperimentConfig) -> Dataset:
    """Load the dataset from disk, generating and writing it first if absent."""
    root = cfg.dataset_root
    if not (root / "manifest.json").is_file():
        write_dataset(generate_dataset(cfg.data), root)
    return read_dataset(root)


def _phase(cfg: ExperimentConfig, name: str, seed: int, **over) -> PhaseConfig:
    return PhaseConfig(**{**asdict(cfg.phases[name]), "seed": seed, **over})


# --------------------------------------------------------------------------
# stages


def run_phase1(cfg: ExperimentConfig, ds: Dataset, seed: int, subnet: SubnetConfig | None = None) -> TrainState:
    state = build_state(cfg.backbone, subnet or cfg.subnet, seed=seed)
    return train_target_phase(state, ds.splits["train"], ds.splits["dev"], _phase(cfg, "target", seed))


def run_phase2(cfg: ExperimentConfig, ds: Dataset, state: TrainState, seed: int) -> TrainState:
    tr, dv = ds.splits["train"], ds.splits["dev"]
    return adapt_source_phase(state, tr, dv, _phase(cfg, "adapt", seed), tr)


def run_variant(cfg: ExperimentConfig, ds: Dataset, state: TrainState, seed: int, variant: str) -> tuple[TrainState, dict]:
    """Regularized adaptation; IDR first trains the domain classifier. Returns extra metrics."""
    tr, dv, te = ds.splits["train"], ds.splits["dev"], ds.splits["test"]
    info = {}
    if variant == "idr":
        train_domain_classifier(state, tr, tr, _phase(cfg, "domain", seed), dv, dv)
        info["domain_accuracy_before"] = held_out_domain_accuracy(state, te)
    adapt_with_regularizer(state, tr, dv, _phase(cfg, "regularized", seed, variant=variant, weight=cfg.weight),
                           tr, dv)
    if variant == "idr":
        es = source_embeddings(state, te.source)
        info["source_domain_accuracy_after"] = domain_accuracy(domain_probs(state, es), np.zeros(len(es)))
    return state, info


def held_out_domain_accuracy(state: TrainState, split) -> float:
    es = source_embeddings(state, split.source)
    et = target_embeddings(state, split.target)
    probs = np.concatenate([domain_probs(state, es), domain_probs(state, et)])
    return domain_accuracy(probs, np.concatenate([np.zeros(len(es)), np.ones(len(et))]))


def evaluate(state: TrainState, split, split_name: str, method: str) -> ScoreSet:
    """Scores for one method: target upper bound, source baseline, or adapted source."""
    if method == "target":
        s = score_split(state, split, "target", "target")
    elif method == "baseline":
        s = score_split(state, split, "source", "target")
    else:
        s = score_split(state, split, "source", "source")
    s.splits = [split_name] * len(s.scores)
    return s


# --------------------------------------------------------------------------
# run records


@dataclass
class RunRecord:
    config: dict
    seeds: list[int]
    results: dict[str, dict[str, dict]] = field(default_factory=dict)  # seed -> method -> metric summary
    extra: dict[str, dict] = field(default_factory=dict)
    artifacts: dict[str, dict[str, str]] = field(default_factory=dict)  # seed -> method -> score file
    wall_clock: float = 0.0
    complete: bool = False
    error: str | None = None

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RunRecord":
        try:
            return cls(**json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"cannot read run record {path}: {exc}") from exc


def _store(rec: RunRecord, seed_dir: Path, seed: int, method: str, s: ScoreSet) -> None:
    path = seed_dir / f"scores_{method}.tsv"
    write_scores(path, s)
    report = metric_report(s)
    write_report(seed_dir / f"report_{method}.json", report)
    rec.results.setdefault(str(seed), {})[method] = report.summary()
    rec.artifacts.setdefault(str(seed), {})[method] = str(path)


def run_experiment(cfg: ExperimentConfig) -> RunRecord:
    """Full protocol per seed: phase 1, baseline, phase 2 (+ variant), evaluation."""
    root = cfg.output_root
    check_writable(root)
    rec = RunRecord(config=cfg.echo(), seeds=list(cfg.seeds))
    t0 = time.perf_counter()
    try:
        ds = ensure_dataset(cfg)
        te = ds.splits["test"]
        for seed in cfg.seeds:
            seed_dir = root / f"seed{seed}"
            seed_dir.mkdir(parents=True, exist_ok=True)
            state = run_phase1(cfg, ds, seed)
            checkpoint.save_checkpoint(state, seed_dir / "phase1", {"data": asdict(cfg.data)})
            _store(rec, seed_dir, seed, "target", evaluate(state, te, "test", "target"))
            _store(rec, seed_dir, seed, "baseline", evaluate(state, te, "test", "baseline"))
            run_phase2(cfg, ds, state, seed)
            checkpoint.save_checkpoint(state, seed_dir / "phase2", {"data": asdict(cfg.data)})
            _store(rec, seed_dir, seed, "adapted", evaluate(state, te, "test", "adapted"))
            if cfg.variant != "none":
                _, info = run_variant(cfg, ds, state, seed, cfg.variant)
                checkpoint.save_checkpoint(state, seed_dir / cfg.variant, {"data": asdict(cfg.data)})
                _store(rec, seed_dir, seed, f"adapted_{cfg.variant}", evaluate(state, te, "test", "adapted"))
                rec.extra[str(seed)] = info
            if cfg.pca:
                write_pca_svg(seed_dir / "embeddings_pca.svg", state, te)
        rec.complete = True
    except CDPADError as exc:
        rec.error = f"{type(exc).__name__}: {exc}"
        raise
    finally:
        rec.wall_clock = time.perf_counter() - t0
        rec.save(root / "run_record.json")
    return rec


# --------------------------------------------------------------------------
# ablation


def ablation_cells() -> list[tuple[str, str | None]]:
    return [("none", None)] + [(t, tap) for t in ("dense", "residual") for tap in ABLATION_TAPS]


def cell_name(kind: str, tap: str | None) -> str:
    return kind if tap is None else f"{kind}@{tap}"


def run_ablation(cfg: ExperimentConfig) -> RunRecord:
    """Subnet type x placement grid; phase 1 is trained once per seed and shared by every cell."""
    root = cfg.output_root / "ablation"
    check_writable(root)
    rec = RunRecord(config=cfg.echo(), seeds=list(cfg.seeds))
    t0 = time.perf_counter()
    try:
        ds = ensure_dataset(cfg)
        te = ds.splits["test"]
        for seed in cfg.seeds:
            seed_dir = root / f"seed{seed}"
            seed_dir.mkdir(parents=True, exist_ok=True)
            state = run_phase1(cfg, ds, seed, SubnetConfig("none"))
            snap = state.params.snapshot()
            for kind, tap in ablation_cells():
                name = cell_name(kind, tap)
                if kind == "none":
                    s = evaluate(state, te, "test", "baseline")
                else:
                    cell = _with_subnet(state, snap, SubnetConfig(kind, tap), seed)
                    run_phase2(cfg, ds, cell, seed)
                    s = evaluate(cell, te, "test", "adapted")
                _store(rec, seed_dir, seed, name, s)
        rec.complete = True
    except CDPADError as exc:
        rec.error = f"{type(exc).__name__}: {exc}"
        raise
    finally:
        rec.wall_clock = time.perf_counter() - t0
        rec.save(root / "run_record.json")
    return rec


def _with_subnet(state: TrainState, snap: dict, sub: SubnetConfig, seed: int) -> TrainState:
    """A fresh state sharing the phase-1 weights, with a new subnet at ``sub.tap``."""
    fresh = build_state(state.backbone_config, SubnetConfig("none"), seed=seed)
    fresh.params.restore(snap)
    channels = fresh.backbone.tap_shape(sub.tap)[-1]
    subnet = build_dda(sub, channels, fresh.params, seed=seed + 2)
    fresh.stream = insert_subnet(fresh.backbone, subnet, sub.tap)
    fresh.params.set_trainable([])
    fresh.subnet_config = sub
    fresh.stages = list(state.stages)
    return fresh


# --------------------------------------------------------------------------
# reports


def summarize(records: list[RunRecord]) -> dict[str, dict[str, dict]]:
    """method -> metric -> {mean, std, n, values} over every seed of every record."""
    if not records:
        raise ConfigError("no run records to report")
    per: dict[str, dict[str, list]] = {}
    for rec in records:
        for seed in sorted(rec.results, key=int):
            for method, summary in rec.results[seed].items():
                for m in REPORT_METRICS:
                    per.setdefault(method, {}).setdefault(m, []).append(summary[m])
    if not per:
        raise ConfigError("run records hold no results")
    out = {}
    for method, metrics in per.items():
        out[method] = {}
        for m, vals in metrics.items():
            mean, std = aggregate(vals)
            out[method][m] = {"mean": mean, "std": std, "n": len(vals), "values": vals}
    return out


def emit_report(records: list[RunRecord], out_dir: str | Path) -> dict:
    """CSV (one row per method x metric) plus a JSON summary."""
    out_dir = Path(out_dir)
    check_writable(out_dir)
    table = summarize(records)
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "metric", "mean", "std", "n"])
        for method in table:
            for m in REPORT_METRICS:
                c = table[method][m]
                w.writerow([method, m, f"{c['mean']:.6f}", f"{c['std']:.6f}", c["n"]])
    (out_dir / "summary.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    return table


def format_table(table: dict) -> str:
    lines = [f"{'method':<18}" + "".join(f"{m:>20}" for m in REPORT_METRICS)]
    for method, metrics in table.items():
        cells = "".join(f"{metrics[m]['mean']:>11.4f} ± {metrics[m]['std']:<6.4f}" for m in REPORT_METRICS)
        lines.append(f"{method:<18}{cells}")
    return "\n".join(lines)


def write_pca_svg(path: str | Path, state: TrainState, split) -> None:
    """2-D PCA scatter of target, baseline-source and adapted-source embeddings."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    groups = {
        "target": target_embeddings(state, split.target),
        "source (baseline)": target_embeddings(state, split.source),
        "source (adapted)": source_embeddings(state, split.source),
    }
    allx = np.concatenate(list(groups.values())).astype(np.float64)
    mu = allx.mean(axis=0)
    _, _, vt = np.linalg.svd(allx - mu, full_matrices=False)
    fig, ax = plt.subplots(figsize=(5, 5))
    for (name, x), marker in zip(groups.items(), "o^s"):
        p = (x - mu) @ vt[:2].T
        for lab, color in ((1, "tab:green"), (0, "tab:red")):
            sel = split.labels == lab
            ax.scatter(p[sel, 0], p[sel, 1], s=8, marker=marker, c=color, alpha=0.6,
                       label=f"{name} {'bonafide' if lab else 'attack'}")
    ax.legend(fontsize=6)
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    fig.tight_layout()
    matplotlib.rcParams["svg.hashsalt"] = "cdpad"
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)

"""Run orchestration: one config drives data, training, evaluation, defenses and diagnostics.

Every command writes into a fresh run directory under the output root and
finishes with an immutable ``run.json`` record.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import stat
import time
import zlib
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import __version__
from .attacks import TrainConfig, TrainingSample, build_training_set, train_benign, train_boba, train_fsba
from .config import DefenseSpec, ExperimentConfig, ModeSpec, dump
from .defenses import JitterSpec, PruneSpec, fine_tune, gaussian_noise_video, jitter_video, prune_channels
from .diagnostics import LossTrace, branch_loss_gap, export_embeddings, separation_stats
from .errors import ConfigurationError, FSBAError, TrainingError
from .evaluation import (
    METRICS,
    MetricReport,
    evaluate,
    is_promising,
    track_benchmark,
    write_curves_csv,
    write_rows_csv,
)
from .tracker import TrackerModel, load_checkpoint, save_checkpoint
from .trigger import AttackMode, PoisonPlacement, TriggerPattern, load_trigger
from .videodata import TrackAnnotation, Video, generate_benchmark, load_otb_benchmark, write_otb_sequence

log = logging.getLogger(__name__)

ENV_OUTPUT_DIR = "FSBA_OUTPUT_DIR"
ENV_THREADS = "FSBA_THREADS"
SWEEP_PARAMETERS = ("psi", "tau", "gamma", "trigger")


def configure_runtime() -> int:
    """Pin the thread count (default 1) and ask torch for deterministic kernels."""
    raw = os.environ.get(ENV_THREADS, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"{ENV_THREADS}={raw!r} is not an integer") from None
    if n < 1:
        raise ConfigurationError(f"{ENV_THREADS} must be >= 1")
    torch.set_num_threads(n)
    torch.use_deterministic_algorithms(True, warn_only=True)
    return n


def output_root(cfg: ExperimentConfig, override: str | None = None) -> Path:
    return Path(override or os.environ.get(ENV_OUTPUT_DIR) or cfg.output_dir)


# --------------------------------------------------------------------------
# data


@dataclass
class Benchmark:
    train_videos: list[Video]
    train_anns: list[TrackAnnotation]
    eval_videos: list[Video]
    eval_anns: list[TrackAnnotation]


_BENCH_CACHE: dict[str, Benchmark] = {}


def load_benchmark(cfg: ExperimentConfig) -> Benchmark:
    ds = cfg.dataset
    key = json.dumps([dataclasses.asdict(ds), cfg.train_video_seed, cfg.eval_video_seed], sort_keys=True)
    if key in _BENCH_CACHE:
        return _BENCH_CACHE[key]
    if ds.source == "otb":
        tv, ta = load_otb_benchmark(ds.otb_train_root)
        ev, ea = load_otb_benchmark(ds.otb_eval_root)
    else:
        tv, ta = generate_benchmark(ds.scene, ds.n_train_videos, cfg.train_video_seed)
        ev, ea = generate_benchmark(ds.scene, ds.n_eval_videos, cfg.eval_video_seed)
    if not ev:
        raise ConfigurationError("evaluation benchmark is empty")
    bench = Benchmark(tv, ta, ev, ea)
    _BENCH_CACHE.clear()
    _BENCH_CACHE[key] = bench
    return bench


def training_set(cfg: ExperimentConfig, bench: Benchmark, n_samples: int | None = None, salt: int = 0) -> list[TrainingSample]:
    n = cfg.dataset.n_samples if n_samples is None else n_samples
    return build_training_set(
        bench.train_videos, bench.train_anns, n, cfg.seed * 7919 + salt, cfg.tracker, max_gap=cfg.dataset.max_gap
    )


def train_config(cfg: ExperimentConfig, **changes) -> TrainConfig:
    """The train section with the global seed applied."""
    return dataclasses.replace(cfg.train, seed=cfg.seed, **changes)


# --------------------------------------------------------------------------
# training and evaluation


def attack_trigger(cfg: ExperimentConfig) -> TriggerPattern:
    return load_trigger(cfg.attack.trigger)


def eval_trigger(cfg: ExperimentConfig) -> TriggerPattern:
    return load_trigger(cfg.eval.trigger or cfg.attack.trigger)


def eval_placement(cfg: ExperimentConfig) -> PoisonPlacement:
    rate = cfg.eval.modification_rate or cfg.attack.modification_rate
    return cfg.tracker.placement(rate, anchor=cfg.eval.anchor, area_basis=cfg.attack.area_basis)


def train_model(cfg: ExperimentConfig, samples: Sequence[TrainingSample], trace: LossTrace | None = None) -> TrackerModel:
    tcfg = train_config(cfg)
    kind = cfg.attack.kind
    log.info("training %s model on %d samples for %d epochs", kind, len(samples), tcfg.epochs)
    if kind == "benign":
        acfg = cfg.attack.attack_config()
        monitor = (attack_trigger(cfg), acfg.placement(cfg.tracker))
        return train_benign(samples, tcfg, cfg.tracker, trace=trace, monitor=monitor)
    trainer = train_boba if kind == "boba" else train_fsba
    return trainer(samples, tcfg, cfg.attack.attack_config(), cfg.tracker, trigger=attack_trigger(cfg), trace=trace)


def evaluate_modes(
    model: TrackerModel,
    cfg: ExperimentConfig,
    bench: Benchmark,
    modes: Sequence[ModeSpec] | None = None,
    transform: Callable[[Video], Video] | None = None,
) -> list[MetricReport]:
    """One report per mode; the clean run is shared between modes."""
    trig, place = eval_trigger(cfg), eval_placement(cfg)
    clean = track_benchmark(model, bench.eval_videos, bench.eval_anns, transform)
    reports = []
    for spec in modes if modes is not None else cfg.eval.modes:
        mode = spec.attack_mode()
        log.info("evaluating %s", mode.label)
        reports.append(evaluate(model, bench.eval_videos, bench.eval_anns, trig, place, mode, clean, transform))
    return reports


def table_row(reports: Sequence[MetricReport], **extra) -> dict:
    """One wide row: the clean metrics once, then every attacked mode's metrics."""
    if not reports:
        raise ValueError("no reports")
    row = dict(extra)
    for m in METRICS:
        row[f"{m}_b"] = reports[0].metric(m, "b")
    for r in reports:
        if r.mode == "none":
            continue
        for m in METRICS:
            row[f"{r.mode}:{m}_a"] = r.metric(m, "a")
    return row


def verdicts(reports: Sequence[MetricReport], cfg: ExperimentConfig) -> dict:
    out = {}
    for r in reports:
        if r.mode != "none":
            out[r.mode] = dataclasses.asdict(is_promising(r, cfg.eval.budget))
            out[r.mode]["promising"] = out[r.mode]["effective"] and out[r.mode]["stealthy"]
    return out


def plot_curves(reports: Sequence[MetricReport], path: str | Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .evaluation import PRECISION_GRID, SUCCESS_GRID

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, kind, grid, xlabel in (
        (axes[0], "precision", PRECISION_GRID, "location error threshold (px)"),
        (axes[1], "success", SUCCESS_GRID, "overlap threshold"),
    ):
        ax.plot(grid, reports[0].curves[f"{kind}_b"], label="benign video", color="black")
        for r in reports:
            if f"{kind}_a" in r.curves:
                ax.plot(grid, r.curves[f"{kind}_a"], label=r.mode)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(kind)
        ax.set_ylim(0, 1.02)
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


# --------------------------------------------------------------------------
# run records


@dataclass
class RunRecord:
    command: str
    config_hash: str
    config: dict
    status: str = "ok"
    checkpoint: str | None = None
    checkpoint_hash: str | None = None
    reports: dict = field(default_factory=dict)
    verdicts: dict = field(default_factory=dict)
    loss_trace: list = field(default_factory=list)
    separation: dict | None = None
    extra: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    error: dict | None = None
    created: str = ""
    version: str = __version__

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def write(self, path: str | Path) -> Path:
        """Write once; the file is created exclusively and left read-only."""
        path = Path(path)
        with open(path, "x") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
        path.chmod(stat.S_IRUSR | stat.S_IRGRP | stat.S_IROTH)
        return path

    @classmethod
    def read(cls, path: str | Path) -> "RunRecord":
        return cls(**json.loads(Path(path).read_text()))


def make_run_dir(root: str | Path, command: str, cfg: ExperimentConfig) -> Path:
    """A new directory per run; an existing name is never reused."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
    base = f"{stamp}-{command}-{cfg.name}-{cfg.hash()[:8]}"
    for k in range(1000):
        path = root / (base if k == 0 else f"{base}-{k}")
        try:
            path.mkdir()
        except FileExistsError:
            continue
        dump(cfg, path / "config.yaml")
        return path
    raise FSBAError(f"could not allocate a run directory under {root}")


def _new_record(command: str, cfg: ExperimentConfig) -> RunRecord:
    return RunRecord(
        command=command,
        config_hash=cfg.hash(),
        config=cfg.to_dict(),
        created=datetime.now(timezone.utc).isoformat(),
    )


def _write_eval_outputs(run_dir: Path, reports: Sequence[MetricReport], prefix: str = "") -> None:
    write_rows_csv([table_row(reports)], run_dir / f"{prefix}metrics.csv")
    by_mode = [r.flat_row() for r in reports]
    for row in by_mode:
        if row["mode"] == "none":  # nothing attacked: only the clean columns are meaningful
            for m in METRICS:
                row[f"{m}_a"] = None
    write_rows_csv(by_mode, run_dir / f"{prefix}metrics_by_mode.csv")
    (run_dir / f"{prefix}metrics.json").write_text(json.dumps([r.to_dict() for r in reports], indent=2))
    for r in reports:
        write_curves_csv(r, run_dir / f"{prefix}curves_{r.mode}.csv")
    plot_curves(reports, run_dir / f"{prefix}curves.png")


# --------------------------------------------------------------------------
# commands


def run_train(cfg: ExperimentConfig, out: str | Path | None = None, do_eval: bool = True) -> tuple[Path, RunRecord]:
    run_dir = make_run_dir(output_root(cfg, out), "train", cfg)
    record = _new_record("train", cfg)
    bench = load_benchmark(cfg)
    samples = training_set(cfg, bench)
    trace = LossTrace()
    t0 = time.perf_counter()
    try:
        model = train_model(cfg, samples, trace)
    except TrainingError as exc:
        record.status = "failed"
        record.error = {"type": type(exc).__name__, "message": str(exc), "epoch": exc.epoch, "step": exc.step}
        record.loss_trace = trace.records
        record.timings["train_s"] = time.perf_counter() - t0
        record.write(run_dir / "run.json")
        raise
    record.timings["train_s"] = time.perf_counter() - t0
    record.checkpoint = "checkpoint.npz"
    record.checkpoint_hash = save_checkpoint(model, run_dir / "checkpoint.npz")
    trace.to_csv(run_dir / "loss_trace.csv")
    record.loss_trace = trace.records
    if do_eval:
        t1 = time.perf_counter()
        reports = evaluate_modes(model, cfg, bench)
        record.timings["eval_s"] = time.perf_counter() - t1
        record.reports = {r.mode: r.to_dict() for r in reports}
        record.verdicts = verdicts(reports, cfg)
        _write_eval_outputs(run_dir, reports)
    record.write(run_dir / "run.json")
    log.info("run written to %s", run_dir)
    return run_dir, record


def _load_model(path: str | Path) -> TrackerModel:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"checkpoint {path} does not exist")
    return load_checkpoint(path)


def run_eval(cfg: ExperimentConfig, checkpoint: str | Path, out: str | Path | None = None) -> tuple[Path, RunRecord]:
    model = _load_model(checkpoint)
    run_dir = make_run_dir(output_root(cfg, out), "eval", cfg)
    record = _new_record("eval", cfg)
    record.checkpoint = str(checkpoint)
    record.checkpoint_hash = model.content_hash()
    t0 = time.perf_counter()
    reports = evaluate_modes(model, cfg, load_benchmark(cfg))
    record.timings["eval_s"] = time.perf_counter() - t0
    record.reports = {r.mode: r.to_dict() for r in reports}
    record.verdicts = verdicts(reports, cfg)
    _write_eval_outputs(run_dir, reports)
    record.write(run_dir / "run.json")
    return run_dir, record


def _video_seed(seed: int, video: Video) -> int:
    return seed * 100003 + zlib.crc32(video.id.encode())


def finetune_samples(cfg: ExperimentConfig, bench: Benchmark, spec: DefenseSpec) -> list[TrainingSample]:
    """``fraction`` of the training-set size, drawn from the training pairs or from unseen videos."""
    n = max(1, math.ceil(spec.fraction * cfg.dataset.n_samples))
    if spec.source == "within":
        pairs = training_set(cfg, bench)
        pick = np.random.default_rng([cfg.seed, 4]).choice(len(pairs), size=min(n, len(pairs)), replace=False)
        return [pairs[i] for i in np.sort(pick)]
    ds = cfg.dataset
    videos, anns = generate_benchmark(ds.scene, ds.n_train_videos, cfg.finetune_video_seed)
    return build_training_set(videos, anns, n, cfg.seed * 7919 + 1, cfg.tracker, max_gap=ds.max_gap)


def finetune_config(cfg: ExperimentConfig, spec: DefenseSpec) -> TrainConfig:
    """Resumed SGD: constant learning rate, by default where the training schedule ended."""
    lr = cfg.train.lr_final if spec.lr is None else spec.lr
    epochs = cfg.train.epochs if spec.epochs is None else spec.epochs
    return train_config(cfg, epochs=epochs, lr=lr, lr_final=lr)


def defended(
    model: TrackerModel, spec: DefenseSpec, cfg: ExperimentConfig, bench: Benchmark
) -> tuple[TrackerModel, Callable[[Video], Video] | None]:
    """The model and per-video preprocessing a defense leaves the victim with."""
    if spec.kind == "jitter":
        js = JitterSpec(spec.jitter, spec.budget)
        return model, lambda v: jitter_video(v, dataclasses.replace(js, seed=_video_seed(cfg.seed, v)))
    if spec.kind == "noise":
        return model, lambda v: gaussian_noise_video(v, spec.std, seed=_video_seed(cfg.seed, v))
    if spec.kind == "finetune":
        return fine_tune(model, finetune_samples(cfg, bench, spec), finetune_config(cfg, spec)), None
    if spec.kind == "prune":
        ps = PruneSpec(spec.pruning_rate, spec.calibration_fraction, spec.layer)
        n = max(1, math.ceil(ps.calibration_fraction * cfg.dataset.n_samples))
        crops = [s.x for s in training_set(cfg, bench, n, salt=2)]
        return prune_channels(model, crops, ps), None
    raise ConfigurationError(f"unknown defense {spec.kind!r}")


def run_defend(
    cfg: ExperimentConfig,
    checkpoint: str | Path,
    out: str | Path | None = None,
    specs: Sequence[DefenseSpec] | None = None,
) -> tuple[Path, RunRecord]:
    specs = list(cfg.defenses if specs is None else specs)
    if not specs:
        raise ConfigurationError("no defenses configured")
    model = _load_model(checkpoint)
    bench = load_benchmark(cfg)
    run_dir = make_run_dir(output_root(cfg, out), "defend", cfg)
    record = _new_record("defend", cfg)
    record.checkpoint = str(checkpoint)
    record.checkpoint_hash = model.content_hash()
    rows = [table_row(evaluate_modes(model, cfg, bench), defense="none")]
    for i, spec in enumerate(specs):
        t0 = time.perf_counter()
        victim, transform = defended(model, spec, cfg, bench)
        reports = evaluate_modes(victim, cfg, bench, transform=transform)
        record.timings[spec.label] = time.perf_counter() - t0
        record.reports[spec.label] = {r.mode: r.to_dict() for r in reports}
        if victim is not model:
            record.extra.setdefault("checkpoints", {})[spec.label] = save_checkpoint(
                victim, run_dir / f"defended_{i}.npz"
            )
        rows.append(table_row(reports, defense=spec.label))
        _write_eval_outputs(run_dir, reports, prefix=f"defense_{i}_")
    write_rows_csv(rows, run_dir / "defenses.csv")
    record.extra["table"] = rows
    record.write(run_dir / "run.json")
    return run_dir, record


def diagnostic_samples(cfg: ExperimentConfig, bench: Benchmark) -> list[TrainingSample]:
    return build_training_set(
        bench.eval_videos, bench.eval_anns, cfg.diagnose.n_crops, cfg.diagnose_seed, cfg.tracker, cfg.dataset.max_gap
    )


def run_diagnose(
    cfg: ExperimentConfig,
    checkpoint: str | Path,
    out: str | Path | None = None,
    reference: str | Path | None = None,
) -> tuple[Path, RunRecord]:
    """Separation statistics, embedding export and the poisoned-branch loss gap.

    With ``reference`` (typically the benign checkpoint) the same statistics are
    computed for it on identical crops, plus the ratio of pair distances.
    """
    model = _load_model(checkpoint)
    bench = load_benchmark(cfg)
    run_dir = make_run_dir(output_root(cfg, out), "diagnose", cfg)
    record = _new_record("diagnose", cfg)
    record.checkpoint = str(checkpoint)
    record.checkpoint_hash = model.content_hash()
    samples = diagnostic_samples(cfg, bench)
    crops = [s.x if cfg.diagnose.crop == "search" else s.z for s in samples]
    trig = attack_trigger(cfg)
    place = cfg.attack.attack_config().placement(cfg.tracker)
    layers = cfg.attack.feature_layers
    stats = separation_stats(model, crops, trig, place, layers)
    record.separation = stats.to_dict()
    export_embeddings(model, crops, trig, place, run_dir / "embeddings.csv", layers)
    record.extra["branch_loss_gap"] = branch_loss_gap(model, samples, trig, place)
    if reference is not None:
        ref = _load_model(reference)
        ref_stats = separation_stats(ref, crops, trig, place, layers)
        record.extra["reference"] = {
            "checkpoint": str(reference),
            "separation": ref_stats.to_dict(),
            "branch_loss_gap": branch_loss_gap(ref, samples, trig, place),
            "pair_distance_ratio": (
                stats.mean_l1_pair_distance / ref_stats.mean_l1_pair_distance
                if ref_stats.mean_l1_pair_distance > 0 else None
            ),
        }
        export_embeddings(ref, crops, trig, place, run_dir / "embeddings_reference.csv", layers)
    record.write(run_dir / "run.json")
    return run_dir, record


def _parse_sweep_value(parameter: str, raw):
    if parameter == "trigger":
        return str(raw)
    try:
        return float(raw)
    except (TypeError, ValueError):
        raise ConfigurationError(f"sweep value {raw!r} is not a number") from None


def sweep_rows(cfg: ExperimentConfig, parameter: str, values: Sequence) -> list[dict]:
    """One row per value; train-time parameters (gamma, trigger) retrain the model."""
    if parameter not in SWEEP_PARAMETERS:
        raise ConfigurationError(f"unknown sweep parameter {parameter!r}; expected one of {list(SWEEP_PARAMETERS)}")
    if len(values) == 0:
        raise ConfigurationError("sweep needs at least one value")
    values = [_parse_sweep_value(parameter, v) for v in values]
    bench = load_benchmark(cfg)
    rows = []
    base_model = None
    if parameter in ("psi", "tau"):
        samples = training_set(cfg, bench)
        base_model = train_model(cfg, samples)
    for v in values:
        log.info("sweep %s = %s", parameter, v)
        if parameter == "psi":
            vcfg = cfg.replace(eval={**cfg.to_dict()["eval"], "modification_rate": v})
            reports = evaluate_modes(base_model, vcfg, bench)
        elif parameter == "tau":
            # tau = 0 attacks no frame: the attacked video is the clean one
            spec = ModeSpec("none") if v == 0 else ModeSpec("few_shot", v)
            reports = evaluate_modes(base_model, cfg, bench, [spec])
            reports[0].mode = "few_shot"
        elif parameter == "gamma":
            attack = cfg.to_dict()["attack"]
            if v == 0:
                attack["kind"] = "benign"
            else:
                attack["poisoning_rate"] = v
            vcfg = cfg.replace(attack=attack)
            reports = evaluate_modes(train_model(vcfg, training_set(vcfg, bench)), vcfg, bench)
        else:
            vcfg = cfg.replace(attack={**cfg.to_dict()["attack"], "trigger": v}, eval={**cfg.to_dict()["eval"], "trigger": v})
            reports = evaluate_modes(train_model(vcfg, training_set(vcfg, bench)), vcfg, bench)
        rows.append(table_row(reports, parameter=parameter, value=v))
    return rows


def run_sweep(
    cfg: ExperimentConfig, parameter: str, values: Sequence, out: str | Path | None = None
) -> tuple[Path, RunRecord]:
    if parameter not in SWEEP_PARAMETERS:
        raise ConfigurationError(f"unknown sweep parameter {parameter!r}; expected one of {list(SWEEP_PARAMETERS)}")
    if len(values) == 0:
        raise ConfigurationError("sweep needs at least one value")
    run_dir = make_run_dir(output_root(cfg, out), f"sweep-{parameter}", cfg)
    record = _new_record(f"sweep {parameter}", cfg)
    t0 = time.perf_counter()
    rows = sweep_rows(cfg, parameter, values)
    record.timings["sweep_s"] = time.perf_counter() - t0
    write_rows_csv(rows, run_dir / "sweep.csv")
    record.extra = {"parameter": parameter, "values": list(values), "rows": rows}
    record.write(run_dir / "run.json")
    return run_dir, record


def run_synth(cfg: ExperimentConfig, out: str | Path) -> Path:
    """Write the configured synthetic benchmark as OTB-style sequence folders."""
    if cfg.dataset.source != "synthetic":
        raise ConfigurationError("synth needs dataset.source = synthetic")
    bench = load_benchmark(cfg)
    out = Path(out)
    for split, videos, anns in (("train", bench.train_videos, bench.train_anns), ("eval", bench.eval_videos, bench.eval_anns)):
        for v, a in zip(videos, anns):
            write_otb_sequence(out / split / v.id, v, a)
    return out


def mode_specs(modes: Sequence[AttackMode]) -> list[ModeSpec]:
    return [ModeSpec(m.mode, m.frame_attacking_rate) for m in modes]

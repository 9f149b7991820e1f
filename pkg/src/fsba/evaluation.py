"""Tracking metrics, before/after-attack reports and the promising-attack verdict."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import EvaluationError
from .tracker import TrackerModel, track
from .trigger import AttackMode, PoisonPlacement, TriggerPattern, poison_video
from .videodata import TrackAnnotation, Video, boxes_to_array, iou_array

PRECISION_THRESHOLD = 20.0
NORM_PRECISION_THRESHOLD = 0.2
SUCCESS_GRID = np.linspace(0.0, 1.0, 51)
PRECISION_GRID = np.arange(0, 51, dtype=np.float64)
METRICS = ("pr", "npr", "auc", "msr50")


def _prepare(preds, gts, present=None):
    preds = np.asarray(preds, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    if len(preds) != len(gts):
        raise EvaluationError(f"{len(preds)} predictions vs {len(gts)} ground-truth boxes")
    keep = np.ones(len(gts), dtype=bool) if present is None else np.asarray(present, dtype=bool)
    preds, gts = preds[keep], gts[keep]
    if len(gts) == 0:
        raise EvaluationError("no evaluable frames")
    return preds, gts


def _centers(boxes: np.ndarray) -> np.ndarray:
    return boxes[:, :2] + boxes[:, 2:] / 2.0


def center_errors(preds, gts, present=None) -> np.ndarray:
    p, g = _prepare(preds, gts, present)
    return np.linalg.norm(_centers(p) - _centers(g), axis=1)


def normalized_center_errors(preds, gts, present=None) -> np.ndarray:
    p, g = _prepare(preds, gts, present)
    if (g[:, 2] <= 0).any() or (g[:, 3] <= 0).any():
        raise EvaluationError("ground-truth box with zero width or height")
    d = (_centers(p) - _centers(g)) / g[:, 2:]
    return np.linalg.norm(d, axis=1)


def overlaps(preds, gts, present=None) -> np.ndarray:
    p, g = _prepare(preds, gts, present)
    return iou_array(p, g)


def precision_score(preds, gts, threshold: float = PRECISION_THRESHOLD, present=None) -> float:
    """Fraction of frames whose centre error is at most ``threshold`` pixels."""
    return float((center_errors(preds, gts, present) <= threshold).mean())


def normalized_precision(preds, gts, threshold: float = NORM_PRECISION_THRESHOLD, present=None) -> float:
    return float((normalized_center_errors(preds, gts, present) <= threshold).mean())


def success_curve(preds, gts, present=None) -> np.ndarray:
    ious = overlaps(preds, gts, present)
    return (ious[None, :] >= SUCCESS_GRID[:, None]).mean(axis=1)


def precision_curve(preds, gts, present=None) -> np.ndarray:
    err = center_errors(preds, gts, present)
    return (err[None, :] <= PRECISION_GRID[:, None]).mean(axis=1)


def success_auc(preds, gts, present=None) -> float:
    """Mean of the success plot over a 51-point IoU grid."""
    return float(success_curve(preds, gts, present).mean())


def msr50(per_class_results: Mapping[str, Sequence]) -> float:
    """Unweighted mean over classes of the per-class frame success rate at IoU 0.5.

    Each class maps to a list of per-sequence boolean arrays (frame-wise IoU >= 0.5).
    """
    if not per_class_results:
        raise EvaluationError("no classes to average")
    rates = []
    for name, seqs in per_class_results.items():
        flags = np.concatenate([np.asarray(s, dtype=bool).ravel() for s in seqs]) if len(seqs) else np.empty(0)
        if flags.size == 0:
            raise EvaluationError(f"class {name!r} has no evaluable frames")
        rates.append(flags.mean())
    return float(np.mean(rates))


# --------------------------------------------------------------------------
# reports


@dataclass
class SequenceResult:
    id: str
    category: str
    pr: float
    npr: float
    auc: float
    sr50: float
    success: np.ndarray = field(repr=False)  # IoU >= 0.5 per evaluable frame
    success_curve: np.ndarray = field(repr=False)
    precision_curve: np.ndarray = field(repr=False)


def score_sequence(pred: np.ndarray, ann: TrackAnnotation, video_id: str, category: str) -> SequenceResult:
    gts, present = ann.boxes, ann.present
    ious = overlaps(pred, gts, present)
    return SequenceResult(
        id=video_id,
        category=category,
        pr=precision_score(pred, gts, present=present),
        npr=normalized_precision(pred, gts, present=present),
        auc=success_auc(pred, gts, present=present),
        sr50=float((ious >= 0.5).mean()),
        success=ious >= 0.5,
        success_curve=success_curve(pred, gts, present),
        precision_curve=precision_curve(pred, gts, present),
    )


def aggregate(results: Sequence[SequenceResult]) -> dict:
    """Sequence-averaged Pr/nPr/AUC (OTB convention) plus class-averaged mSR50."""
    if not results:
        raise EvaluationError("no sequences")
    by_class: dict[str, list] = {}
    for r in results:
        by_class.setdefault(r.category, []).append(r.success)
    return {
        "pr": float(np.mean([r.pr for r in results])),
        "npr": float(np.mean([r.npr for r in results])),
        "auc": float(np.mean([r.auc for r in results])),
        "msr50": msr50(by_class),
        "success_curve": np.mean([r.success_curve for r in results], axis=0),
        "precision_curve": np.mean([r.precision_curve for r in results], axis=0),
    }


@dataclass
class MetricReport:
    mode: str
    pr_b: float | None = None
    pr_a: float | None = None
    npr_b: float | None = None
    npr_a: float | None = None
    auc_b: float | None = None
    auc_a: float | None = None
    msr50_b: float | None = None
    msr50_a: float | None = None
    per_sequence: list[dict] = field(default_factory=list)
    curves: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def metric(self, name: str, suffix: str) -> float | None:
        return getattr(self, f"{name}_{suffix}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["curves"] = {k: [float(v) for v in vals] for k, vals in self.curves.items()}
        return d

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**d)

    def flat_row(self, **extra) -> dict:
        row = dict(extra)
        row["mode"] = self.mode
        for m in METRICS:
            for sfx in ("b", "a"):
                row[f"{m}_{sfx}"] = self.metric(m, sfx)
        return row


def write_rows_csv(rows: Sequence[dict], path: str | Path) -> None:
    keys: list[str] = []
    for r in rows:
        keys.extend(k for k in r if k not in keys)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in keys})


def write_curves_csv(report: MetricReport, path: str | Path) -> None:
    """Success (IoU threshold) and precision (pixel threshold) curve points."""
    rows = []
    for kind, grid in (("success", SUCCESS_GRID), ("precision", PRECISION_GRID)):
        for sfx in ("b", "a"):
            vals = report.curves.get(f"{kind}_{sfx}")
            if vals is None:
                continue
            for t, v in zip(grid, vals):
                rows.append({"curve": kind, "variant": sfx.upper(), "threshold": float(t), "value": float(v)})
    write_rows_csv(rows, path)


def track_benchmark(
    model: TrackerModel,
    videos: Sequence[Video],
    anns: Sequence[TrackAnnotation],
    transform: Callable[[Video], Video] | None = None,
) -> list[np.ndarray]:
    """Run OPE (ground-truth initialisation, no restarts) on every video."""
    out = []
    for v, a in zip(videos, anns):
        v = transform(v) if transform is not None else v
        out.append(boxes_to_array(track(model, v, a.box(0))))
    return out


def evaluate(
    model: TrackerModel,
    videos: Sequence[Video],
    anns: Sequence[TrackAnnotation],
    trig: TriggerPattern,
    place: PoisonPlacement,
    mode: AttackMode,
    clean_predictions: Sequence[np.ndarray] | None = None,
    transform: Callable[[Video], Video] | None = None,
) -> MetricReport:
    """Metrics on clean videos (``*_b``) and on their trigger-carrying versions (``*_a``).

    Under mode ``none`` the "attacked" videos are the clean ones, so the
    ``*_a`` fields reproduce ``*_b``.

    ``clean_predictions`` reuses an earlier clean run of the same model (and
    transform). ``transform`` is applied to every video right before tracking,
    after any poisoning, which is where test-time preprocessing defenses act.
    """
    if not videos:
        raise EvaluationError("empty benchmark")
    if clean_predictions is None:
        clean_predictions = track_benchmark(model, videos, anns, transform)
    clean = [score_sequence(p, a, v.id, v.category) for p, v, a in zip(clean_predictions, videos, anns)]
    agg_b = aggregate(clean)
    report = MetricReport(mode=mode.label)
    for m in METRICS:
        setattr(report, f"{m}_b", agg_b[m])
    report.curves = {"success_b": agg_b["success_curve"], "precision_b": agg_b["precision_curve"]}
    attacked = []
    for v, a in zip(videos, anns):
        pv = poison_video(v, a, trig, place, mode)
        if transform is not None:
            pv = transform(pv)
        pred = boxes_to_array(track(model, pv, a.box(0)))
        attacked.append(score_sequence(pred, a, v.id, v.category))
    agg_a = aggregate(attacked)
    for m in METRICS:
        setattr(report, f"{m}_a", agg_a[m])
    report.curves.update(success_a=agg_a["success_curve"], precision_a=agg_a["precision_curve"])
    report.per_sequence = [
        {"id": c.id, "category": c.category,
         **{f"{m}_b": getattr(c, m) for m in ("pr", "npr", "auc", "sr50")},
         **{f"{m}_a": getattr(t, m) for m in ("pr", "npr", "auc", "sr50")}}
        for c, t in zip(clean, attacked)
    ]
    report.config = {
        "mode": mode.mode, "frame_attacking_rate": mode.frame_attacking_rate,
        "trigger": trig.name, "placement": asdict(place),
        "provenance": model.meta.get("provenance"),
    }
    return report


# --------------------------------------------------------------------------
# Definition-1 check

LOSS_METRICS = {"1-auc": "auc", "1-pr": "pr", "1-npr": "npr", "1-msr50": "msr50"}


@dataclass
class PromisingnessBudget:
    alpha: float = 0.3
    beta: float = 0.5
    loss: str = "1-auc"

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and math.isfinite(self.beta)) or self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be finite and non-negative")
        if self.loss not in LOSS_METRICS:
            raise ValueError(f"unknown loss selector {self.loss!r}; expected one of {sorted(LOSS_METRICS)}")


@dataclass
class Verdict:
    effective: bool
    stealthy: bool
    loss_b: float
    loss_a: float
    effectiveness_slack: float  # loss_a - (loss_b + alpha); negative when violated
    stealthiness_slack: float  # beta - loss_b; negative when violated

    @property
    def promising(self) -> bool:
        return self.effective and self.stealthy


def is_promising(report: MetricReport, budget: PromisingnessBudget) -> Verdict:
    name = LOSS_METRICS[budget.loss]
    b, a = report.metric(name, "b"), report.metric(name, "a")
    if b is None or a is None:
        raise ValueError(f"report lacks {name}_b / {name}_a")
    loss_b, loss_a = 1.0 - b, 1.0 - a
    eff = loss_a - (loss_b + budget.alpha)
    st = budget.beta - loss_b
    return Verdict(eff >= -1e-12, st >= -1e-12, loss_b, loss_a, eff, st)

"""Feature-separation statistics, embedding export and loss-dynamics records."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .tracker import TrackerModel, to_tensor, tracking_loss
from .trigger import PoisonPlacement, TriggerPattern, poison_crop

TRACE_FIELDS = ("epoch", "lt", "lf", "lp")


@dataclass
class LossTrace:
    """One record per completed epoch: mean tracking, feature and poisoned loss."""

    records: list[dict] = field(default_factory=list)

    def append(self, epoch: int, lt: float, lf: float = math.nan, lp: float = math.nan) -> None:
        self.records.append({"epoch": int(epoch), "lt": float(lt), "lf": float(lf), "lp": float(lp)})

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=TRACE_FIELDS)
            writer.writeheader()
            for r in self.records:
                writer.writerow({k: ("" if isinstance(r[k], float) and math.isnan(r[k]) else r[k]) for k in TRACE_FIELDS})

    @classmethod
    def from_csv(cls, path: str | Path) -> "LossTrace":
        trace = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                trace.append(*(float(row[k]) if row[k] != "" else math.nan for k in TRACE_FIELDS))
        return trace


@dataclass
class SeparationStats:
    mean_l1_pair_distance: float
    benign_dispersion: float
    poisoned_dispersion: float
    separation_ratio: float | None
    n_samples: int

    def to_dict(self) -> dict:
        return asdict(self)


def embeddings(
    model: TrackerModel,
    crops: Sequence[np.ndarray],
    trig: TriggerPattern,
    place: PoisonPlacement,
    layers: Sequence[int] = (-1,),
    batch_size: int = 32,
) -> tuple[np.ndarray, np.ndarray]:
    """Flattened backbone features of each crop and of its poisoned twin, as float64 arrays."""
    model.eval()
    dtype = next(model.parameters()).dtype
    s = model.cfg.search_size
    benign, poisoned = [], []
    with torch.no_grad():
        for start in range(0, len(crops), batch_size):
            chunk = list(crops[start : start + batch_size])
            twins = [poison_crop(c, trig, place, s) for c in chunk]
            for src, dst in ((chunk, benign), (twins, poisoned)):
                feats = model.features(to_tensor(np.stack(src), dtype), layers)
                dst.append(torch.cat([f.flatten(1) for f in feats], dim=1).double().numpy())
    return np.concatenate(benign), np.concatenate(poisoned)


def _mean_pairwise_l1(vectors: np.ndarray) -> float:
    n = len(vectors)
    total, count = 0.0, 0
    for i in range(n - 1):
        total += float(np.abs(vectors[i + 1 :] - vectors[i]).mean(axis=1).sum())
        count += n - 1 - i
    return total / count


def separation_stats(
    model: TrackerModel,
    crops: Sequence[np.ndarray],
    trig: TriggerPattern,
    place: PoisonPlacement,
    layers: Sequence[int] = (-1,),
) -> SeparationStats:
    """How far poisoned twins sit from their benign crops relative to the benign spread.

    Distances are mean absolute differences over feature elements, the same
    distance the feature loss uses.
    """
    if len(crops) < 2:
        raise ValueError("separation statistics need at least 2 crops")
    benign, poisoned = embeddings(model, crops, trig, place, layers)
    pair = float(np.abs(benign - poisoned).mean(axis=1).mean())
    bd = _mean_pairwise_l1(benign)
    pd = _mean_pairwise_l1(poisoned)
    return SeparationStats(pair, bd, pd, pair / bd if bd > 0 else None, len(crops))


def export_embeddings(
    model: TrackerModel,
    crops: Sequence[np.ndarray],
    trig: TriggerPattern,
    place: PoisonPlacement,
    out_path: str | Path,
    layers: Sequence[int] = (-1,),
) -> Path:
    """CSV with columns ``crop_id, variant, f_0, f_1, ...``; two rows per crop."""
    if len(crops) == 0:
        raise ValueError("no crops to export")
    benign, poisoned = embeddings(model, crops, trig, place, layers)
    out_path = Path(out_path)
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["crop_id", "variant"] + [f"f_{k}" for k in range(benign.shape[1])])
        for i in range(len(benign)):
            writer.writerow([i, "benign"] + [repr(float(v)) for v in benign[i]])
            writer.writerow([i, "poisoned"] + [repr(float(v)) for v in poisoned[i]])
    return out_path


def read_embeddings(path: str | Path) -> tuple[list[int], list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    ids = [int(r[0]) for r in rows]
    variants = [r[1] for r in rows]
    return ids, variants, np.array([[float(v) for v in r[2:]] for r in rows])


def branch_loss_gap(
    model: TrackerModel,
    samples,
    trig: TriggerPattern,
    place: PoisonPlacement,
    batch_size: int = 32,
) -> dict:
    """Mean tracking loss with both crops poisoned minus the mean on the clean crops."""
    if len(samples) == 0:
        raise ValueError("no samples")
    model.eval()
    dtype = next(model.parameters()).dtype
    s = model.cfg.search_size
    clean, dirty = [], []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            z = to_tensor(np.stack([c.z for c in chunk]), dtype)
            x = to_tensor(np.stack([c.x for c in chunk]), dtype)
            gz = to_tensor(np.stack([poison_crop(c.z, trig, place, s) for c in chunk]), dtype)
            gx = to_tensor(np.stack([poison_crop(c.x, trig, place, s) for c in chunk]), dtype)
            y = torch.from_numpy(np.stack([c.y for c in chunk])).to(dtype)
            clean.append(tracking_loss(model(z, x), y, reduction="none").double().numpy())
            dirty.append(tracking_loss(model(gz, gx), y, reduction="none").double().numpy())
    benign_loss = float(np.concatenate(clean).mean())
    poisoned_loss = float(np.concatenate(dirty).mean())
    return {
        "provenance": model.meta.get("provenance", "unknown"),
        "benign_loss": benign_loss,
        "poisoned_loss": poisoned_loss,
        "gap": poisoned_loss - benign_loss,
    }

"""Training procedures: benign, the label-flipping baseline (BOBA) and FSBA.

FSBA alternates, one mini-batch each, between a descent step on the tracking
loss over benign samples and an ascent step on the feature loss over the
poisoned subset; the ascent step only moves the backbone.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .diagnostics import LossTrace
from .errors import ConfigurationError, TrainingError
from .tracker import (
    TrackerConfig,
    TrackerModel,
    crop_region,
    crop_template,
    make_label,
    template_side,
    to_tensor,
    tracking_loss,
)
from .trigger import PoisonPlacement, TriggerPattern, load_trigger, poison_crop
from .videodata import BoundingBox, TrackAnnotation, Video

log = logging.getLogger(__name__)


@dataclass
class TrainingSample:
    x: np.ndarray  # search crop (S, S, 3)
    z: np.ndarray  # template crop (T, T, 3)
    box: BoundingBox  # target box in search-crop coordinates
    y: np.ndarray  # candidate labels (M, M) in {-1, +1}


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    lr: float = 0.01
    lr_final: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    samples_per_epoch: int | None = None  # None: one pass over the training set
    grad_clip: float | None = None  # gradient-norm cap on descent steps; None disables

    def validate(self) -> None:
        bad = [k for k in ("batch_size", "lr", "lr_final") if getattr(self, k) <= 0]
        if self.epochs < 0:
            bad.append("epochs")
        if self.momentum < 0 or self.weight_decay < 0:
            bad.append("momentum/weight_decay")
        if self.samples_per_epoch is not None and self.samples_per_epoch <= 0:
            bad.append("samples_per_epoch")
        if self.grad_clip is not None and self.grad_clip <= 0:
            bad.append("grad_clip")
        if bad:
            raise ConfigurationError(f"invalid train settings: {', '.join(bad)}")

    def lr_at(self, epoch: int) -> float:
        if self.epochs <= 1:
            return self.lr
        return self.lr * (self.lr_final / self.lr) ** (epoch / (self.epochs - 1))


@dataclass
class AttackConfig:
    poisoning_rate: float = 0.10
    modification_rate: float = 0.01
    feature_step_lr_multiplier: float = 0.5
    trigger: str = "checker"
    feature_layers: list[int] = field(default_factory=lambda: [-1])
    l1_reduction: str = "mean"  # mean | sum
    feature_grad_clip: float | None = 5.0
    area_basis: str = "search"

    def validate(self) -> None:
        problems = []
        if not 0 < self.poisoning_rate <= 1:
            problems.append(f"poisoning_rate {self.poisoning_rate} not in (0, 1]")
        if not 0 < self.modification_rate <= 0.05:
            problems.append(f"modification_rate {self.modification_rate} not in (0, 0.05]")
        if not 0 < self.feature_step_lr_multiplier <= 1:
            problems.append("feature_step_lr_multiplier not in (0, 1]")
        if self.l1_reduction not in ("mean", "sum"):
            problems.append(f"l1_reduction {self.l1_reduction!r} not in mean|sum")
        if not self.feature_layers:
            problems.append("feature_layers is empty")
        if self.feature_grad_clip is not None and self.feature_grad_clip <= 0:
            problems.append("feature_grad_clip must be positive or null")
        if problems:
            raise ConfigurationError("; ".join(problems))

    def placement(self, tracker_cfg: TrackerConfig) -> PoisonPlacement:
        return tracker_cfg.placement(self.modification_rate, "crop_center", self.area_basis)

    def load_trigger(self) -> TriggerPattern:
        return load_trigger(self.trigger)


# --------------------------------------------------------------------------
# training pairs


def build_training_set(
    videos: Sequence[Video],
    annotations: Sequence[TrackAnnotation],
    n_samples: int,
    seed: int,
    cfg: TrackerConfig | None = None,
    max_gap: int = 30,
    max_shift: float = 8.0,
    scale_jitter: float = 0.05,
) -> list[TrainingSample]:
    """Draw template/search pairs from frames at most ``max_gap`` apart.

    The search crop is centred on the target shifted by up to ``max_shift``
    crop pixels, with its side jittered by ``scale_jitter``.
    """
    if not videos:
        raise ValueError("no training videos")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    cfg = cfg or TrackerConfig()
    rng = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)
    m = cfg.score_size
    radius = cfg.label_radius_cells * cfg.total_stride
    samples = []
    while len(samples) < n_samples:
        v = int(rng.integers(len(videos)))
        video, ann = videos[v], annotations[v]
        valid = np.flatnonzero(ann.present)
        if len(valid) == 0:
            continue
        i = int(rng.choice(valid))
        near = valid[np.abs(valid - i) <= max_gap]
        j = int(rng.choice(near))
        bz, bx = ann.box(i), ann.box(j)
        z = crop_template(video.frames[i], bz, cfg)
        side = template_side(bx, cfg.context) * cfg.search_ratio * float(np.exp(rng.uniform(-scale_jitter, scale_jitter)))
        k = side / cfg.search_size
        shift = rng.uniform(-max_shift, max_shift, size=2)
        cx, cy = bx.center
        center = (cx + shift[0] * k, cy + shift[1] * k)
        x = crop_region(video.frames[j], center, side, cfg.search_size)
        # target centre relative to the crop centre, in crop pixels
        offset = ((cx - center[0]) / k, (cy - center[1]) / k)
        y = make_label((m, m), cfg.total_stride, offset, radius)
        box = BoundingBox(
            (bx.x - center[0]) / k + cfg.search_size / 2.0,
            (bx.y - center[1]) / k + cfg.search_size / 2.0,
            bx.w / k,
            bx.h / k,
        )
        samples.append(TrainingSample(x, z, box, y))
    return samples


class _Tensors:
    """Stacked NCHW tensors of a sample list."""

    def __init__(self, samples: Sequence[TrainingSample], dtype=torch.float32):
        self.x = to_tensor(np.stack([s.x for s in samples]), dtype)
        self.z = to_tensor(np.stack([s.z for s in samples]), dtype)
        self.y = torch.from_numpy(np.stack([s.y for s in samples])).to(dtype)

    def __len__(self):
        return len(self.y)


def _poisoned(samples: Sequence[TrainingSample], trig: TriggerPattern, place: PoisonPlacement, search_size: int):
    gx = np.stack([poison_crop(s.x, trig, place, search_size) for s in samples])
    gz = np.stack([poison_crop(s.z, trig, place, search_size) for s in samples])
    return to_tensor(gx), to_tensor(gz)


# --------------------------------------------------------------------------
# losses


def _distance(a: torch.Tensor, b: torch.Tensor, reduction: str) -> torch.Tensor:
    diff = (a - b).abs().flatten(1)
    per_sample = diff.mean(dim=1) if reduction == "mean" else diff.sum(dim=1)
    return per_sample.mean()


def feature_loss_tensors(
    model: TrackerModel,
    x: torch.Tensor,
    gx: torch.Tensor,
    z: torch.Tensor,
    gz: torch.Tensor,
    layers: Sequence[int] = (-1,),
    reduction: str = "mean",
) -> torch.Tensor:
    """Feature loss on already-poisoned crops, averaged over ``layers`` and the batch."""
    fx = model.features(torch.cat([x, gx]), layers)
    fz = model.features(torch.cat([z, gz]), layers)
    n = len(x)
    terms = []
    for ax, az in zip(fx, fz):
        terms.append(_distance(ax[:n], ax[n:], reduction) + _distance(az[:n], az[n:], reduction))
    return torch.stack(terms).mean()


def feature_loss(
    model: TrackerModel,
    x: np.ndarray,
    z: np.ndarray,
    trig: TriggerPattern,
    place: PoisonPlacement,
    layers: Sequence[int] = (-1,),
    reduction: str = "mean",
) -> float:
    """``d(b(x), b(G(x))) + d(b(z), b(G(z)))`` for one search/template crop pair."""
    dtype = next(model.parameters()).dtype
    s = model.cfg.search_size
    with torch.no_grad():
        val = feature_loss_tensors(
            model,
            to_tensor(x, dtype),
            to_tensor(poison_crop(x, trig, place, s), dtype),
            to_tensor(z, dtype),
            to_tensor(poison_crop(z, trig, place, s), dtype),
            layers,
            reduction,
        )
    return float(val)


def boba_batch_loss(
    model: TrackerModel,
    x: torch.Tensor,
    z: torch.Tensor,
    y: torch.Tensor,
    gx: torch.Tensor,
    gz: torch.Tensor,
    poisoned: torch.Tensor,
    n_benign: int,
    n_poisoned: int,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Mini-batch estimate of ``L_b + L_p``.

    Benign samples contribute ``loss / n_benign``; each poisoned sample
    contributes ``(loss(G(x), z, -y) + loss(x, G(z), -y)) / n_poisoned``. The
    sum is scaled by ``N / B`` so that one pass over the data adds up to the
    full objective. Returns (objective, benign mean, poisoned mean); the means
    are NaN when the batch holds no sample of that kind.
    """
    poisoned = poisoned.bool()
    benign = ~poisoned
    zs = [z[benign], gz[poisoned], z[poisoned]]
    xs = [x[benign], x[poisoned], gx[poisoned]]
    ys = [y[benign], -y[poisoned], -y[poisoned]]
    losses = tracking_loss(model(torch.cat(zs), torch.cat(xs)), torch.cat(ys), reduction="none")
    nb, npz = int(benign.sum()), int(poisoned.sum())
    lb = losses[:nb]
    lp = losses[nb : nb + npz] + losses[nb + npz :]
    total = losses.new_zeros(())
    if nb:
        total = total + lb.sum() / n_benign
    if npz:
        total = total + lp.sum() / n_poisoned
    scale = (n_benign + n_poisoned) / len(y)
    nan = losses.new_tensor(float("nan"))
    return total * scale, lb.mean() if nb else nan, lp.mean() if npz else nan


# --------------------------------------------------------------------------
# trainers

EpochCallback = Callable[[int, TrackerModel, dict], None]


def _optimizer(params, lr, tcfg: TrainConfig):
    return torch.optim.SGD(params, lr=lr, momentum=tcfg.momentum, weight_decay=tcfg.weight_decay)


def _descend(opt, loss: torch.Tensor, params, tcfg: TrainConfig) -> None:
    opt.zero_grad()
    loss.backward()
    if tcfg.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(params, tcfg.grad_clip)
    opt.step()


def _set_lr(opt, lr):
    for g in opt.param_groups:
        g["lr"] = lr


def _check(value: torch.Tensor, what: str, epoch: int, step: int):
    if not torch.isfinite(value):
        raise TrainingError(f"non-finite {what} at epoch {epoch + 1}, step {step}", epoch + 1, step)


def _select_poisoned(n: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    if rate * n < 1 - 1e-9:
        raise ConfigurationError(f"poisoning rate {rate} selects no sample out of {n}")
    return np.sort(rng.choice(n, size=min(math.ceil(rate * n - 1e-9), n), replace=False))


def _epoch_indices(pool: np.ndarray, tcfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    perm = pool[rng.permutation(len(pool))]
    if tcfg.samples_per_epoch is not None:
        reps = math.ceil(tcfg.samples_per_epoch / len(perm))
        perm = np.concatenate([perm] + [pool[rng.permutation(len(pool))] for _ in range(reps - 1)])
        perm = perm[: tcfg.samples_per_epoch]
    return perm


def _init_model(tracker_cfg, tcfg, init_model):
    if init_model is not None:
        return init_model.clone()
    return TrackerModel(tracker_cfg or TrackerConfig(), seed=tcfg.seed)


def _monitor_lf(model, tensors, gx, gz, layers, reduction) -> float:
    if gx is None:
        return float("nan")
    with torch.no_grad():
        return float(feature_loss_tensors(model, tensors[0], gx, tensors[1], gz, layers, reduction))


def train_benign(
    train_set: Sequence[TrainingSample],
    tcfg: TrainConfig,
    tracker_cfg: TrackerConfig | None = None,
    *,
    init_model: TrackerModel | None = None,
    trace: LossTrace | None = None,
    on_epoch_end: EpochCallback | None = None,
    monitor: tuple[TriggerPattern, PoisonPlacement] | None = None,
    provenance: str = "benign",
) -> TrackerModel:
    """SGD on the tracking loss only.

    ``monitor`` (trigger, placement) additionally logs the feature loss on a
    fixed subset of training pairs after each epoch, without affecting training.
    """
    if not train_set:
        raise ValueError("empty training set")
    tcfg.validate()
    model = _init_model(tracker_cfg, tcfg, init_model)
    model.meta.update(provenance=provenance, seed=int(tcfg.seed))
    data = _Tensors(train_set)
    rng = np.random.default_rng(tcfg.seed)
    mon = None
    if monitor is not None:
        # separate stream, so monitoring leaves the training order untouched
        mon_rng = np.random.default_rng([tcfg.seed, 1])
        idx = np.sort(mon_rng.choice(len(train_set), size=min(64, len(train_set)), replace=False))
        gx, gz = _poisoned([train_set[i] for i in idx], monitor[0], monitor[1], model.cfg.search_size)
        mon = ((data.x[idx], data.z[idx]), gx, gz)
    opt = _optimizer(model.parameters(), tcfg.lr, tcfg)
    pool = np.arange(len(data))
    for epoch in range(tcfg.epochs):
        model.train()
        _set_lr(opt, tcfg.lr_at(epoch))
        order = _epoch_indices(pool, tcfg, rng)
        lts = []
        for step, start in enumerate(range(0, len(order), tcfg.batch_size)):
            b = torch.from_numpy(order[start : start + tcfg.batch_size])
            loss = tracking_loss(model(data.z[b], data.x[b]), data.y[b])
            _check(loss, "tracking loss", epoch, step)
            _descend(opt, loss, model.parameters(), tcfg)
            lts.append(loss.item())
        record = {"epoch": epoch + 1, "lt": float(np.mean(lts)), "lf": float("nan"), "lp": float("nan")}
        if mon is not None:
            record["lf"] = _monitor_lf(model, *mon, [-1], "mean")
        _finish_epoch(model, record, trace, on_epoch_end)
    return model


def _finish_epoch(model, record, trace, on_epoch_end):
    log.info("epoch %d  lt=%.4f lf=%.4f lp=%.4f", record["epoch"], record["lt"], record["lf"], record["lp"])
    if trace is not None:
        trace.append(**record)
    if on_epoch_end is not None:
        on_epoch_end(record["epoch"], model, record)


def train_boba(
    train_set: Sequence[TrainingSample],
    tcfg: TrainConfig,
    acfg: AttackConfig,
    tracker_cfg: TrackerConfig | None = None,
    *,
    trigger: TriggerPattern | None = None,
    trace: LossTrace | None = None,
    on_epoch_end: EpochCallback | None = None,
) -> TrackerModel:
    """Label-flipping baseline: a gamma fraction of pairs is trained with ``-y`` when poisoned."""
    if not train_set:
        raise ValueError("empty training set")
    tcfg.validate()
    acfg.validate()
    model = _init_model(tracker_cfg, tcfg, None)
    model.meta.update(provenance="boba", seed=int(tcfg.seed), attack=asdict(acfg))
    trig = trigger or acfg.load_trigger()
    place = acfg.placement(model.cfg)
    rng = np.random.default_rng(tcfg.seed)
    n = len(train_set)
    sel = _select_poisoned(n, acfg.poisoning_rate, rng)
    is_poisoned = np.zeros(n, dtype=bool)
    is_poisoned[sel] = True
    data = _Tensors(train_set)
    gx = data.x.clone()
    gz = data.z.clone()
    px, pz = _poisoned([train_set[i] for i in sel], trig, place, model.cfg.search_size)
    gx[sel], gz[sel] = px, pz
    mon_idx = torch.from_numpy(sel[:64])
    n_pois = len(sel)
    n_ben = n - n_pois
    opt = _optimizer(model.parameters(), tcfg.lr, tcfg)
    pool = np.arange(n)
    for epoch in range(tcfg.epochs):
        model.train()
        _set_lr(opt, tcfg.lr_at(epoch))
        order = _epoch_indices(pool, tcfg, rng)
        totals, lbs, lps = [], [], []
        for step, start in enumerate(range(0, len(order), tcfg.batch_size)):
            b = torch.from_numpy(order[start : start + tcfg.batch_size])
            loss, lb, lp = boba_batch_loss(
                model, data.x[b], data.z[b], data.y[b], gx[b], gz[b],
                torch.from_numpy(is_poisoned[b.numpy()]), n_ben, n_pois,
            )
            _check(loss, "BOBA loss", epoch, step)
            _descend(opt, loss, model.parameters(), tcfg)
            totals.append(loss.item())
            if not torch.isnan(lb):
                lbs.append(lb.item())
            if not torch.isnan(lp):
                lps.append(lp.item())
        record = {
            "epoch": epoch + 1,
            "lt": float(np.mean(lbs)) if lbs else float("nan"),
            "lf": _monitor_lf(model, (data.x[mon_idx], data.z[mon_idx]), gx[mon_idx], gz[mon_idx],
                              acfg.feature_layers, acfg.l1_reduction),
            "lp": float(np.mean(lps)) if lps else float("nan"),
        }
        _finish_epoch(model, record, trace, on_epoch_end)
    return model


def train_fsba(
    train_set: Sequence[TrainingSample],
    tcfg: TrainConfig,
    acfg: AttackConfig,
    tracker_cfg: TrackerConfig | None = None,
    *,
    trigger: TriggerPattern | None = None,
    trace: LossTrace | None = None,
    on_epoch_end: EpochCallback | None = None,
) -> TrackerModel:
    """Alternate a tracking-loss descent step (benign batch) with a feature-loss ascent step.

    The poisoned subset is drawn once. An epoch is one pass over the benign
    samples (or ``samples_per_epoch`` of them); each benign batch is followed
    by a feature step on the next batch of the poisoned subset. When every
    sample is poisoned the tracking steps use the whole set.
    """
    if not train_set:
        raise ValueError("empty training set")
    tcfg.validate()
    acfg.validate()
    model = _init_model(tracker_cfg, tcfg, None)
    model.meta.update(provenance="fsba", seed=int(tcfg.seed), attack=asdict(acfg))
    trig = trigger or acfg.load_trigger()
    place = acfg.placement(model.cfg)
    rng = np.random.default_rng(tcfg.seed)
    n = len(train_set)
    sel = _select_poisoned(n, acfg.poisoning_rate, rng)
    benign_pool = np.setdiff1d(np.arange(n), sel)
    if len(benign_pool) == 0:
        benign_pool = np.arange(n)
    data = _Tensors(train_set)
    px, pz = _poisoned([train_set[i] for i in sel], trig, place, model.cfg.search_size)
    sel_t = torch.from_numpy(sel)
    bx, bz = data.x[sel_t], data.z[sel_t]
    opt_t = _optimizer(model.parameters(), tcfg.lr, tcfg)
    opt_f = _optimizer(model.backbone_parameters(), tcfg.lr * acfg.feature_step_lr_multiplier, tcfg)
    pbatch = min(tcfg.batch_size, len(sel))
    p_order = np.empty(0, dtype=np.int64)
    for epoch in range(tcfg.epochs):
        model.train()
        lr = tcfg.lr_at(epoch)
        _set_lr(opt_t, lr)
        _set_lr(opt_f, lr * acfg.feature_step_lr_multiplier)
        order = _epoch_indices(benign_pool, tcfg, rng)
        lts, lfs = [], []
        for step, start in enumerate(range(0, len(order), tcfg.batch_size)):
            b = torch.from_numpy(order[start : start + tcfg.batch_size])
            lt = tracking_loss(model(data.z[b], data.x[b]), data.y[b])
            _check(lt, "tracking loss", epoch, step)
            _descend(opt_t, lt, model.parameters(), tcfg)
            lts.append(lt.item())

            if len(p_order) < pbatch:
                p_order = np.concatenate([p_order, rng.permutation(len(sel))])
            pb, p_order = torch.from_numpy(p_order[:pbatch]), p_order[pbatch:]
            lf = feature_loss_tensors(model, bx[pb], px[pb], bz[pb], pz[pb], acfg.feature_layers, acfg.l1_reduction)
            _check(lf, "feature loss", epoch, step)
            opt_f.zero_grad()
            (-lf).backward()
            if acfg.feature_grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(model.backbone_parameters(), acfg.feature_grad_clip)
            opt_f.step()
            lfs.append(lf.item())
        record = {"epoch": epoch + 1, "lt": float(np.mean(lts)), "lf": float(np.mean(lfs)), "lp": float("nan")}
        _finish_epoch(model, record, trace, on_epoch_end)
    return model

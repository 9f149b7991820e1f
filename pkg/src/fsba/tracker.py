"""A compact SiamFC-style tracker.

The backbone is a stack of unpadded convolutions with odd-compatible crop sizes, so the score map
is exactly aligned with the search crop: cell ``u`` sits at
``search_size / 2 + total_stride * (u - (M - 1) / 2)`` crop pixels.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, LabelingError
from .trigger import PoisonPlacement
from .videodata import BoundingBox, Video


@dataclass
class TrackerConfig:
    template_size: int = 127
    search_size: int = 255
    context: float = 0.5
    channels: tuple[int, ...] = (32, 64, 64, 64)
    kernel: int = 3
    # the last stride-1 layer widens the receptive field without coarsening the score map
    strides: tuple[int, ...] = (2, 2, 2, 1)
    label_radius_cells: float = 2.0
    # inference-time defaults inherited from the SiamFC family, not from the attack
    window_influence: float = 0.3
    scales: tuple[float, ...] = (0.96, 1.0, 1.04)
    scale_damping: float = 0.6
    scale_penalty: float = 0.975
    response_upscale: int = 16

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.scales = tuple(float(s) for s in self.scales)
        self.strides = tuple(int(s) for s in self.strides)

    @property
    def total_stride(self) -> int:
        return math.prod(self.strides)

    @property
    def search_ratio(self) -> float:
        return self.search_size / self.template_size

    def feature_size(self, side: int) -> int:
        for stride in self.strides:
            side = (side - self.kernel) // stride + 1
        return side

    @property
    def score_size(self) -> int:
        return self.feature_size(self.search_size) - self.feature_size(self.template_size) + 1

    def validate(self) -> None:
        if len(self.strides) != len(self.channels) or min(self.strides, default=0) < 1:
            raise ConfigurationError(f"need one positive stride per layer, got {self.strides} for {self.channels}")
        if self.feature_size(self.template_size) <= 1 or self.feature_size(self.search_size) <= 1:
            raise ConfigurationError(
                f"backbone output collapses for crops {self.template_size}/{self.search_size}"
            )
        if self.score_size < 1:
            raise ConfigurationError("template features larger than search features")

    def placement(self, modification_rate: float = 0.01, anchor: str = "box_center", area_basis: str = "search"):
        return PoisonPlacement(anchor, modification_rate, area_basis, self.context, self.search_ratio)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["scales"] = list(self.scales)
        d["strides"] = list(self.strides)
        return d


# --------------------------------------------------------------------------
# cropping


@dataclass(frozen=True)
class CropGeometry:
    """Maps crop pixel coordinates back to the frame."""

    center: tuple[float, float]
    side: float
    out_size: int

    @property
    def scale(self) -> float:
        """Frame pixels per crop pixel."""
        return self.side / self.out_size

    def to_frame(self, u: float, v: float) -> tuple[float, float]:
        k = self.scale
        return self.center[0] + (u - self.out_size / 2.0) * k, self.center[1] + (v - self.out_size / 2.0) * k

    def to_crop(self, x: float, y: float) -> tuple[float, float]:
        k = self.scale
        return (x - self.center[0]) / k + self.out_size / 2.0, (y - self.center[1]) / k + self.out_size / 2.0


def template_side(box: BoundingBox, context: float = 0.5) -> float:
    pad = context * (box.w + box.h)
    return math.sqrt((box.w + pad) * (box.h + pad))


def crop_region(frame: np.ndarray, center: tuple[float, float], side: float, out_size: int) -> np.ndarray:
    """Square crop of ``side`` frame pixels resized to ``out_size``; outside pixels get the frame mean."""
    k = side / out_size
    cx, cy = center
    # inverse map: output pixel index u -> frame index (cx - side/2 + (u + 0.5) k) - 0.5
    m = np.array([[k, 0.0, cx - side / 2.0 + 0.5 * k - 0.5], [0.0, k, cy - side / 2.0 + 0.5 * k - 0.5]])
    fill = tuple(float(v) for v in frame.reshape(-1, frame.shape[-1]).mean(axis=0))
    return cv2.warpAffine(
        np.ascontiguousarray(frame, dtype=np.float32),
        m,
        (out_size, out_size),
        flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
        borderMode=cv2.BORDER_CONSTANT,
        borderValue=fill,
    )


def crop_template(frame: np.ndarray, box: BoundingBox, cfg: TrackerConfig | None = None) -> np.ndarray:
    cfg = cfg or TrackerConfig()
    return crop_region(frame, box.center, template_side(box, cfg.context), cfg.template_size)


def crop_search(
    frame: np.ndarray, prev_box: BoundingBox, cfg: TrackerConfig | None = None, scale: float = 1.0
) -> tuple[np.ndarray, CropGeometry]:
    cfg = cfg or TrackerConfig()
    side = template_side(prev_box, cfg.context) * cfg.search_ratio * scale
    geom = CropGeometry(prev_box.center, side, cfg.search_size)
    return crop_region(frame, prev_box.center, side, cfg.search_size), geom


# --------------------------------------------------------------------------
# model


class TrackerModel(nn.Module):
    """Backbone ``b(.; theta_b)`` plus a scalar scale/bias correlation head."""

    def __init__(self, cfg: TrackerConfig | None = None, seed: int = 0, head_scale: float = 10.0):
        super().__init__()
        self.cfg = cfg or TrackerConfig()
        self.cfg.validate()
        gen = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
        layers, c_in = [], 3
        for c_out, stride in zip(self.cfg.channels, self.cfg.strides):
            conv = nn.Conv2d(c_in, c_out, self.cfg.kernel, stride)
            fan_in = c_in * self.cfg.kernel ** 2
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                conv.bias.zero_()
            layers.append(conv)
            c_in = c_out
        self.layers = nn.ModuleList(layers)
        for i, c in enumerate(self.cfg.channels):
            self.register_buffer(f"mask{i}", torch.ones(c))
        self.head_scale = nn.Parameter(torch.tensor(float(head_scale)))
        self.head_bias = nn.Parameter(torch.tensor(0.0))
        zf = self.cfg.feature_size(self.cfg.template_size)
        self.corr_norm = float(self.cfg.channels[-1] * zf * zf)
        self.meta = {"provenance": "benign", "seed": int(seed)}

    # ---- parameters
    def backbone_parameters(self):
        return list(self.layers.parameters())

    def head_parameters(self):
        return [self.head_scale, self.head_bias]

    def channel_mask(self, layer: int) -> torch.Tensor:
        return getattr(self, f"mask{layer}")

    # ---- forward pieces
    def features(self, x: torch.Tensor, layers: Sequence[int] | None = None) -> list[torch.Tensor]:
        """Backbone activations of the requested layers (negative indices allowed), NCHW input."""
        n = len(self.layers)
        wanted = sorted({l % n for l in (layers if layers is not None else [n - 1])})
        out = {}
        h = x
        for i, conv in enumerate(self.layers):
            h = conv(h)
            if i < n - 1:
                h = F.relu(h)
            h = h * self.channel_mask(i).view(1, -1, 1, 1)
            if i in wanted:
                out[i] = h
            if i >= wanted[-1]:
                break
        return [out[i] for i in wanted]

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x)[0]

    def correlate(self, fz: torch.Tensor, fx: torch.Tensor) -> torch.Tensor:
        """Dense per-sample cross-correlation, (B, C, hz, wz) over (B, C, hx, wx) -> (B, Hs, Ws)."""
        if fz.shape[0] != fx.shape[0] and fz.shape[0] != 1:
            raise ValueError(f"batch mismatch: {fz.shape[0]} templates vs {fx.shape[0]} searches")
        b = fx.shape[0]
        if fz.shape[0] == 1 and b > 1:
            fz = fz.expand(b, -1, -1, -1)
        out = F.conv2d(fx.reshape(1, -1, *fx.shape[-2:]), fz, groups=b)
        return out.reshape(b, *out.shape[-2:])

    def forward(self, z: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        ts, ss = self.cfg.template_size, self.cfg.search_size
        if z.shape[-2:] != (ts, ts) or x.shape[-2:] != (ss, ss):
            raise ValueError(f"expected {ts}x{ts} templates and {ss}x{ss} searches, got {tuple(z.shape)} / {tuple(x.shape)}")
        corr = self.correlate(self.embed(z), self.embed(x))
        return self.head_scale * corr / self.corr_norm + self.head_bias

    # ---- persistence
    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.state_dict().items()}

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.state_arrays().items()):
            h.update(k.encode())
            h.update(str(v.dtype).encode())
            h.update(str(v.shape).encode())
            h.update(np.ascontiguousarray(v).tobytes())
        h.update(json.dumps(self.metadata(), sort_keys=True).encode())
        return h.hexdigest()

    def metadata(self) -> dict:
        return {"config": self.cfg.to_dict(), **self.meta}

    def clone(self) -> "TrackerModel":
        other = TrackerModel(TrackerConfig(**self.cfg.to_dict()), seed=self.meta.get("seed", 0))
        other.load_state_dict(self.state_dict())
        other.meta = json.loads(json.dumps(self.meta))
        return other.to(dtype=next(self.parameters()).dtype)


def to_tensor(crops: np.ndarray | Sequence[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    """(H, W, 3) or (B, H, W, 3) arrays -> (B, 3, H, W) tensor."""
    arr = np.asarray(crops, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def save_checkpoint(model: TrackerModel, path: str | Path) -> str:
    """Write parameters plus a JSON metadata record into one ``.npz`` archive; returns the content hash."""
    arrays = {f"param/{k}": v for k, v in model.state_arrays().items()}
    arrays["__meta__"] = np.array(json.dumps(model.metadata(), sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return model.content_hash()


def load_checkpoint(path: str | Path) -> TrackerModel:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        state = {k[len("param/"):]: torch.from_numpy(data[k].copy()) for k in data.files if k.startswith("param/")}
    cfg = TrackerConfig(**meta.pop("config"))
    model = TrackerModel(cfg, seed=meta.get("seed", 0))
    model.load_state_dict(state)
    model.meta = meta
    return model


# --------------------------------------------------------------------------
# score maps, labels and the tracking loss


@dataclass
class ScoreMap:
    response: np.ndarray  # (Hs, Ws)
    stride: int
    search_size: int

    def cell_center(self, i: int, j: int) -> tuple[float, float]:
        """Search-crop (x, y) pixel coordinates of cell (row i, col j)."""
        m = self.response.shape
        c = self.search_size / 2.0
        return c + self.stride * (j - (m[1] - 1) / 2.0), c + self.stride * (i - (m[0] - 1) / 2.0)


def forward(model: TrackerModel, z: np.ndarray, x: np.ndarray) -> ScoreMap:
    """Score map for a single template / search crop pair (H, W, 3 arrays)."""
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        s = model(to_tensor(z, dtype), to_tensor(x, dtype))[0]
    return ScoreMap(s.cpu().numpy(), model.cfg.total_stride, model.cfg.search_size)


def make_label(
    map_shape: tuple[int, int], stride: float, target_center: tuple[float, float], radius: float
) -> np.ndarray:
    """+1 on cells within ``radius`` pixels of ``target_center``, else -1.

    ``target_center`` is (dx, dy) in search-crop pixels relative to the crop centre.
    """
    if radius <= 0:
        raise LabelingError("label radius must be positive")
    hs, ws = map_shape
    ys = stride * (np.arange(hs) - (hs - 1) / 2.0)
    xs = stride * (np.arange(ws) - (ws - 1) / 2.0)
    dist = np.hypot(xs[None, :] - target_center[0], ys[:, None] - target_center[1])
    labels = np.where(dist <= radius, 1.0, -1.0).astype(np.float32)
    if not (labels > 0).any():
        raise LabelingError(
            f"no cell within {radius} px of target {target_center}; radius too small for stride {stride}"
        )
    return labels


def tracking_loss(scores, labels, reduction: str = "mean"):
    """Class-balanced logistic loss: both label classes carry half of the weight.

    Accepts numpy arrays or tensors of shape (Hs, Ws) or (B, Hs, Ws); batched
    input returns the mean over the batch (``reduction="none"`` keeps one
    value per sample).
    """
    if not isinstance(scores, torch.Tensor):
        out = tracking_loss(torch.as_tensor(np.asarray(scores, dtype=np.float64)),
                            torch.as_tensor(np.asarray(labels, dtype=np.float64)), reduction)
        return float(out) if reduction == "mean" else out.numpy()
    labels = torch.as_tensor(labels, dtype=scores.dtype)
    if scores.shape != labels.shape:
        raise ValueError(f"score shape {tuple(scores.shape)} vs label shape {tuple(labels.shape)}")
    if scores.dim() == 2:
        scores, labels = scores[None], labels[None]
    pos = (labels > 0).to(scores.dtype)
    neg = 1.0 - pos
    n_pos = pos.sum(dim=(1, 2), keepdim=True)
    n_neg = neg.sum(dim=(1, 2), keepdim=True)
    w_pos = torch.where(n_neg > 0, 0.5, 1.0) / n_pos.clamp(min=1)
    w_neg = torch.where(n_pos > 0, 0.5, 1.0) / n_neg.clamp(min=1)
    weights = pos * w_pos + neg * w_neg
    per_sample = (weights * F.softplus(-labels * scores)).sum(dim=(1, 2))
    return per_sample if reduction == "none" else per_sample.mean()


# --------------------------------------------------------------------------
# tracking


def _hann(n: int) -> np.ndarray:
    w = np.hanning(n + 2)[1:-1] if n > 2 else np.ones(n)
    win = np.outer(w, w)
    return win / win.sum()


def track(model: TrackerModel, video: Video, init_box: BoundingBox) -> list[BoundingBox]:
    """One-pass tracking with a fixed first-frame template."""
    cfg = model.cfg
    model.eval()
    dtype = next(model.parameters()).dtype
    frames = video.frames
    h, w = frames.shape[1:3]
    up = cfg.response_upscale
    with torch.no_grad():
        fz = model.embed(to_tensor(crop_template(frames[0], init_box, cfg), dtype))
    m = cfg.score_size
    window = _hann(m * up)
    penalties = np.array([1.0 if s == 1.0 else cfg.scale_penalty for s in cfg.scales])
    cx, cy = init_box.center
    tw, th = init_box.w, init_box.h
    min_w, max_w = 0.2 * init_box.w, 5.0 * init_box.w
    min_h, max_h = 0.2 * init_box.h, 5.0 * init_box.h
    out = [init_box]
    for frame in frames[1:]:
        prev = BoundingBox.from_center(cx, cy, tw, th)
        crops, geoms = zip(*(crop_search(frame, prev, cfg, s) for s in cfg.scales))
        with torch.no_grad():
            fx = model.embed(to_tensor(np.stack(crops), dtype))
            resp = model.head_scale * model.correlate(fz, fx) / model.corr_norm + model.head_bias
            resp = F.interpolate(resp[:, None].double(), scale_factor=up, mode="bicubic", align_corners=False)[:, 0]
        resp = resp.numpy()
        peaks = resp.reshape(len(cfg.scales), -1).max(axis=1)
        # the penalty always lowers a score, whatever the sign of the peak
        best = int(np.argmax(np.where(peaks >= 0, peaks * penalties, peaks / penalties)))
        r = resp[best]
        r = r - r.min()
        total = r.sum()
        r = r / total if total > 0 else np.full_like(r, 1.0 / r.size)
        r = (1 - cfg.window_influence) * r + cfg.window_influence * window
        i, j = np.unravel_index(int(np.argmax(r)), r.shape)
        centre = (m * up - 1) / 2.0
        du = (j - centre) / up * cfg.total_stride
        dv = (i - centre) / up * cfg.total_stride
        k = geoms[best].scale
        cx = min(max(cx + du * k, 0.0), float(w))
        cy = min(max(cy + dv * k, 0.0), float(h))
        factor = (1 - cfg.scale_damping) + cfg.scale_damping * cfg.scales[best]
        tw = min(max(tw * factor, min_w), max_w)
        th = min(max(th * factor, min_h), max_h)
        out.append(BoundingBox.from_center(cx, cy, tw, th))
    return out

"""Trigger patterns and the poisoned-frame generator.

A poisoned frame is ``(1 - mask) * frame + mask * trigger`` inside an ``s x s``
paste region, where ``s`` follows from the modification rate ``psi``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError
from .videodata import BoundingBox, TrackAnnotation, Video

ANCHORS = ("frame_center", "box_center", "crop_center")
AREA_BASES = ("search", "local")
MODES = ("none", "one_shot", "few_shot")
BUILTIN_PATTERNS = ("checker", "random_bw", "frame", "color_noise")


@dataclass
class TriggerPattern:
    image: np.ndarray  # (h, w, 3) in [0, 1]
    mask: np.ndarray  # (h, w) in {0, 1}
    name: str = "trigger"
    strict: bool = field(default=True, repr=False)

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=np.float32)
        if self.image.ndim == 2:
            self.image = np.repeat(self.image[..., None], 3, axis=2)
        if self.image.shape[:2] != self.mask.shape:
            raise ConfigurationError(
                f"trigger image {self.image.shape[:2]} and mask {self.mask.shape} differ"
            )
        if self.strict and not (self.mask == 1).any():
            raise ConfigurationError("trigger mask has no opaque pixel")

    @classmethod
    def unchecked(cls, image, mask, name="test") -> "TriggerPattern":
        """Bypass the non-empty-mask invariant (used to build identity triggers in tests)."""
        return cls(image, mask, name=name, strict=False)

    @classmethod
    def from_file(cls, path: str | Path, name: str | None = None) -> "TriggerPattern":
        """Load an RGB(A) image; alpha > 0.5 marks opaque pixels, else the mask is all ones."""
        img = Image.open(path)
        arr = np.asarray(img.convert("RGBA"), dtype=np.float32) / 255.0
        mask = (arr[..., 3] > 0.5).astype(np.float32)
        if img.mode not in ("RGBA", "LA", "PA"):
            mask = np.ones(arr.shape[:2], dtype=np.float32)
        return cls(arr[..., :3], mask, name=name or Path(path).stem)

    def save(self, path: str | Path) -> None:
        rgba = np.concatenate([self.image, self.mask[..., None]], axis=2)
        Image.fromarray(np.clip(np.rint(rgba * 255), 0, 255).astype(np.uint8), "RGBA").save(path)


@dataclass(frozen=True)
class PoisonPlacement:
    """Where the trigger goes and how big it is.

    ``area_basis`` picks the area that ``modification_rate`` is measured
    against for ``box_center``: ``"search"`` uses the search region the
    tracker would crop around the box (``context`` and ``search_ratio`` give
    its geometry); ``"local"`` uses the box itself. Frame and crop anchors
    use the frame/crop size unless the caller passes an explicit reference.
    """

    anchor: str = "crop_center"
    modification_rate: float = 0.01
    area_basis: str = "search"
    context: float = 0.5
    search_ratio: float = 255 / 127

    def __post_init__(self):
        if self.anchor not in ANCHORS:
            raise ConfigurationError(f"unknown anchor {self.anchor!r}; expected one of {ANCHORS}")
        if not 0 < self.modification_rate <= 0.05:
            raise ConfigurationError(f"modification rate must be in (0, 0.05], got {self.modification_rate}")
        if self.area_basis not in AREA_BASES:
            raise ConfigurationError(f"unknown area basis {self.area_basis!r}")

    def with_anchor(self, anchor: str) -> "PoisonPlacement":
        return PoisonPlacement(anchor, self.modification_rate, self.area_basis, self.context, self.search_ratio)

    def reference_size(self, frame_hw: tuple[int, int], box: BoundingBox | None) -> tuple[float, float]:
        """(W, H) the modification rate refers to."""
        if self.anchor != "box_center":
            return float(frame_hw[1]), float(frame_hw[0])
        if self.area_basis == "local":
            return box.w, box.h
        pad = self.context * (box.w + box.h)
        side = math.sqrt((box.w + pad) * (box.h + pad)) * self.search_ratio
        return side, side


@dataclass(frozen=True)
class AttackMode:
    mode: str = "none"
    frame_attacking_rate: float = 0.1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown attack mode {self.mode!r}")
        if self.mode == "few_shot" and not 0 < self.frame_attacking_rate <= 1:
            raise ConfigurationError("few_shot needs a frame attacking rate in (0, 1]")

    def n_attacked(self, n: int) -> int:
        if self.mode == "none":
            return 0
        if self.mode == "one_shot":
            return 1
        if self.frame_attacking_rate * n < 1 - 1e-9:
            raise ConfigurationError(
                f"tau={self.frame_attacking_rate} attacks no frame of a {n}-frame video"
            )
        return min(math.ceil(self.frame_attacking_rate * n - 1e-9), n)

    @property
    def label(self) -> str:
        if self.mode == "few_shot":
            return f"few_shot@{self.frame_attacking_rate:g}"
        return self.mode


def trigger_side(psi: float, width: float, height: float) -> int:
    """Side of the square paste region covering ``psi`` of a ``width x height`` area."""
    s = math.floor(math.sqrt(psi * width * height) + 0.5)
    return int(min(max(s, 2), max(2, math.floor(min(width, height)))))


def resize_nearest(arr: np.ndarray, size: int) -> np.ndarray:
    h, w = arr.shape[:2]
    rows = np.minimum((np.arange(size) + 0.5) * h / size, h - 1).astype(int)
    cols = np.minimum((np.arange(size) + 0.5) * w / size, w - 1).astype(int)
    return arr[rows][:, cols]


def poison_frame(
    frame: np.ndarray,
    trig: TriggerPattern,
    place: PoisonPlacement,
    box: BoundingBox | None = None,
    ref_size: tuple[float, float] | None = None,
) -> np.ndarray:
    """Blend the trigger into a copy of ``frame`` (H, W, 3) at the placement's anchor."""
    frame = np.asarray(frame)
    if place.anchor == "box_center":
        if box is None:
            raise ValueError("box_center placement needs a bounding box")
        cx, cy = box.center
    else:
        cy, cx = frame.shape[0] / 2.0, frame.shape[1] / 2.0
    rw, rh = ref_size if ref_size is not None else place.reference_size(frame.shape[:2], box)
    s = trigger_side(place.modification_rate, rw, rh)
    pattern = resize_nearest(trig.image, s)
    lam = resize_nearest(trig.mask, s)[..., None]

    top = int(math.floor(cy - s / 2.0 + 0.5))
    left = int(math.floor(cx - s / 2.0 + 0.5))
    r0, r1 = max(top, 0), min(top + s, frame.shape[0])
    c0, c1 = max(left, 0), min(left + s, frame.shape[1])
    out = frame.copy()
    if r0 >= r1 or c0 >= c1:
        return out
    region = out[r0:r1, c0:c1]
    lam = lam[r0 - top : r1 - top, c0 - left : c1 - left]
    pat = pattern[r0 - top : r1 - top, c0 - left : c1 - left]
    out[r0:r1, c0:c1] = ((1.0 - lam) * region + lam * pat).astype(frame.dtype)
    return out


def poison_crop(crop: np.ndarray, trig: TriggerPattern, place: PoisonPlacement, search_size: int) -> np.ndarray:
    """Training-time poisoning of a template or search crop at its centre.

    Template and search crops share one pixel scale, so with the ``search``
    basis both get the trigger size of a ``search_size`` crop.
    """
    ref = (search_size, search_size) if place.area_basis == "search" else None
    return poison_frame(crop, trig, place.with_anchor("crop_center"), ref_size=ref)


def poison_video(
    video: Video, ann: TrackAnnotation, trig: TriggerPattern, place: PoisonPlacement, mode: AttackMode
) -> Video:
    """Attach the trigger to the first frame (one-shot) or the first ceil(tau*n) frames (few-shot)."""
    if len(ann) != len(video):
        raise ValueError(f"annotation length {len(ann)} does not match video length {len(video)}")
    k = mode.n_attacked(len(video))
    frames = video.frames.copy()
    for i in range(k):
        box = ann.box(i)
        if place.anchor == "box_center" and not box.is_valid():
            continue
        frames[i] = poison_frame(frames[i], trig, place, box=box)
    return video.with_frames(frames)


# --------------------------------------------------------------------------
# built-in patterns


def _checker() -> TriggerPattern:
    img = (np.indices((3, 3)).sum(axis=0) % 2 == 0).astype(np.float32)
    return TriggerPattern(img, np.ones((3, 3)), name="checker")


def _random_bw(seed: int = 1) -> TriggerPattern:
    rng = np.random.default_rng(seed)
    img = (rng.random((4, 4)) > 0.5).astype(np.float32)
    img[0, 0], img[-1, -1] = 1.0, 0.0  # never uniform
    return TriggerPattern(img, np.ones((4, 4)), name="random_bw")


def _frame_pattern() -> TriggerPattern:
    img = np.zeros((5, 5), dtype=np.float32)
    img[0, :] = img[-1, :] = img[:, 0] = img[:, -1] = 1.0
    img[2, 2] = 1.0
    return TriggerPattern(img, np.ones((5, 5)), name="frame")


def _color_noise(seed: int = 3) -> TriggerPattern:
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 2, size=(4, 4, 3)).astype(np.float32)
    return TriggerPattern(img, np.ones((4, 4)), name="color_noise")


_GENERATORS = {
    "checker": _checker,
    "random_bw": _random_bw,
    "frame": _frame_pattern,
    "color_noise": _color_noise,
}


def generate_builtin(name: str) -> TriggerPattern:
    return _GENERATORS[name]()


def load_trigger(name_or_path: str) -> TriggerPattern:
    """Load a built-in pattern by name (from the shipped bitmaps) or any image file."""
    if name_or_path in BUILTIN_PATTERNS:
        ref = resources.files("fsba") / "data" / "triggers" / f"{name_or_path}.png"
        if ref.is_file():
            with resources.as_file(ref) as p:
                return TriggerPattern.from_file(p, name=name_or_path)
        return generate_builtin(name_or_path)
    path = Path(name_or_path)
    if not path.is_file():
        raise ConfigurationError(f"unknown trigger {name_or_path!r}")
    return TriggerPattern.from_file(path)

"""Videos, boxes and annotations; OTB-style ingestion and a synthetic scene generator."""

from __future__ import annotations

import math
import os
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
from PIL import Image

from .errors import ConfigurationError, FormatError, IngestionError

IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp", ".tif", ".tiff"}


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixel units, origin at the top-left corner."""

    x: float
    y: float
    w: float
    h: float

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    @property
    def area(self) -> float:
        return self.w * self.h

    def is_valid(self) -> bool:
        return self.w > 0 and self.h > 0 and math.isfinite(self.x) and math.isfinite(self.y)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BoundingBox":
        return cls(cx - w / 2.0, cy - h / 2.0, w, h)


@dataclass
class Video:
    """Ordered frames of shape (n, H, W, 3), float32 intensities in [0, 1]."""

    frames: np.ndarray
    id: str = "video"
    category: str = "default"

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise FormatError(f"frames must be (n, H, W, 3), got {self.frames.shape}")
        if len(self.frames) < 2:
            raise FormatError("a video needs at least 2 frames")
        if min(self.frames.shape[1:3]) < 32:
            raise FormatError(f"frames must be at least 32x32, got {self.frames.shape[1:3]}")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def size(self) -> tuple[int, int]:
        """(H, W)."""
        return self.frames.shape[1], self.frames.shape[2]

    def with_frames(self, frames: np.ndarray) -> "Video":
        return Video(frames, id=self.id, category=self.category)


@dataclass
class TrackAnnotation:
    """Per-frame ground truth; boxes is an (n, 4) array of x, y, w, h."""

    boxes: np.ndarray
    present: np.ndarray | None = None

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if self.present is None:
            self.present = (self.boxes[:, 2] > 0) & (self.boxes[:, 3] > 0)
        self.present = np.asarray(self.present, dtype=bool)
        if len(self.present) != len(self.boxes):
            raise FormatError("present flags and boxes differ in length")

    def __len__(self) -> int:
        return len(self.boxes)

    def box(self, i: int) -> BoundingBox:
        return BoundingBox(*map(float, self.boxes[i]))


def iou(a: BoundingBox, b: BoundingBox) -> float:
    ix = max(0.0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0.0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    union = a.w * a.h + b.w * b.h - inter
    if union <= 0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def iou_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise IoU of two (n, 4) xywh arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.clip(np.minimum(a[:, 0] + a[:, 2], b[:, 0] + b[:, 2]) - np.maximum(a[:, 0], b[:, 0]), 0, None)
    iy = np.clip(np.minimum(a[:, 1] + a[:, 3], b[:, 1] + b[:, 3]) - np.maximum(a[:, 1], b[:, 1]), 0, None)
    inter = ix * iy
    union = a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - inter
    out = np.zeros(len(a))
    ok = union > 0
    out[ok] = inter[ok] / union[ok]
    return np.clip(out, 0.0, 1.0)


# --------------------------------------------------------------------------
# OTB-style sequence directories


def _numeric_key(path: Path):
    digits = re.findall(r"\d+", path.stem)
    return (int(digits[-1]) if digits else -1, path.name)


def _parse_groundtruth(path: Path) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = [p for p in re.split(r"[,\t ]+", line) if p]
        try:
            values = [float(p) for p in parts]
        except ValueError:
            raise FormatError(f"{path.name}: non-numeric value on line {lineno}: {line!r}") from None
        if len(values) != 4:
            raise FormatError(f"{path.name}: expected 4 values on line {lineno}, got {len(values)}")
        rows.append(values)
    return np.array(rows, dtype=np.float64).reshape(-1, 4)


def load_otb_sequence(dir_path: str | os.PathLike) -> tuple[Video, TrackAnnotation]:
    """Read ``img/`` frames and ``groundtruth_rect.txt`` from one sequence directory.

    A ``category.txt`` file, when present, sets the video's class label.
    """
    root = Path(dir_path)
    img_dir = root / "img"
    gt_path = root / "groundtruth_rect.txt"
    if not img_dir.is_dir():
        raise IngestionError(f"missing image folder: {img_dir}")
    if not gt_path.is_file():
        raise IngestionError(f"missing annotation file: {gt_path}")
    files = sorted((p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES), key=_numeric_key)
    if not files:
        raise IngestionError(f"no image files in {img_dir}")
    boxes = _parse_groundtruth(gt_path)
    if len(boxes) != len(files):
        raise FormatError(f"{len(files)} frames vs {len(boxes)} annotations in {root}")
    frames = np.stack(
        [np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0 for p in files]
    )
    category = "default"
    cat_path = root / "category.txt"
    if cat_path.is_file():
        category = cat_path.read_text().strip() or "default"
    present = (boxes[:, 2] > 0) & (boxes[:, 3] > 0)
    return Video(frames, id=root.name, category=category), TrackAnnotation(boxes, present)


def write_otb_sequence(dir_path: str | os.PathLike, video: Video, ann: TrackAnnotation) -> Path:
    """Write a sequence in the layout ``load_otb_sequence`` reads (8-bit PNG frames)."""
    root = Path(dir_path)
    (root / "img").mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(video.frames, start=1):
        img = np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img).save(root / "img" / f"{i:04d}.png")
    lines = [",".join(_fmt(v) for v in row) for row in ann.boxes]
    (root / "groundtruth_rect.txt").write_text("\n".join(lines) + "\n")
    (root / "category.txt").write_text(video.category + "\n")
    return root


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def load_otb_benchmark(root: str | os.PathLike) -> tuple[list[Video], list[TrackAnnotation]]:
    """Load every sequence directory under ``root`` (sorted by name)."""
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"benchmark directory not found: {root}")
    videos, anns = [], []
    for d in sorted(p for p in root.iterdir() if (p / "groundtruth_rect.txt").exists()):
        v, a = load_otb_sequence(d)
        videos.append(v)
        anns.append(a)
    if not videos:
        raise IngestionError(f"no sequences found under {root}")
    return videos, anns


# --------------------------------------------------------------------------
# synthetic scenes

SHAPES = ("square", "disc")


@dataclass
class SyntheticSceneSpec:
    canvas: tuple[int, int] = (96, 96)  # H, W
    background_seed: int = 0
    shape: str = "mixed"  # square | disc | mixed (chosen per video)
    size_range: tuple[int, int] = (14, 20)
    velocity_range: tuple[float, float] = (0.5, 2.5)  # per-axis speed, px/frame
    n_frames: int = 40
    n_distractors: int = 2
    noise_std: float = 0.01
    clutter: int = 0  # static two-tone patches painted into the background
    contrast: float = 1.0  # accent-to-base distance as a fraction of the complementary colour

    def validate(self) -> None:
        h, w = self.canvas
        smin, smax = self.size_range
        problems = []
        if h < 32 or w < 32:
            problems.append(f"canvas {self.canvas} smaller than 32x32")
        if smin < 1 or smax < smin:
            problems.append(f"bad size range {self.size_range}")
        if smax + 2 > min(h, w):
            problems.append(f"object size {smax} cannot fit a {h}x{w} canvas with a 1 px margin")
        vmin, vmax = self.velocity_range
        if vmin < 0 or vmax < vmin:
            problems.append(f"bad velocity range {self.velocity_range}")
        if self.shape not in SHAPES + ("mixed",):
            problems.append(f"unknown shape {self.shape!r}")
        if self.n_frames < 2:
            problems.append("n_frames must be >= 2")
        if self.n_distractors < 0:
            problems.append("n_distractors must be >= 0")
        if self.clutter < 0:
            problems.append("clutter must be >= 0")
        if not 0 < self.contrast <= 1:
            problems.append(f"contrast {self.contrast} outside (0, 1]")
        if problems:
            raise ConfigurationError("; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)


def _rng(*seeds: int) -> np.random.Generator:
    return np.random.default_rng([int(s) & 0xFFFFFFFFFFFFFFFF for s in seeds])


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    coarse = rng.uniform(0.15, 0.85, size=(max(2, h // 16 + 1), max(2, w // 16 + 1), 3)).astype(np.float32)
    bg = cv2.resize(coarse, (w, h), interpolation=cv2.INTER_CUBIC)
    fine = rng.normal(0.0, 0.04, size=(h, w, 3)).astype(np.float32)
    return np.clip(bg + fine, 0.0, 1.0)


def _shape_mask(shape: str, size: int) -> np.ndarray:
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    c = size / 2.0
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    return (yy - c) ** 2 + (xx - c) ** 2 <= c * c


def _appearance(rng: np.random.Generator, size: int, contrast: float = 1.0) -> np.ndarray:
    """Two-tone patch: a base colour with a contrasting stripe or inner block."""
    base = rng.uniform(0.0, 1.0, 3)
    base[rng.integers(3)] = rng.choice([0.05, 0.95])
    accent = base + contrast * (1.0 - 2.0 * base)
    patch = np.broadcast_to(base, (size, size, 3)).copy()
    kind = rng.integers(3)
    third = max(1, size // 3)
    if kind == 0:
        patch[third : size - third, :] = accent
    elif kind == 1:
        patch[:, third : size - third] = accent
    else:
        patch[third : size - third, third : size - third] = accent
    return patch.astype(np.float32)


class _Mover:
    def __init__(self, rng, spec: SyntheticSceneSpec, shape: str, size: int):
        h, w = spec.canvas
        self.size = size
        self.shape = shape
        self.mask = _shape_mask(shape, size)
        self.patch = _appearance(rng, size, spec.contrast)
        self.lo = 1.0
        self.hi_x = float(w - size - 1)
        self.hi_y = float(h - size - 1)
        self.x = float(rng.uniform(self.lo, self.hi_x))
        self.y = float(rng.uniform(self.lo, self.hi_y))
        vmin, vmax = spec.velocity_range
        self.vx = float(rng.uniform(vmin, vmax)) * rng.choice([-1.0, 1.0])
        self.vy = float(rng.uniform(vmin, vmax)) * rng.choice([-1.0, 1.0])

    def step(self):
        for attr, vattr, hi in (("x", "vx", self.hi_x), ("y", "vy", self.hi_y)):
            pos, vel = getattr(self, attr), getattr(self, vattr)
            nxt = pos + vel
            if nxt < self.lo or nxt > hi:
                vel = -vel
                nxt = min(max(pos + vel, self.lo), hi)
            setattr(self, attr, nxt)
            setattr(self, vattr, vel)

    def box(self) -> tuple[int, int]:
        return int(round(self.x)), int(round(self.y))

    def draw(self, canvas: np.ndarray) -> tuple[int, int]:
        x, y = self.box()
        region = canvas[y : y + self.size, x : x + self.size]
        region[self.mask] = self.patch[self.mask]
        return x, y


def generate_synthetic_video(spec: SyntheticSceneSpec, seed: int) -> tuple[Video, TrackAnnotation]:
    """Render one deterministic scene: a textured target plus moving distractors."""
    spec.validate()
    h, w = spec.canvas
    rng = _rng(spec.background_seed, seed)
    shape = spec.shape if spec.shape != "mixed" else SHAPES[int(rng.integers(len(SHAPES)))]
    background = _background(rng, h, w)
    smin, smax = spec.size_range
    for _ in range(spec.clutter):
        _Mover(rng, spec, shape, int(rng.integers(smin, smax + 1))).draw(background)
    target = _Mover(rng, spec, shape, int(rng.integers(smin, smax + 1)))
    distractors = [
        _Mover(rng, spec, shape, int(rng.integers(smin, smax + 1))) for _ in range(spec.n_distractors)
    ]
    frames = np.empty((spec.n_frames, h, w, 3), dtype=np.float32)
    boxes = np.empty((spec.n_frames, 4), dtype=np.float64)
    for i in range(spec.n_frames):
        if i > 0:
            target.step()
            for d in distractors:
                d.step()
        canvas = background.copy()
        if spec.noise_std > 0:
            canvas += rng.normal(0.0, spec.noise_std, size=canvas.shape).astype(np.float32)
        for d in distractors:
            d.draw(canvas)
        x, y = target.draw(canvas)  # target on top: its box always bounds visible pixels
        frames[i] = np.clip(canvas, 0.0, 1.0)
        boxes[i] = (x, y, target.size, target.size)
    return Video(frames, id=f"synth-{seed}", category=shape), TrackAnnotation(boxes)


@dataclass
class SyntheticBenchmark:
    spec: SyntheticSceneSpec = field(default_factory=SyntheticSceneSpec)
    n_videos: int = 16
    seed: int = 0


def generate_benchmark(
    spec: SyntheticSceneSpec, n_videos: int, seed: int
) -> tuple[list[Video], list[TrackAnnotation]]:
    """``n_videos`` scenes with per-video seeds derived from ``seed``."""
    seeds = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF).generate_state(n_videos, dtype=np.uint64)
    videos, anns = [], []
    for i, s in enumerate(seeds):
        v, a = generate_synthetic_video(spec, int(s))
        v.id = f"synth-{seed}-{i:03d}"
        videos.append(v)
        anns.append(a)
    return videos, anns


def boxes_to_array(boxes: Sequence[BoundingBox]) -> np.ndarray:
    return np.array([b.as_array() for b in boxes], dtype=np.float64).reshape(-1, 4)

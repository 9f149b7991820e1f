"""Experiment configuration: YAML sections mapped onto the module dataclasses.

Unknown keys are errors, and loading reports every problem at once rather
than stopping at the first.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .attacks import AttackConfig, TrainConfig
from .errors import ConfigurationError
from .evaluation import PromisingnessBudget
from .tracker import TrackerConfig
from .trigger import BUILTIN_PATTERNS, AttackMode
from .videodata import SyntheticSceneSpec

ATTACK_KINDS = ("benign", "boba", "fsba")
DEFENSE_KINDS = ("jitter", "noise", "finetune", "prune")
DATA_SOURCES = ("synthetic", "otb")


class ConfigErrors(ConfigurationError):
    """All validation problems of one config, one ``key: message`` string each."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid config:\n  " + "\n  ".join(self.problems))


@dataclass
class DatasetSection:
    source: str = "synthetic"
    scene: SyntheticSceneSpec = field(default_factory=SyntheticSceneSpec)
    n_train_videos: int = 64
    n_eval_videos: int = 16
    train_seed: int | None = None  # None: derived from the global seed
    eval_seed: int | None = None
    n_samples: int = 1200
    max_gap: int = 30
    otb_train_root: str | None = None
    otb_eval_root: str | None = None


@dataclass
class AttackSection:
    kind: str = "fsba"
    poisoning_rate: float = 0.10
    modification_rate: float = 0.01
    feature_step_lr_multiplier: float = 0.5
    trigger: str = "checker"
    feature_layers: list[int] = field(default_factory=lambda: [-1])
    l1_reduction: str = "mean"
    feature_grad_clip: float | None = 5.0
    area_basis: str = "search"

    def attack_config(self) -> AttackConfig:
        d = dataclasses.asdict(self)
        d.pop("kind")
        return AttackConfig(**d)


@dataclass
class ModeSpec:
    mode: str = "one_shot"
    frame_attacking_rate: float = 0.1

    def attack_mode(self) -> AttackMode:
        return AttackMode(self.mode, self.frame_attacking_rate)


def _default_modes() -> list[ModeSpec]:
    return [ModeSpec("one_shot"), ModeSpec("few_shot", 0.1)]


@dataclass
class EvalSection:
    modes: list[ModeSpec] = field(default_factory=_default_modes)
    trigger: str | None = None  # None: the attack section's trigger
    modification_rate: float | None = None  # None: the attack section's rate
    anchor: str = "box_center"
    budget: PromisingnessBudget = field(default_factory=PromisingnessBudget)


@dataclass
class DefenseSpec:
    kind: str = "jitter"
    jitter: str = "brightness"
    budget: float = 0.4
    std: float = 15 / 255
    fraction: float = 0.1  # share of the training-set size used for fine-tuning
    source: str = "within"  # within: a subset of the training pairs; outside: pairs from unseen videos
    epochs: int | None = None  # None: the train section's epoch budget
    lr: float | None = None  # None: resume at the train section's final learning rate
    pruning_rate: float = 0.2
    calibration_fraction: float = 0.05
    layer: int = -1

    @property
    def label(self) -> str:
        if self.kind == "jitter":
            return f"jitter-{self.jitter}@{self.budget:g}"
        if self.kind == "noise":
            return f"noise@{self.std * 255:g}/255"
        if self.kind == "finetune":
            return f"finetune@{self.fraction:g}" + ("-outside" if self.source == "outside" else "")
        return f"prune@{self.pruning_rate:g}"


@dataclass
class DiagnoseSection:
    n_crops: int = 64
    crop: str = "search"  # which crop of each pair is embedded: search | template
    seed: int | None = None


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    output_dir: str = "runs"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackSection = field(default_factory=AttackSection)
    eval: EvalSection = field(default_factory=EvalSection)
    defenses: list[DefenseSpec] = field(default_factory=list)
    diagnose: DiagnoseSection = field(default_factory=DiagnoseSection)

    # ---- seed propagation
    @property
    def train_video_seed(self) -> int:
        d = self.dataset.train_seed
        return self.seed * 1000 + 1 if d is None else d

    @property
    def eval_video_seed(self) -> int:
        d = self.dataset.eval_seed
        return self.seed * 1000 + 2 if d is None else d

    @property
    def finetune_video_seed(self) -> int:
        return self.seed * 1000 + 4

    @property
    def diagnose_seed(self) -> int:
        return self.seed * 1000 + 3 if self.diagnose.seed is None else self.diagnose.seed

    # ---- serialization
    def to_dict(self) -> dict:
        d = _plain(self)
        d["train"].pop("seed")  # the global seed is the training seed
        return d

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def hash(self) -> str:
        """Digest of everything that affects results (the output location does not)."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def replace(self, **changes) -> "ExperimentConfig":
        return from_dict({**self.to_dict(), **changes})


# --------------------------------------------------------------------------
# generic dict -> dataclass conversion


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _unwrap_optional(tp):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return (args[0] if len(args) == 1 else tp), True
    return tp, False


_FAILED = object()


def _convert(value: Any, tp, path: str, problems: list[str]):
    tp, optional = _unwrap_optional(tp)
    if value is None:
        if not optional:
            problems.append(f"{path}: may not be null")
            return _FAILED
        return None
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path, problems)
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            problems.append(f"{path}: expected a list, got {type(value).__name__}")
            return _FAILED
        args = typing.get_args(tp)
        inner = args[0] if args else Any
        items = [_convert(v, inner, f"{path}[{i}]", problems) for i, v in enumerate(value)]
        if any(v is _FAILED for v in items):
            return _FAILED
        return tuple(items) if origin is tuple else items
    if tp is bool:
        if not isinstance(value, bool):
            problems.append(f"{path}: expected true/false, got {value!r}")
            return _FAILED
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{path}: expected an integer, got {value!r}")
            return _FAILED
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{path}: expected a number, got {value!r}")
            return _FAILED
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            problems.append(f"{path}: expected a string, got {value!r}")
            return _FAILED
        return value
    return value


def _build(cls, data: Any, path: str, problems: list[str]):
    if not isinstance(data, dict):
        problems.append(f"{path or '<root>'}: expected a mapping, got {type(data).__name__}")
        return _FAILED
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls) if f.init]
    for key in data:
        if key not in names:
            problems.append(f"{path + '.' if path else ''}{key}: unknown key")
    # a field that fails conversion falls back to its default so later checks still run
    kwargs = {}
    for name in names:
        if name in data:
            value = _convert(data[name], hints[name], f"{path + '.' if path else ''}{name}", problems)
            if value is not _FAILED:
                kwargs[name] = value
    try:
        return cls(**kwargs)
    except (ConfigurationError, ValueError, TypeError) as exc:
        problems.append(f"{path or '<root>'}: {exc}")
        return _FAILED


def _semantic_checks(cfg: ExperimentConfig, problems: list[str], base_dir: Path | None) -> None:
    def check(where: str, fn):
        try:
            fn()
        except (ConfigurationError, ValueError) as exc:
            problems.append(f"{where}: {exc}")

    def resolve(p: str) -> Path:
        q = Path(p).expanduser()
        return q if q.is_absolute() or base_dir is None else base_dir / q

    ds = cfg.dataset
    if ds.source not in DATA_SOURCES:
        problems.append(f"dataset.source: unknown source {ds.source!r}; expected one of {list(DATA_SOURCES)}")
    check("dataset.scene", ds.scene.validate)
    for key in ("n_train_videos", "n_eval_videos", "n_samples", "max_gap"):
        if getattr(ds, key) < 1:
            problems.append(f"dataset.{key}: must be >= 1")
    if ds.source == "otb":
        for key in ("otb_train_root", "otb_eval_root"):
            p = getattr(ds, key)
            if p is None:
                problems.append(f"dataset.{key}: required when source is otb")
            elif not resolve(p).is_dir():
                problems.append(f"dataset.{key}: directory {p} does not exist")
            else:
                setattr(ds, key, str(resolve(p)))
    check("tracker", cfg.tracker.validate)
    check("train", cfg.train.validate)
    if cfg.attack.kind not in ATTACK_KINDS:
        problems.append(f"attack.kind: unknown kind {cfg.attack.kind!r}; expected one of {list(ATTACK_KINDS)}")
    check("attack", lambda: cfg.attack.attack_config().validate())
    for where, trig in (("attack.trigger", cfg.attack.trigger), ("eval.trigger", cfg.eval.trigger)):
        if trig is not None and trig not in BUILTIN_PATTERNS:
            if not resolve(trig).is_file():
                problems.append(f"{where}: {trig!r} is neither a built-in trigger nor an existing file")
            else:
                setattr(cfg.attack if where.startswith("attack") else cfg.eval, "trigger", str(resolve(trig)))
    if not cfg.eval.modes:
        problems.append("eval.modes: at least one mode is required")
    for i, m in enumerate(cfg.eval.modes):
        check(f"eval.modes[{i}]", lambda m=m: m.attack_mode())
    if cfg.eval.anchor not in ("frame_center", "box_center"):
        problems.append(f"eval.anchor: {cfg.eval.anchor!r} is not a frame-level anchor")
    if cfg.eval.modification_rate is not None and not 0 < cfg.eval.modification_rate <= 0.05:
        problems.append("eval.modification_rate: outside (0, 0.05]")
    for i, d in enumerate(cfg.defenses):
        where = f"defenses[{i}]"
        if d.kind not in DEFENSE_KINDS:
            problems.append(f"{where}.kind: unknown defense {d.kind!r}; expected one of {list(DEFENSE_KINDS)}")
        elif d.kind == "jitter":
            from .defenses import JitterSpec

            check(where, lambda d=d: JitterSpec(d.jitter, d.budget))
        elif d.kind == "noise" and not 0 <= d.std <= 25 / 255 + 1e-12:
            problems.append(f"{where}.std: outside [0, 25/255]")
        elif d.kind == "finetune":
            if not 0 < d.fraction <= 1:
                problems.append(f"{where}.fraction: outside (0, 1]")
            if d.source not in ("within", "outside"):
                problems.append(f"{where}.source: {d.source!r} is not within|outside")
            elif d.source == "outside" and ds.source != "synthetic":
                problems.append(f"{where}.source: outside fine-tuning needs a synthetic dataset")
            if d.lr is not None and d.lr <= 0:
                problems.append(f"{where}.lr: must be positive")
        elif d.kind == "prune":
            from .defenses import PruneSpec

            check(where, lambda d=d: PruneSpec(d.pruning_rate, d.calibration_fraction, d.layer))
    if cfg.diagnose.n_crops < 2:
        problems.append("diagnose.n_crops: must be >= 2")
    if cfg.diagnose.crop not in ("search", "template"):
        problems.append(f"diagnose.crop: {cfg.diagnose.crop!r} is not search|template")


def from_dict(data: Any, base_dir: Path | None = None) -> ExperimentConfig:
    problems: list[str] = []
    if isinstance(data, dict) and isinstance(data.get("train"), dict) and "seed" in data["train"]:
        data = {**data, "train": {k: v for k, v in data["train"].items() if k != "seed"}}
        problems.append("train.seed: set the top-level seed instead; it drives every stochastic choice")
    cfg = _build(ExperimentConfig, data if data is not None else {}, "", problems)
    if cfg is not _FAILED:
        _semantic_checks(cfg, problems, base_dir)
    if problems:
        raise ConfigErrors(problems)
    return cfg


def loads(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigErrors([f"<yaml>: {exc}"]) from exc
    return from_dict(data, base_dir)


def load(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigErrors([f"<file>: config {path} does not exist"])
    return loads(path.read_text(), base_dir=path.parent)


def dump(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(cfg.to_yaml())

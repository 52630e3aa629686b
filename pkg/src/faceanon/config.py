"""Declarative experiment configuration (YAML) with strict schema checking.

Relative paths resolve against the config file's directory, or against
``$FACEANON_DATA_ROOT`` for dataset paths when that variable is set.
``$FACEANON_OUTPUT_DIR`` replaces the output directory.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .action_detection import PROFILES as DETECTOR_PROFILES, DetectorConfig
from .baselines import AnonymizerSpec
from .face_identity import ClassifierConfig
from .modifier import ModifierConfig
from .synthetic import SyntheticConfig
from .trainer import TrainingConfig

DATA_ROOT_ENV = "FACEANON_DATA_ROOT"
OUTPUT_DIR_ENV = "FACEANON_OUTPUT_DIR"

MODIFIER_PROFILES = {
    "desk": dict(n_blocks=2, base_channels=16, work_size=32),
    "full": dict(n_blocks=9, base_channels=64, work_size=256),
}
CLASSIFIER_PROFILES = {
    "desk": dict(embed_dim=128, channels=(16, 32, 64, 128)),
    "full": dict(embed_dim=512, channels=(32, 64, 128, 256), input_size=(112, 96)),
}


class ConfigError(ValueError):
    pass


@dataclass
class DataPaths:
    faces: Path
    frames: Path
    eval_frames: Path | None = None
    pairs: Path | None = None
    face_threshold: float = 0.8

    def check(self, *names: str) -> None:
        for name in names:
            p = getattr(self, name)
            if p is None:
                raise ConfigError(f"data.{name} is required for this command")
            if not Path(p).is_file():
                raise ConfigError(f"data.{name}: no such file {p}")


@dataclass
class ExperimentConfig:
    data: DataPaths
    training: TrainingConfig
    modifier: ModifierConfig
    classifier: dict  # ClassifierConfig kwargs without n_identities
    detector: DetectorConfig
    methods: list[AnonymizerSpec]
    output_dir: Path
    seed: int = 0
    plot: bool = False
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    source: Path | None = None

    def classifier_config(self, n_identities: int) -> ClassifierConfig:
        kw = dict(self.classifier)
        kw.setdefault("input_size", (self.modifier.work_size,) * 2)
        return ClassifierConfig(n_identities=n_identities, **kw)

    def detector_config(self, n_classes: int) -> DetectorConfig:
        return DetectorConfig(**{**_asdict(self.detector), "n_classes": n_classes})

    def with_seed(self, seed: int) -> "ExperimentConfig":
        self.seed = seed
        self.training.seed = seed
        self.synthetic.seed = seed
        self.methods = [AnonymizerSpec(s.method, s.param, seed) for s in self.methods]
        return self


def _asdict(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def _section(raw: dict, name: str, allowed: set[str]) -> dict:
    sec = raw.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"{name} must be a mapping")
    unknown = set(sec) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {name}: {', '.join(sorted(unknown))}")
    return dict(sec)


def _build(cls, kw: dict, name: str):
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{name}: {e}") from e


def _names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def _profiled(raw: dict, name: str, cls, profiles: dict, exclude=()) -> dict:
    sec = _section(raw, name, (_names(cls) - set(exclude)) | {"profile"})
    prof = sec.pop("profile", "desk")
    if prof not in profiles:
        raise ConfigError(f"{name}.profile must be one of {sorted(profiles)}, got {prof!r}")
    return {**profiles[prof], **sec}


TOP_LEVEL = {"seed", "output_dir", "data", "training", "modifier", "classifier", "detector",
             "evaluate", "synthetic"}


def parse_config(raw: Any, base_dir: Path) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping at the top level")
    unknown = set(raw) - TOP_LEVEL
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer")

    data_root = Path(os.environ[DATA_ROOT_ENV]) if os.environ.get(DATA_ROOT_ENV) else base_dir

    def path(v):
        if v is None:
            return None
        p = Path(v)
        return p if p.is_absolute() else (data_root / p).resolve()

    d = _section(raw, "data", _names(DataPaths))
    for key in ("faces", "frames"):
        if key not in d:
            raise ConfigError(f"data.{key} is required")
    data = DataPaths(
        faces=path(d["faces"]), frames=path(d["frames"]),
        eval_frames=path(d.get("eval_frames")), pairs=path(d.get("pairs")),
        face_threshold=float(d.get("face_threshold", 0.8)),
    )
    if not 0 <= data.face_threshold <= 1:
        raise ConfigError("data.face_threshold must lie in [0, 1]")

    t = _section(raw, "training", _names(TrainingConfig) - {"seed"})
    t.setdefault("face_threshold", data.face_threshold)
    training = _build(TrainingConfig, {**t, "seed": seed}, "training")

    modifier = _build(ModifierConfig, _profiled(raw, "modifier", ModifierConfig, MODIFIER_PROFILES), "modifier")
    classifier = _profiled(raw, "classifier", ClassifierConfig, CLASSIFIER_PROFILES, exclude={"n_identities"})
    _build(ClassifierConfig, {"input_size": (modifier.work_size,) * 2, **classifier, "n_identities": 2},
           "classifier")

    det = _section(raw, "detector", (_names(DetectorConfig) - {"n_classes", "min_side", "max_side"}) | {"profile"})
    prof = det.pop("profile", "desk")
    if prof not in DETECTOR_PROFILES:
        raise ConfigError(f"detector.profile must be one of {sorted(DETECTOR_PROFILES)}, got {prof!r}")
    detector = _build(DetectorConfig, {**det, **DETECTOR_PROFILES[prof]}, "detector")

    ev = _section(raw, "evaluate", {"methods", "plot"})
    methods = []
    for m in ev.get("methods", ["none", "learned"]):
        try:
            methods.append(AnonymizerSpec.parse(str(m), seed))
        except ValueError as e:
            raise ConfigError(f"evaluate.methods: {e}") from e

    syn = _build(SyntheticConfig, {**_section(raw, "synthetic", _names(SyntheticConfig) - {"seed"}), "seed": seed},
                 "synthetic")

    out = os.environ.get(OUTPUT_DIR_ENV) or raw.get("output_dir", "runs")
    output_dir = Path(out) if Path(out).is_absolute() else (base_dir / out).resolve()

    return ExperimentConfig(
        data=data, training=training, modifier=modifier, classifier=classifier, detector=detector,
        methods=methods, output_dir=output_dir, seed=seed, plot=bool(ev.get("plot", False)),
        synthetic=syn,
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from e
    cfg = parse_config(raw, path.parent.resolve())
    cfg.source = path
    return cfg

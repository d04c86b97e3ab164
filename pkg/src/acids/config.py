"""Run configuration: one JSON document covering model, training, adaptation and paths."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .adapter import AdaptConfig
from .datagen import TransformPipeline
from .encoder import ModelConfig
from .errors import InvalidConfig
from .presets import get_preset
from .trainer import TrainConfig

SCHEMA_VERSION = 1


@dataclass
class RunConfig:
    """Everything a command needs besides its positional arguments.

    ``model.n_overclusters`` defaults to 7 x ``n_clusters`` when built from a preset.
    """

    schema_version: int = SCHEMA_VERSION
    preset: str = "vector-4c-4d"
    data_dir: Optional[str] = None
    out_dir: str = "runs"
    seed: int = 0
    sources: Optional[list] = None  # None: every domain with role "source"
    target: Optional[int] = None  # None: the single domain with role "target"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    transforms: TransformPipeline = field(default_factory=TransformPipeline)

    @classmethod
    def from_preset(cls, name: str = "vector-4c-4d", seed: int = 0, **overrides) -> "RunConfig":
        preset = get_preset(name)
        spec = preset.spec(seed)
        c = preset.n_clusters
        if preset.mode == "image":
            s = spec.image_size
            model = ModelConfig.default_image(input_shape=(s, s, 3), n_clusters=c, n_overclusters=7 * c, seed=seed)
        else:
            model = ModelConfig(input_shape=(spec.dim,), n_clusters=c, n_overclusters=7 * c, seed=seed)
        cfg = cls(preset=name, seed=seed, model=model,
                  train=TrainConfig(seed=seed, **preset.train),
                  adapt=AdaptConfig(seed=seed, **preset.adapt),
                  transforms=TransformPipeline(mode=preset.mode))
        for k, v in overrides.items():
            setattr(cfg, k, v)
        return cfg

    def with_seed(self, seed: int) -> "RunConfig":
        cfg = RunConfig.from_dict(self.to_dict())
        cfg.seed = cfg.model.seed = cfg.train.seed = cfg.adapt.seed = seed
        return cfg

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "preset": self.preset,
            "data_dir": self.data_dir,
            "out_dir": self.out_dir,
            "seed": self.seed,
            "sources": self.sources,
            "target": self.target,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "adapt": self.adapt.to_dict(),
            "transforms": asdict(self.transforms),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise InvalidConfig(f"schema_version {version} unsupported (expected {SCHEMA_VERSION})")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
        parts = {
            "model": (ModelConfig, d.pop("model", None)),
            "train": (TrainConfig, d.pop("train", None)),
            "adapt": (AdaptConfig, d.pop("adapt", None)),
            "transforms": (TransformPipeline, d.pop("transforms", None)),
        }
        kwargs = dict(d)
        for key, (klass, value) in parts.items():
            if value is None:
                continue
            names = {f.name for f in fields(klass)}
            bad = set(value) - names
            if bad:
                raise InvalidConfig(f"unknown keys in {key}: {sorted(bad)}")
            kwargs[key] = klass(**value)
        return cls(**kwargs)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

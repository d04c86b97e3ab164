"""Named synthetic dataset presets with matching training defaults.

Every preset has three source domains (ids 0-2) and one target domain (id 3)
whose style lies outside the range spanned by the sources.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .datagen import DomainSpec, GeneratorSpec, ImageStyle, VectorStyle
from .errors import InvalidSpec

SOURCE_IDS = (0, 1, 2)
TARGET_ID = 3


@dataclass
class VectorPresetParams:
    n_classes: int = 4
    dim: int = 8
    n_samples: int = 480
    radius: float = 2.0
    class_noise: float = 0.5
    rotations: tuple = (0.0, 20.0, -20.0, 40.0)  # sources then target, degrees
    shift: float = 4.0  # translation norm for sources
    target_shift_factor: float = 1.5
    scale_spread: float = 0.4  # log-scale half-width of per-axis scales
    source_noise: float = 0.1
    target_noise: float = 0.2


def vector_spec(name: str, seed: int, p: VectorPresetParams) -> GeneratorSpec:
    rng = np.random.default_rng([seed, 0x57E1E])
    domains = []
    for d, rot in enumerate(p.rotations):
        is_target = d == TARGET_ID
        t = rng.normal(size=p.dim)
        t *= p.shift * (p.target_shift_factor if is_target else 1.0) / np.linalg.norm(t)
        scale = np.exp(rng.uniform(-p.scale_spread, p.scale_spread, size=p.dim))
        style = VectorStyle(rotation=float(rot), scale=[float(v) for v in scale],
                            translation=[float(v) for v in t],
                            noise=p.target_noise if is_target else p.source_noise)
        domains.append(DomainSpec(d, style, p.n_samples, "target" if is_target else "source"))
    return GeneratorSpec(name, "vector", p.n_classes, domains, seed=seed, dim=p.dim, radius=p.radius,
                         class_noise=p.class_noise)


def image_spec(name: str, seed: int, n_classes: int = 4, n_samples: int = 240, size: int = 32) -> GeneratorSpec:
    styles = [
        ImageStyle(background=(20, 20, 20), foreground=(235, 235, 235)),
        ImageStyle(background=(200, 60, 40), foreground=(30, 40, 160), texture_noise=0.1),
        ImageStyle(background=(230, 230, 200), foreground=(40, 120, 40), stroke_width=0.25),
        ImageStyle(background=(90, 20, 120), foreground=(250, 200, 30), stroke_width=0.15, texture_noise=0.25,
                   invert=True),
    ]
    domains = [DomainSpec(d, s, n_samples, "target" if d == TARGET_ID else "source") for d, s in enumerate(styles)]
    return GeneratorSpec(name, "image", n_classes, domains, seed=seed, image_size=size)


@dataclass
class Preset:
    name: str
    build: Callable[[int], GeneratorSpec]
    mode: str = "vector"
    n_clusters: int = 4
    # training defaults (desk-scale; see README)
    train: dict = field(default_factory=dict)
    adapt: dict = field(default_factory=dict)
    description: str = ""

    def spec(self, seed: int) -> GeneratorSpec:
        return self.build(seed)


DEFAULT_PARAMS = VectorPresetParams(shift=8.0, scale_spread=1.2)
STYLE_PARAMS = VectorPresetParams(shift=8.0)
# 16 classes sit 22.5 degrees apart on the ring, so domain rotations stay well below half that spacing
C16_PARAMS = VectorPresetParams(n_classes=16, radius=6.0, n_samples=960, rotations=(0.0, 5.0, -5.0, 10.0))

_VECTOR_TRAIN = {"batch_size": 32, "epochs": 160, "lr": 1e-3, "alpha": 0.7}
_VECTOR_ADAPT = {"epochs": 20, "lr": 1e-3, "batch_size": 64, "epsilon_conf": 0.9, "steps_per_epoch": 7}

PRESETS = {
    "vector-4c-4d": Preset(
        "vector-4c-4d", lambda seed: vector_spec("vector-4c-4d", seed, DEFAULT_PARAMS),
        train=dict(_VECTOR_TRAIN), adapt=dict(_VECTOR_ADAPT),
        description="default: 8-d vectors, 4 classes, 3 sources + 1 target, 480 samples per domain"),
    "vector-4c-style": Preset(
        "vector-4c-style", lambda seed: vector_spec("vector-4c-style", seed, STYLE_PARAMS),
        train=dict(_VECTOR_TRAIN), adapt=dict(_VECTOR_ADAPT),
        description="style-dominant: domain translations much larger than class separation"),
    "vector-16c": Preset(
        "vector-16c", lambda seed: vector_spec("vector-16c", seed, C16_PARAMS), n_clusters=16,
        train={**_VECTOR_TRAIN, "alpha": 0.2}, adapt=dict(_VECTOR_ADAPT),
        description="16 classes for the smoothing sweep"),
    "image-4c-4d": Preset(
        "image-4c-4d", lambda seed: image_spec("image-4c-4d", seed), mode="image",
        train={"batch_size": 32, "epochs": 40, "lr": 1e-3, "alpha": 0.7}, adapt=dict(_VECTOR_ADAPT),
        description="32x32 rendered shapes, 4 classes, 4 palettes/stroke styles"),
}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise InvalidSpec(f"preset: unknown name {name!r} (known: {sorted(PRESETS)})") from None

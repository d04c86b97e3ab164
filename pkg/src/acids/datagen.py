"""Synthetic multi-domain datasets, augmentation pipelines and the on-disk format.

A dataset crosses ``n_classes`` semantic classes with a set of domain styles.
In vector mode classes are Gaussian components whose means sit on a circle,
and a domain style is an affine map (rotation in the class plane, per-axis
scale, translation) plus extra noise. In image mode classes are shape
archetypes rendered with a domain palette, stroke width, texture noise and
optional polarity inversion.

On disk a dataset is ``manifest.json`` plus, per domain, one raw row-major
little-endian blob of inputs (float32 for vectors, uint8 for images) and one
int32 blob of labels.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ContractViolation, Exhausted, FractionTooSmall, InvalidSpec, UnknownDomain

SCHEMA_VERSION = 1
SHAPES = ("circle", "square", "triangle", "star", "cross", "bar", "ring")


# --- sealed labels ---------------------------------------------------------

class _Principal:
    def __init__(self, name):
        self.name = name

    def __repr__(self):
        return f"<principal {self.name}>"


EVALUATOR = _Principal("evaluator")


class SealedLabels:
    """Ground-truth labels that only the evaluator principal may open."""

    __slots__ = ("_values",)

    def __init__(self, values):
        self._values = np.asarray(values, dtype=np.int32)

    def __len__(self):
        return len(self._values)

    def __getitem__(self, idx):
        return SealedLabels(self._values[idx])

    def __array__(self, *args, **kwargs):
        raise ContractViolation("labels are sealed; only the evaluator may open them")

    def __iter__(self):
        raise ContractViolation("labels are sealed; only the evaluator may open them")

    def open(self, principal) -> np.ndarray:
        if principal is not EVALUATOR:
            raise ContractViolation(f"{principal!r} may not read sealed labels")
        return self._values.copy()

    def __repr__(self):
        return f"SealedLabels(n={len(self)})"


# --- styles and generator specs ---------------------------------------------

@dataclass
class VectorStyle:
    rotation: float = 0.0  # degrees, within the class plane
    scale: list = field(default_factory=list)  # per-axis; empty means 1
    translation: list = field(default_factory=list)  # empty means 0
    noise: float = 0.0


@dataclass
class ImageStyle:
    background: tuple = (0, 0, 0)
    foreground: tuple = (255, 255, 255)
    stroke_width: float = 0.0  # 0 draws filled shapes; otherwise outline thickness in shape units
    texture_noise: float = 0.0
    invert: bool = False


@dataclass
class DomainSpec:
    domain_id: int
    style: object
    n_samples: int
    role: str = "source"


@dataclass
class GeneratorSpec:
    name: str
    mode: str
    n_classes: int
    domains: list
    seed: int = 0
    dim: int = 8
    radius: float = 2.0
    class_noise: float = 0.5
    image_size: int = 32

    def validate(self) -> None:
        if self.mode not in ("vector", "image"):
            raise InvalidSpec(f"mode: expected 'vector' or 'image', got {self.mode!r}")
        if self.n_classes < 2:
            raise InvalidSpec("n_classes: must be >= 2")
        if self.mode == "image" and self.n_classes > len(SHAPES):
            raise InvalidSpec(f"n_classes: image mode supports at most {len(SHAPES)} shapes")
        if self.mode == "vector" and self.dim < 2:
            raise InvalidSpec("dim: must be >= 2")
        if self.mode == "image" and not 8 <= self.image_size <= 64:
            raise InvalidSpec("image_size: must lie in [8, 64]")
        if not self.domains:
            raise InvalidSpec("domains: at least one domain required")
        ids = [d.domain_id for d in self.domains]
        if len(set(ids)) != len(ids):
            raise InvalidSpec("domains: duplicate domain_id")
        for d in self.domains:
            if d.n_samples < self.n_classes or d.n_samples % self.n_classes:
                raise InvalidSpec(
                    f"domains[{d.domain_id}].n_samples: must be a positive multiple of n_classes"
                )
            expected = VectorStyle if self.mode == "vector" else ImageStyle
            if not isinstance(d.style, expected):
                raise InvalidSpec(f"domains[{d.domain_id}].style: expected {expected.__name__}")
            if self.mode == "vector":
                for name in ("scale", "translation"):
                    v = getattr(d.style, name)
                    if v and len(v) != self.dim:
                        raise InvalidSpec(f"domains[{d.domain_id}].style.{name}: length must equal dim")


# --- manifest ----------------------------------------------------------------

@dataclass
class DomainEntry:
    domain_id: int
    role: str
    style: dict
    n_samples: int
    blob: str
    labels_blob: str
    offset: int = 0
    labels_offset: int = 0
    indices: Optional[list] = None
    blob_rows: Optional[int] = None


@dataclass
class DatasetManifest:
    name: str
    mode: str
    n_classes: int
    sample_shape: list
    seed: int
    domains: list
    labels_available: bool = True
    schema_version: int = SCHEMA_VERSION

    @property
    def dtype(self) -> np.dtype:
        return np.dtype("<f4") if self.mode == "vector" else np.dtype("u1")

    def domain(self, domain_id: int) -> DomainEntry:
        for d in self.domains:
            if d.domain_id == domain_id:
                return d
        raise UnknownDomain(f"domain {domain_id} not in manifest {self.name!r}")

    @property
    def domain_ids(self) -> list[int]:
        return [d.domain_id for d in self.domains]

    def ids_with_role(self, role: str) -> list[int]:
        return [d.domain_id for d in self.domains if d.role == role]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise InvalidSpec(f"schema_version: unsupported {d.get('schema_version')!r}")
        d = dict(d)
        d["domains"] = [DomainEntry(**e) for e in d["domains"]]
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


class Dataset:
    """A manifest bound to its sample arrays (in memory or under ``root``)."""

    def __init__(self, manifest: DatasetManifest, root: Optional[Path] = None, arrays: Optional[dict] = None):
        self.manifest = manifest
        self.root = Path(root) if root is not None else None
        self._arrays = dict(arrays or {})

    @classmethod
    def load(cls, path) -> "Dataset":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        manifest = DatasetManifest.from_dict(json.loads(path.read_text(encoding="utf-8")))
        return cls(manifest, path.parent)

    def _raw(self, domain_id: int):
        if domain_id not in self._arrays:
            entry = self.manifest.domain(domain_id)
            if self.root is None:
                raise UnknownDomain(f"domain {domain_id} has no data")
            total = _blob_rows(entry)
            shape = (total, *self.manifest.sample_shape)
            x = np.fromfile(self.root / entry.blob, dtype=self.manifest.dtype,
                            count=int(np.prod(shape)), offset=entry.offset).reshape(shape)
            y = np.fromfile(self.root / entry.labels_blob, dtype="<i4", count=total, offset=entry.labels_offset)
            self._arrays[domain_id] = (x, y)
        return self._arrays[domain_id]

    def inputs(self, domain_id: int) -> np.ndarray:
        x, _ = self._raw(domain_id)
        idx = self.manifest.domain(domain_id).indices
        return x if idx is None else x[np.asarray(idx, dtype=np.int64)]

    def labels(self, domain_id: int) -> SealedLabels:
        _, y = self._raw(domain_id)
        idx = self.manifest.domain(domain_id).indices
        return SealedLabels(y if idx is None else y[np.asarray(idx, dtype=np.int64)])

    def size(self, domain_id: int) -> int:
        return self.manifest.domain(domain_id).n_samples

    def select(self, domain_ids) -> "Dataset":
        """View restricted to ``domain_ids`` (same blobs)."""
        domain_ids = list(domain_ids)
        entries = [self.manifest.domain(d) for d in domain_ids]
        manifest = replace(self.manifest, domains=[replace(e) for e in entries])
        arrays = {d: a for d, a in self._arrays.items() if d in domain_ids}
        return Dataset(manifest, self.root, arrays)

    def save(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        entries = []
        for entry in self.manifest.domains:
            x, y = self._raw(entry.domain_id)
            blob = f"domain_{entry.domain_id}.{'f32' if self.manifest.mode == 'vector' else 'u8'}"
            labels_blob = f"domain_{entry.domain_id}.labels.i32"
            np.ascontiguousarray(x, dtype=self.manifest.dtype).tofile(out_dir / blob)
            np.ascontiguousarray(y, dtype="<i4").tofile(out_dir / labels_blob)
            entries.append(replace(entry, blob=blob, labels_blob=labels_blob, offset=0, labels_offset=0))
        self.manifest = replace(self.manifest, domains=entries)
        (out_dir / "manifest.json").write_text(self.manifest.to_json() + "\n", encoding="utf-8")
        self.root = out_dir
        return out_dir / "manifest.json"

    def digest(self) -> str:
        """Hash over the manifest and every referenced sample."""
        h = hashlib.sha256(self.manifest.to_json().encode())
        for d in self.manifest.domain_ids:
            x, y = self._raw(d)
            h.update(np.ascontiguousarray(x).tobytes())
            h.update(np.ascontiguousarray(y).tobytes())
        return h.hexdigest()


def _blob_rows(entry: DomainEntry) -> int:
    return entry.n_samples if entry.blob_rows is None else entry.blob_rows


# --- generation ----------------------------------------------------------------

def class_plane(dim: int, seed: int) -> np.ndarray:
    """Orthonormal 2 x dim basis of the plane holding the class means."""
    g = np.random.default_rng([seed, 0xC1A55])
    q, _ = np.linalg.qr(g.normal(size=(dim, 2)))
    return q.T


def class_prototypes(spec: GeneratorSpec) -> np.ndarray:
    angles = 2 * np.pi * np.arange(spec.n_classes) / spec.n_classes
    circle = spec.radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return circle @ class_plane(spec.dim, spec.seed)


def _balanced_labels(n: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.repeat(np.arange(n_classes), n // n_classes)).astype(np.int32)


def _vector_domain(spec: GeneratorSpec, d: DomainSpec):
    rng = np.random.default_rng([spec.seed, d.domain_id, 1])
    style: VectorStyle = d.style
    y = _balanced_labels(d.n_samples, spec.n_classes, rng)
    protos = class_prototypes(spec)
    x = protos[y] + spec.class_noise * rng.normal(size=(d.n_samples, spec.dim))
    if style.rotation:
        plane = class_plane(spec.dim, spec.seed)
        theta = math.radians(style.rotation)
        rot2 = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
        coords = x @ plane.T
        x = x + (coords @ rot2.T - coords) @ plane
    if style.scale:
        x = x * np.asarray(style.scale)
    if style.translation:
        x = x + np.asarray(style.translation)
    if style.noise:
        x = x + style.noise * rng.normal(size=x.shape)
    return x.astype(np.float32), y


def _shape_mask(kind: str, u: np.ndarray, v: np.ndarray, shrink: float = 1.0) -> np.ndarray:
    u = u / shrink
    v = v / shrink
    r = np.hypot(u, v)
    if kind == "circle":
        return r < 0.6
    if kind == "ring":
        return (r < 0.65) & (r > 0.35)
    if kind == "square":
        return np.maximum(np.abs(u), np.abs(v)) < 0.5
    if kind == "bar":
        return (np.abs(u) < 0.15) & (np.abs(v) < 0.7)
    if kind == "cross":
        return ((np.abs(u) < 0.17) & (np.abs(v) < 0.65)) | ((np.abs(v) < 0.17) & (np.abs(u) < 0.65))
    from matplotlib.path import Path as MplPath

    if kind == "triangle":
        verts = [(0.0, -0.65), (0.62, 0.5), (-0.62, 0.5)]
    elif kind == "star":
        verts = []
        for k in range(10):
            rad = 0.7 if k % 2 == 0 else 0.3
            a = -np.pi / 2 + k * np.pi / 5
            verts.append((rad * np.cos(a), rad * np.sin(a)))
    else:
        raise InvalidSpec(f"unknown shape {kind!r}")
    pts = np.stack([u.ravel(), v.ravel()], axis=1)
    return MplPath(verts).contains_points(pts).reshape(u.shape)


def render_shape(kind: str, size: int, style: ImageStyle, rng: np.random.Generator) -> np.ndarray:
    """Render one ``size x size x 3`` uint8 image of ``kind`` under ``style``."""
    scale = rng.uniform(0.75, 1.0)
    angle = rng.uniform(-0.3, 0.3)
    cx, cy = rng.uniform(-0.15, 0.15, size=2)
    grid = (np.arange(size) + 0.5) / size * 2 - 1
    vv, uu = np.meshgrid(grid, grid, indexing="ij")
    uu, vv = (uu - cx) / scale, (vv - cy) / scale
    ca, sa = math.cos(angle), math.sin(angle)
    u, v = ca * uu + sa * vv, -sa * uu + ca * vv
    mask = _shape_mask(kind, u, v)
    if style.stroke_width > 0:
        inner = _shape_mask(kind, u, v, shrink=max(1e-3, 1.0 - style.stroke_width))
        mask = mask & ~inner
    bg = np.asarray(style.background, dtype=np.float64)
    fg = np.asarray(style.foreground, dtype=np.float64)
    img = np.where(mask[..., None], fg, bg)
    if style.texture_noise:
        img = img + 255.0 * style.texture_noise * rng.normal(size=img.shape)
    img = np.clip(img, 0, 255)
    if style.invert:
        img = 255.0 - img
    return np.round(img).astype(np.uint8)


def _image_domain(spec: GeneratorSpec, d: DomainSpec):
    rng = np.random.default_rng([spec.seed, d.domain_id, 1])
    y = _balanced_labels(d.n_samples, spec.n_classes, rng)
    x = np.empty((d.n_samples, spec.image_size, spec.image_size, 3), dtype=np.uint8)
    for i, label in enumerate(y):
        sample_rng = np.random.default_rng([spec.seed, d.domain_id, 2, i])
        x[i] = render_shape(SHAPES[label], spec.image_size, d.style, sample_rng)
    return x, y


def generate(spec: GeneratorSpec) -> Dataset:
    spec.validate()
    arrays = {}
    entries = []
    for d in spec.domains:
        x, y = _vector_domain(spec, d) if spec.mode == "vector" else _image_domain(spec, d)
        arrays[d.domain_id] = (x, y)
        ext = "f32" if spec.mode == "vector" else "u8"
        entries.append(DomainEntry(
            domain_id=d.domain_id, role=d.role, style=_style_dict(d.style), n_samples=d.n_samples,
            blob=f"domain_{d.domain_id}.{ext}", labels_blob=f"domain_{d.domain_id}.labels.i32",
        ))
    shape = [spec.dim] if spec.mode == "vector" else [spec.image_size, spec.image_size, 3]
    manifest = DatasetManifest(name=spec.name, mode=spec.mode, n_classes=spec.n_classes,
                               sample_shape=shape, seed=spec.seed, domains=entries)
    return Dataset(manifest, arrays=arrays)


def _style_dict(style) -> dict:
    d = asdict(style)
    d["kind"] = "vector" if isinstance(style, VectorStyle) else "image"
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d


# --- sampling ---------------------------------------------------------------

def sample_batch(dataset: Dataset, domain_id: int, n: int, rng: np.random.Generator):
    """Draw ``n`` distinct samples of one domain; labels come back sealed."""
    size = dataset.size(domain_id)
    if n > size:
        raise Exhausted(f"requested {n} samples from domain {domain_id} holding {size}")
    idx = rng.permutation(size)[:n]
    return dataset.inputs(domain_id)[idx], dataset.labels(domain_id)[idx]


def epoch_batches(dataset: Dataset, domain_id: int, n: int, rng: np.random.Generator):
    """Yield ``size // n`` disjoint batches of one domain in a random order."""
    size = dataset.size(domain_id)
    if n > size:
        raise Exhausted(f"batch of {n} exceeds domain {domain_id} size {size}")
    order = rng.permutation(size)
    x = dataset.inputs(domain_id)
    for start in range(0, size - n + 1, n):
        yield x[order[start:start + n]]


def subsample_target(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """Per-class stratified subset of every domain; blobs are shared with the input."""
    if not 0 < fraction <= 1:
        raise FractionTooSmall(f"fraction must lie in (0, 1], got {fraction}")
    if fraction == 1:
        return dataset
    rng = np.random.default_rng([seed, 0x5AB])
    entries = []
    for entry in dataset.manifest.domains:
        y = dataset.labels(entry.domain_id).open(EVALUATOR)
        base = np.arange(len(y)) if entry.indices is None else np.asarray(entry.indices)
        keep = []
        for c in np.unique(y):
            members = np.flatnonzero(y == c)
            k = int(math.floor(fraction * len(members)))
            if k < 1:
                raise FractionTooSmall(
                    f"class {c} of domain {entry.domain_id} keeps no sample at fraction {fraction}"
                )
            keep.append(rng.choice(members, size=k, replace=False))
        rows = np.sort(np.concatenate(keep))
        entries.append(replace(entry, n_samples=len(rows), indices=base[rows].tolist(),
                               blob_rows=_blob_rows(entry)))
    manifest = replace(dataset.manifest, domains=entries)
    return Dataset(manifest, dataset.root, dataset._arrays)


# --- transforms ---------------------------------------------------------------

@dataclass
class TransformPipeline:
    mode: str = "vector"
    # vector mode
    jitter_std: float = 0.1
    scale_range: float = 0.1
    dropout_prob: float = 0.0
    # image mode
    crop_scale_min: float = 0.75
    flip_prob: float = 0.5
    hue: float = 0.05
    saturation: float = 0.2
    brightness: float = 0.2

    @classmethod
    def identity(cls, mode: str) -> "TransformPipeline":
        return cls(mode=mode, jitter_std=0.0, scale_range=0.0, dropout_prob=0.0, crop_scale_min=1.0,
                   flip_prob=0.0, hue=0.0, saturation=0.0, brightness=0.0)


def sample_transform_params(pipeline: TransformPipeline, shape, rng: np.random.Generator) -> dict:
    n = shape[0]
    if pipeline.mode == "vector":
        dim = shape[1]
        return {
            "noise": rng.normal(size=(n, dim)) * pipeline.jitter_std,
            "scale": rng.uniform(1 - pipeline.scale_range, 1 + pipeline.scale_range, size=(n, dim)),
            "keep": rng.random((n, dim)) >= pipeline.dropout_prob,
        }
    h, w = shape[1], shape[2]
    crop = rng.uniform(pipeline.crop_scale_min, 1.0, size=n)
    return {
        "crop": crop,
        "crop_pos": rng.random((n, 2)),
        "flip": rng.random(n) < pipeline.flip_prob,
        "hue": rng.uniform(-pipeline.hue, pipeline.hue, size=n),
        "saturation": rng.uniform(1 - pipeline.saturation, 1 + pipeline.saturation, size=n),
        "brightness": rng.uniform(1 - pipeline.brightness, 1 + pipeline.brightness, size=n),
    }


def apply_transforms_with(pipeline: TransformPipeline, inputs: np.ndarray, params: dict) -> np.ndarray:
    if pipeline.mode == "vector":
        out = inputs * params["scale"] + params["noise"]
        out = np.where(params["keep"], out, 0.0)
        return out.astype(inputs.dtype)
    out = np.empty_like(inputs)
    n, h, w, _ = inputs.shape
    for i in range(n):
        img = inputs[i]
        s = params["crop"][i]
        if s < 1.0:
            ch, cw = max(1, int(round(s * h))), max(1, int(round(s * w)))
            top = int(params["crop_pos"][i, 0] * (h - ch + 1))
            left = int(params["crop_pos"][i, 1] * (w - cw + 1))
            rows = top + np.minimum((np.arange(h) * ch) // h, ch - 1)
            cols = left + np.minimum((np.arange(w) * cw) // w, cw - 1)
            img = img[rows][:, cols]
        if params["flip"][i]:
            img = img[:, ::-1]
        hue, sat, bri = params["hue"][i], params["saturation"][i], params["brightness"][i]
        if hue != 0 or sat != 1 or bri != 1:
            img = _color_jitter(img, hue, sat, bri)
        out[i] = img
    return out


def _color_jitter(img: np.ndarray, hue: float, sat: float, bri: float) -> np.ndarray:
    from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

    hsv = rgb_to_hsv(img.astype(np.float64) / 255.0)
    hsv[..., 0] = (hsv[..., 0] + hue) % 1.0
    hsv[..., 1] = np.clip(hsv[..., 1] * sat, 0, 1)
    hsv[..., 2] = np.clip(hsv[..., 2] * bri, 0, 1)
    return np.round(hsv_to_rgb(hsv) * 255.0).astype(np.uint8)


def apply_transforms(pipeline: TransformPipeline, inputs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One independently sampled transform composition per sample."""
    inputs = np.asarray(inputs)
    return apply_transforms_with(pipeline, inputs, sample_transform_params(pipeline, inputs.shape, rng))

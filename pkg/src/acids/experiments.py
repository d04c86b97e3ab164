"""Ablation grid shared by the ``ablate`` command and the acceptance tests.

Variant names follow the ablation table rows:

    full                  per-domain BN, domain MI terms, sharpened-MI target adaptation
    merged_source         (i)   sources pooled through one BN bank, S = 1
    single_source         (ii)  trained on one source only
    no_domain_mi          (iii) domain MI terms removed
    no_bn_alignment       (iv)  one shared BN bank everywhere, domain MI kept
    no_adaptation         (v)   full source model, target BN statistics only
    entropy_adaptation    (vi)  full source model, entropy-minimization adaptation

``style_baseline`` (no domain MI and no BN alignment) is also available.
"""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .adapter import adapt
from .config import RunConfig
from .datagen import Dataset, subsample_target
from .encoder import ClusterNet, init_model
from .evaluator import ClusterMetrics, evaluate_model
from .trainer import train_source

log = logging.getLogger(__name__)

# variant -> (source-training recipe, adaptation method)
VARIANTS = {
    "full": ("full", "acids"),
    "merged_source": ("merged_source", "acids"),
    "single_source": ("single_source", "acids"),
    "no_domain_mi": ("no_domain_mi", "acids"),
    "no_bn_alignment": ("no_bn_alignment", "acids"),
    "no_adaptation": ("full", "none"),
    "entropy_adaptation": ("full", "entropy_baseline"),
    "style_baseline": ("style_baseline", "acids"),
}
TABLE_VARIANTS = ("full", "merged_source", "single_source", "no_domain_mi", "no_bn_alignment",
                  "no_adaptation", "entropy_adaptation")


def source_recipe(cfg: RunConfig, recipe: str) -> RunConfig:
    """Copy of ``cfg`` with the ablation switches for ``recipe`` set."""
    cfg = RunConfig.from_dict(cfg.to_dict())
    t = cfg.train
    if recipe == "merged_source":
        t.merged_source_shared_bn = True
    elif recipe == "single_source":
        t.single_source = (cfg.sources or [0])[0] if t.single_source is None else t.single_source
    elif recipe == "no_domain_mi":
        t.no_domain_mi = True
    elif recipe == "no_bn_alignment":
        t.no_bn_alignment = True
        cfg.model.shared_bn = True
    elif recipe == "style_baseline":
        t.no_domain_mi = True
        t.no_bn_alignment = True
        cfg.model.shared_bn = True
    elif recipe != "full":
        raise ValueError(f"unknown recipe {recipe!r}")
    return cfg


def train_recipe(dataset: Dataset, cfg: RunConfig, recipe: str) -> ClusterNet:
    cfg = source_recipe(cfg, recipe)
    model = init_model(cfg.model)
    train_source(model, dataset, cfg.train, sources=cfg.sources, pipeline=cfg.transforms)
    return model


def target_id(dataset: Dataset, cfg: RunConfig) -> int:
    if cfg.target is not None:
        return int(cfg.target)
    (tid,) = dataset.manifest.ids_with_role("target")
    return tid


def adapt_and_score(model: ClusterNet, dataset: Dataset, cfg: RunConfig, method: str,
                    fraction: float = 1.0, alpha: Optional[float] = None) -> ClusterMetrics:
    """Adapt a copy of ``model`` on (a fraction of) the target; score on the full target."""
    tid = target_id(dataset, cfg)
    target = dataset.select([tid])
    seen = target if fraction >= 1.0 else subsample_target(target, fraction, cfg.seed)
    a = copy.deepcopy(cfg.adapt)
    a.method = method
    if alpha is not None:
        a.alpha = alpha
    m = copy.deepcopy(model)
    adapt(m, seen, a, cfg.transforms)
    return evaluate_model(m, target, tid)


@dataclass
class Cell:
    variant: str
    seed: int
    fraction: float = 1.0
    alpha: Optional[float] = None
    target_accuracy: Optional[float] = None
    source_accuracy: Optional[float] = None
    nmi_class: Optional[float] = None
    nmi_domain: Optional[float] = None
    seconds: float = 0.0
    error: Optional[str] = None
    extra: dict = field(default_factory=dict)


class VariantRunner:
    """Runs variants for one (dataset, config) pair, reusing trained source models."""

    def __init__(self, dataset: Dataset, cfg: RunConfig):
        self.dataset = dataset
        self.cfg = cfg
        self._models: dict = {}

    def source_model(self, recipe: str, alpha: Optional[float] = None) -> ClusterNet:
        key = (recipe, alpha)
        if key not in self._models:
            cfg = self.cfg
            if alpha is not None:
                cfg = RunConfig.from_dict(cfg.to_dict())
                cfg.train.alpha = alpha
            self._models[key] = train_recipe(self.dataset, cfg, recipe)
        return self._models[key]

    def source_metrics(self, recipe: str, alpha: Optional[float] = None) -> ClusterMetrics:
        model = self.source_model(recipe, alpha)
        cfg = source_recipe(self.cfg, recipe)
        sources = sorted(model.source_domains) if cfg.train.single_source is None else [cfg.train.single_source]
        return evaluate_model(model, self.dataset, sources)

    def run(self, variant: str, fraction: float = 1.0, alpha: Optional[float] = None,
            adapt_target: bool = True) -> Cell:
        recipe, method = VARIANTS[variant]
        cell = Cell(variant, self.cfg.seed, fraction, alpha)
        start = time.perf_counter()
        try:
            src = self.source_metrics(recipe, alpha)
            cell.source_accuracy, cell.nmi_class, cell.nmi_domain = src.accuracy, src.nmi_class, src.nmi_domain
            if adapt_target:
                model = self.source_model(recipe, alpha)
                tgt = adapt_and_score(model, self.dataset, self.cfg, method, fraction, alpha)
                cell.target_accuracy = tgt.accuracy
        except Exception as exc:  # recorded per cell; the grid keeps going
            log.exception("variant %s seed %d failed", variant, self.cfg.seed)
            cell.error = f"{type(exc).__name__}: {exc}"
        cell.seconds = time.perf_counter() - start
        return cell


def run_variant(dataset: Dataset, cfg: RunConfig, variant: str, fraction: float = 1.0,
                alpha: Optional[float] = None) -> Cell:
    return VariantRunner(dataset, cfg).run(variant, fraction, alpha)


def run_grid(make_dataset, cfg: RunConfig, seeds: Sequence[int], variants: Sequence[str] = TABLE_VARIANTS,
             fractions: Sequence[float] = (1.0,), alphas: Sequence[float] = (), on_cell=None) -> list[Cell]:
    """Every variant x fraction over ``seeds``, then the alpha sweep on the full variant.

    ``make_dataset(seed)`` returns the dataset for one seed.
    """
    cells = []
    for seed in seeds:
        scfg = cfg.with_seed(seed)
        runner = VariantRunner(make_dataset(seed), scfg)
        jobs = [(v, f, None) for v in variants for f in fractions]
        jobs += [("full", 1.0, a) for a in alphas]
        for variant, fraction, alpha in jobs:
            cell = runner.run(variant, fraction, alpha)
            cells.append(cell)
            if on_cell is not None:
                on_cell(cell)
    return cells

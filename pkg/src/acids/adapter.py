"""Source-free adaptation of a trained model to one target domain.

Nothing in this module accepts source data: entry points take the model and a
dataset view holding exactly the target domain.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np
import torch

from . import datagen
from .datagen import Dataset, TransformPipeline
from .encoder import ClusterNet, estimate_bn_statistics, paired_forward, register_domain
from .errors import ContractViolation, InvalidConfig, NonFiniteLoss
from .prob_core import (
    SmoothedJointState,
    adaptation_joint,
    confident_mask,
    mutual_information,
    smooth_joint,
    thresholded_entropy,
)

log = logging.getLogger(__name__)
METHODS = ("acids", "entropy_baseline", "none")


@dataclass
class AdaptConfig:
    epsilon_conf: float = 0.9
    epochs: int = 10
    lr: float = 1e-4
    batch_size: int = 64
    bn_estimation_batches: int = 60
    method: str = "acids"
    alpha: float = 0.7
    symmetrize: bool = False
    steps_per_epoch: Optional[int] = None  # None: one pass over the target; else cycle until this many steps
    seed: int = 0

    def validate(self, n_clusters: int) -> None:
        if self.method not in METHODS:
            raise InvalidConfig(f"method must be one of {METHODS}")
        if self.epsilon_conf <= 1.0 / n_clusters:
            raise InvalidConfig(f"epsilon_conf must exceed 1/C = {1.0 / n_clusters:.4f}")
        if not 0 < self.alpha <= 1:
            raise InvalidConfig("alpha must lie in (0, 1]")
        if self.batch_size < 2:
            raise InvalidConfig("batch_size must be >= 2")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise InvalidConfig("steps_per_epoch must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def target_domain(model: ClusterNet, target: Dataset) -> int:
    ids = target.manifest.domain_ids
    if len(ids) != 1:
        raise ContractViolation(f"adaptation takes exactly one target domain, got {ids}")
    (tid,) = ids
    if tid in model.source_domains:
        raise ContractViolation(f"domain {tid} is a source domain of this model")
    return tid


def _batch_size(config: AdaptConfig, size: int) -> int:
    return max(2, min(config.batch_size, size))


def prepare_target(model: ClusterNet, target: Dataset, config: AdaptConfig,
                   pipeline: Optional[TransformPipeline] = None) -> int:
    """Register the target domain and estimate its normalization statistics.

    Models trained with a single shared statistics bank keep it; no
    estimation happens for them. Returns the target domain id.
    """
    tid = target_domain(model, target)
    if tid not in model.domains:
        register_domain(model, tid)
    if not model.owns_bank(tid):
        log.info("domain %d shares bank %d; skipping statistics estimation", tid, model.bank(tid))
        return tid
    pipeline = pipeline or TransformPipeline(mode=target.manifest.mode)
    n = _batch_size(config, target.size(tid))
    stream = _estimation_stream(target, tid, n, config, pipeline)
    estimate_bn_statistics(model, stream, tid)
    return tid


def _estimation_stream(target: Dataset, tid: int, n: int, config: AdaptConfig, pipeline: TransformPipeline):
    produced = 0
    epoch = 0
    while produced < config.bn_estimation_batches:
        rng = np.random.default_rng([config.seed, 0xB7, epoch])
        for x in datagen.epoch_batches(target, tid, n, rng):
            xp = datagen.apply_transforms(pipeline, x, rng)
            yield np.concatenate([x, xp])
            produced += 1
            if produced >= config.bn_estimation_batches:
                return
        epoch += 1


def adaptation_loss(preds, preds_prime, smoothing, config: AdaptConfig):
    """Negative sharpened-joint MI averaged over head replicas.

    Returns ``(loss, mean_mi, confident_fraction)``.
    """
    mis, fractions = [], []
    for r in range(preds.shape[0]):
        joint = adaptation_joint(preds[r], preds_prime[r], config.epsilon_conf, config.symmetrize)
        mis.append(mutual_information(smooth_joint(joint, smoothing[r])))
        fractions.append(float(confident_mask(preds[r], config.epsilon_conf).float().mean()))
    mi = torch.stack(mis).mean()
    return -mi, mi, float(np.mean(fractions))


def entropy_loss(preds, config: AdaptConfig):
    losses, fractions = [], []
    for r in range(preds.shape[0]):
        losses.append(thresholded_entropy(preds[r], config.epsilon_conf))
        fractions.append(float(confident_mask(preds[r], config.epsilon_conf).float().mean()))
    return torch.stack(losses).mean(), float(np.mean(fractions))


def confident_fraction(model: ClusterNet, inputs, domain_id: int, epsilon_conf: float) -> float:
    with torch.no_grad():
        probs = model(inputs, domain_id, "main", mode="eval")
    return float(np.mean([float(confident_mask(p, epsilon_conf).float().mean()) for p in probs]))


def _epoch_stream(target: Dataset, tid: int, n: int, config: AdaptConfig, epoch: int):
    if config.steps_per_epoch is None:
        yield from datagen.epoch_batches(target, tid, n, np.random.default_rng([config.seed, epoch, tid, 0]))
        return
    produced, cycle = 0, 0
    while True:
        rng = np.random.default_rng([config.seed, epoch, tid, 0] + ([cycle] if cycle else []))
        for x in datagen.epoch_batches(target, tid, n, rng):
            yield x
            produced += 1
            if produced >= config.steps_per_epoch:
                return
        cycle += 1


def _run(model: ClusterNet, target: Dataset, config: AdaptConfig, pipeline: Optional[TransformPipeline],
         objective: str, on_record: Optional[Callable[[dict], None]]) -> list[dict]:
    tid = target_domain(model, target)
    model.bank(tid)
    pipeline = pipeline or TransformPipeline(mode=target.manifest.mode)
    params = [p for name, p in model.named_parameters() if not name.startswith("heads.over.")]
    optimizer = torch.optim.Adam(params, lr=config.lr)
    n = _batch_size(config, target.size(tid))
    replicas = model.config.n_head_replicas
    records = []
    step = 0
    for epoch in range(config.epochs):
        smoothing = [SmoothedJointState(alpha=config.alpha) for _ in range(replicas)]
        for i, x in enumerate(_epoch_stream(target, tid, n, config, epoch)):
            xp = datagen.apply_transforms(pipeline, x, np.random.default_rng([config.seed, epoch, i, tid, 1]))
            z, zp = paired_forward(model, x, xp, tid, "main")
            if objective == "acids":
                loss, mi, frac = adaptation_loss(z, zp, smoothing, config)
                record = {"mi_cluster": mi.item()}
            else:
                loss, frac = entropy_loss(z, config)
                record = {"entropy": loss.item()}
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"non-finite adaptation loss at step {step}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            record = {"step": step, "epoch": epoch, "head_kind": "main", **record,
                      "total": loss.item(), "confident_fraction": frac}
            records.append(record)
            if on_record is not None:
                on_record(record)
            step += 1
    return records


def adapt_target(model: ClusterNet, target: Dataset, config: AdaptConfig,
                 pipeline: Optional[TransformPipeline] = None,
                 on_record: Optional[Callable[[dict], None]] = None) -> list[dict]:
    """Maximize MI between sharpened original and transformed target predictions (main head only)."""
    config.validate(model.config.n_clusters)
    return _run(model, target, config, pipeline, "acids", on_record)


def adapt_entropy_baseline(model: ClusterNet, target: Dataset, config: AdaptConfig,
                           pipeline: Optional[TransformPipeline] = None,
                           on_record: Optional[Callable[[dict], None]] = None) -> list[dict]:
    """Minimize the entropy of unconfident target predictions (main head only)."""
    config.validate(model.config.n_clusters)
    return _run(model, target, config, pipeline, "entropy", on_record)


def adapt(model: ClusterNet, target: Dataset, config: AdaptConfig,
          pipeline: Optional[TransformPipeline] = None,
          on_record: Optional[Callable[[dict], None]] = None) -> list[dict]:
    """``prepare_target`` followed by the configured method."""
    config.validate(model.config.n_clusters)
    prepare_target(model, target, config, pipeline)
    if config.method == "acids":
        return adapt_target(model, target, config, pipeline, on_record)
    if config.method == "entropy_baseline":
        return adapt_entropy_baseline(model, target, config, pipeline, on_record)
    return []

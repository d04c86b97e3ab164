"""Source-phase training loop."""

from __future__ import annotations

import logging
import math
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch

from . import datagen
from .datagen import Dataset, TransformPipeline
from .encoder import ClusterNet, paired_forward, register_domain, trainable_parameters
from .errors import IncompatibleCheckpoint, InvalidConfig, MissingDomainBatch, NonFiniteLoss
from .prob_core import (
    PredictionBatch,
    SmoothedJointState,
    domain_joint,
    joint_from_predictions,
    mutual_information,
    smooth_joint,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 30
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    alpha: float = 0.7
    symmetrize: bool = True
    lambda_domain: float = 1.0
    lambda_domain_transformed: float = 1.0
    merged_source_shared_bn: bool = False
    single_source: Optional[int] = None
    no_domain_mi: bool = False
    no_bn_alignment: bool = False
    steps_per_epoch: Optional[int] = None
    early_stop_window: int = 0
    early_stop_tol: float = 1e-4
    seed: int = 0
    dump_dir: Optional[str] = None

    def __post_init__(self):
        self.betas = tuple(self.betas)

    def validate(self) -> None:
        if self.batch_size < 2:
            raise InvalidConfig("batch_size must be >= 2")
        if not 0 < self.alpha <= 1:
            raise InvalidConfig("alpha must lie in (0, 1]")
        if self.epochs < 0:
            raise InvalidConfig("epochs must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class LossBreakdown:
    mi_cluster: torch.Tensor
    mi_domain: torch.Tensor
    mi_domain_transformed: torch.Tensor
    total: torch.Tensor
    joints: list = field(default_factory=list, repr=False)

    def record(self) -> dict:
        return {
            "mi_cluster": self.mi_cluster.item(),
            "mi_domain": self.mi_domain.item(),
            "mi_domain_transformed": self.mi_domain_transformed.item(),
            "total": self.total.item(),
        }


def new_smoothing(alpha: float, replicas: int) -> list[SmoothedJointState]:
    return [SmoothedJointState(alpha=alpha) for _ in range(replicas)]


def assemble_loss(preds_by_domain: Mapping[int, torch.Tensor], preds_prime_by_domain: Mapping[int, torch.Tensor],
                  smoothing: Sequence[SmoothedJointState], config: TrainConfig,
                  domains: Optional[Sequence[int]] = None) -> LossBreakdown:
    """Combine clustering and domain-alignment MI terms, averaged over head replicas.

    ``preds_by_domain[d]`` holds stacked replica probabilities of shape (s, N, K).
    ``smoothing`` carries one moving-average state per replica.
    """
    keys = sorted(preds_by_domain)
    if domains is not None and sorted(domains) != keys:
        raise MissingDomainBatch(f"expected batches for domains {sorted(domains)}, got {keys}")
    if not keys or sorted(preds_prime_by_domain) != keys:
        raise MissingDomainBatch("original and transformed batches must cover the same domains")
    n_domains = len(keys)
    z_all = torch.cat([preds_by_domain[d] for d in keys], dim=1)
    zp_all = torch.cat([preds_prime_by_domain[d] for d in keys], dim=1)
    ids = torch.cat([torch.full((preds_by_domain[d].shape[1],), i, dtype=torch.long) for i, d in enumerate(keys)])
    replicas = z_all.shape[0]
    if len(smoothing) != replicas:
        raise ValueError(f"need {replicas} smoothing states, got {len(smoothing)}")

    mi_c, mi_d, mi_dt, joints = [], [], [], []
    for r in range(replicas):
        z, zp = z_all[r], zp_all[r]
        joint = smooth_joint(joint_from_predictions(PredictionBatch(z, zp, ids, n_domains), config.symmetrize),
                             smoothing[r])
        joints.append(joint.p.detach())
        mi_c.append(mutual_information(joint))
        if not config.no_domain_mi:
            mi_d.append(mutual_information(domain_joint(z, ids, n_domains)))
            mi_dt.append(mutual_information(domain_joint(zp, ids, n_domains)))
    mi_cluster = torch.stack(mi_c).mean()
    if config.no_domain_mi:
        zero = torch.zeros((), dtype=mi_cluster.dtype)
        return LossBreakdown(mi_cluster, zero, zero, -mi_cluster, joints)
    mi_domain = torch.stack(mi_d).mean()
    mi_domain_t = torch.stack(mi_dt).mean()
    total = -mi_cluster + config.lambda_domain * mi_domain + config.lambda_domain_transformed * mi_domain_t
    return LossBreakdown(mi_cluster, mi_domain, mi_domain_t, total, joints)


def head_for_epoch(epoch: int) -> str:
    return "main" if epoch % 2 == 0 else "over"


def source_domains(dataset: Dataset, config: TrainConfig, sources: Optional[Sequence[int]] = None) -> list[int]:
    if config.single_source is not None:
        return [int(config.single_source)]
    if sources is None:
        sources = dataset.manifest.ids_with_role("source") or dataset.manifest.domain_ids
    return sorted(int(s) for s in sources)


def bn_groups(model: ClusterNet, sources: Sequence[int], config: TrainConfig) -> list[tuple[int, list[int]]]:
    """Which source batches share one normalization pass, keyed by the bank's domain id."""
    if config.merged_source_shared_bn or config.no_bn_alignment or model.config.shared_bn:
        return [(sources[0], list(sources))]
    return [(d, [d]) for d in sources]


def prepare_source_model(model: ClusterNet, sources: Sequence[int], config: TrainConfig) -> None:
    if config.no_bn_alignment and not model.config.shared_bn:
        raise InvalidConfig("no_bn_alignment needs a model built with shared_bn=True")
    shared = config.merged_source_shared_bn
    for d in sources:
        if d not in model.domains:
            share = sources[0] if shared and d != sources[0] else None
            register_domain(model, d, share_with=share)
        if d not in model.source_domains:
            model.source_domains.append(d)


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    optimizer: Optional[dict] = None
    smoothing: dict = field(default_factory=dict)
    records: list = field(default_factory=list)
    stopped_early: bool = False
    main_mi_history: list = field(default_factory=list)  # per main-head epoch mean, for early stopping


def make_optimizer(model: ClusterNet, config: TrainConfig, params=None) -> torch.optim.Adam:
    params = [p for _, p in trainable_parameters(model)] if params is None else params
    return torch.optim.Adam(params, lr=config.lr, betas=config.betas, eps=config.adam_eps)


def _dump_joints(breakdown: LossBreakdown, config: TrainConfig, step: int) -> str:
    root = Path(config.dump_dir) if config.dump_dir else Path(tempfile.mkdtemp(prefix="acids-nonfinite-"))
    root.mkdir(parents=True, exist_ok=True)
    path = root / f"joints_step{step}.npz"
    np.savez(path, *[j.cpu().numpy() for j in breakdown.joints])
    return str(path)


def check_finite(breakdown: LossBreakdown, config: TrainConfig, step: int) -> None:
    if not math.isfinite(breakdown.total.item()):
        path = _dump_joints(breakdown, config, step)
        raise NonFiniteLoss(f"non-finite loss at step {step}; joint matrices dumped to {path}", path)


def training_step(model: ClusterNet, batches: Mapping[int, tuple], head: str, smoothing, config: TrainConfig,
                  groups: Sequence[tuple[int, list[int]]]) -> LossBreakdown:
    """Forward every source batch pair and assemble the loss (no backward)."""
    preds, preds_p = {}, {}
    for bank, members in groups:
        x = np.concatenate([batches[d][0] for d in members])
        xp = np.concatenate([batches[d][1] for d in members])
        z, zp = paired_forward(model, x, xp, bank, head)
        start = 0
        for d in members:
            n = len(batches[d][0])
            preds[d], preds_p[d] = z[:, start:start + n], zp[:, start:start + n]
            start += n
    if config.merged_source_shared_bn:
        keys = sorted(preds)
        preds = {0: torch.cat([preds[d] for d in keys], dim=1)}
        preds_p = {0: torch.cat([preds_p[d] for d in keys], dim=1)}
    return assemble_loss(preds, preds_p, smoothing, config)


def train_source(model: ClusterNet, dataset: Dataset, config: TrainConfig, *,
                 sources: Optional[Sequence[int]] = None,
                 pipeline: Optional[TransformPipeline] = None,
                 state: Optional[TrainState] = None,
                 on_record: Optional[Callable[[dict], None]] = None) -> TrainState:
    """Train on the source domains until ``config.epochs`` epochs have run.

    Passing a ``state`` from a checkpoint continues from its epoch counter.
    """
    config.validate()
    sources = source_domains(dataset, config, sources)
    prepare_source_model(model, sources, config)
    groups = bn_groups(model, sources, config)
    pipeline = pipeline or TransformPipeline(mode=dataset.manifest.mode)
    state = state or TrainState()
    replicas = model.config.n_head_replicas

    optimizer = make_optimizer(model, config)
    if state.optimizer is not None:
        optimizer.load_state_dict(state.optimizer)
    head_params = {
        kind: {id(p) for name, p in model.named_parameters() if name.startswith(f"heads.{kind}.")}
        for kind in ("main", "over")
    }

    steps = config.steps_per_epoch or min(dataset.size(d) for d in sources) // config.batch_size
    main_epoch_means = state.main_mi_history
    for epoch in range(state.epoch, config.epochs):
        head = head_for_epoch(epoch)
        smoothing = new_smoothing(config.alpha, replicas)
        state.smoothing[head] = smoothing
        iters = {
            d: datagen.epoch_batches(dataset, d, config.batch_size, np.random.default_rng([config.seed, epoch, d, 0]))
            for d in sources
        }
        epoch_mi = []
        for step in range(steps):
            batches = {}
            for d in sources:
                x = next(iters[d])
                rng = np.random.default_rng([config.seed, epoch, step, d, 1])
                batches[d] = (x, datagen.apply_transforms(pipeline, x, rng))
            breakdown = training_step(model, batches, head, smoothing, config, groups)
            check_finite(breakdown, config, state.step)
            optimizer.zero_grad(set_to_none=True)
            breakdown.total.backward()
            inactive = head_params["over" if head == "main" else "main"]
            for group in optimizer.param_groups:
                for p in group["params"]:
                    if id(p) in inactive:
                        p.grad = None
            optimizer.step()
            record = {"step": state.step, "epoch": epoch, "head_kind": head, **breakdown.record()}
            state.records.append(record)
            if on_record is not None:
                on_record(record)
            epoch_mi.append(record["mi_cluster"])
            state.step += 1
        state.epoch = epoch + 1
        log.debug("epoch %d head=%s mi_cluster=%.4f", epoch, head, float(np.mean(epoch_mi)) if epoch_mi else 0.0)
        if head == "main" and epoch_mi:
            main_epoch_means.append(float(np.mean(epoch_mi)))
            w = config.early_stop_window
            if w and len(main_epoch_means) >= 2 * w:
                recent = np.mean(main_epoch_means[-w:])
                before = np.mean(main_epoch_means[-2 * w:-w])
                if abs(recent - before) < config.early_stop_tol:
                    state.stopped_early = True
                    break
    state.optimizer = optimizer.state_dict()
    return state


def resume(checkpoint, dataset: Dataset, config: TrainConfig, *, model_config=None,
           sources: Optional[Sequence[int]] = None,
           pipeline: Optional[TransformPipeline] = None,
           on_record: Optional[Callable[[dict], None]] = None):
    """Continue source training from a checkpoint (a path or a loaded ``Checkpoint``).

    The batch size must match the one the checkpoint was trained with, since the
    stored smoothing memories are batch-level estimates. ``model_config``, when
    given, must hash to the stored configuration. Returns ``(model, state)``.
    """
    from .checkpoint import config_hash, load_checkpoint

    ckpt = checkpoint if hasattr(checkpoint, "model") else load_checkpoint(checkpoint)
    if ckpt.state is None or ckpt.train_config is None:
        raise IncompatibleCheckpoint("checkpoint carries no training state")
    if model_config is not None:
        if model_config.n_clusters != ckpt.model.config.n_clusters:
            raise IncompatibleCheckpoint(
                f"n_clusters {model_config.n_clusters} != checkpoint's {ckpt.model.config.n_clusters}")
        if config_hash(model_config) != ckpt.config_hash:
            raise IncompatibleCheckpoint("model config differs from the checkpoint's")
    stored = ckpt.train_config["batch_size"]
    if config.batch_size != stored:
        raise IncompatibleCheckpoint(f"batch_size {config.batch_size} != checkpoint's {stored}")
    state = train_source(ckpt.model, dataset, config, sources=sources, pipeline=pipeline,
                         state=ckpt.state, on_record=on_record)
    return ckpt.model, state

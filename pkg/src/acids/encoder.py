"""Clustering network with domain-conditional batch normalization.

The trunk is a short stack of affine (vector inputs) or convolutional (image
inputs) blocks, each followed by a :class:`DomainBatchNorm` that keeps one pair
of running statistics per registered domain while sharing ``gamma``/``beta``.
Two banks of replicated softmax heads read the trunk feature: ``main`` with
``n_clusters`` outputs and ``over`` with ``n_overclusters`` outputs.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .errors import (
    BatchTooSmall,
    CapacityExceeded,
    DuplicateDomain,
    EmptyStream,
    GraphConsumed,
    InvalidConfig,
    UnknownDomain,
)

HEAD_KINDS = ("main", "over")
MODES = ("train", "eval", "estimate")
_ACTIVATIONS = {"relu": nn.ReLU, "tanh": nn.Tanh, "elu": nn.ELU, "softplus": nn.Softplus}


@dataclass
class LayerSpec:
    width: int
    activation: str = "relu"


@dataclass
class ModelConfig:
    input_mode: str = "vector"
    input_shape: tuple = (8,)
    trunk: list = field(default_factory=lambda: [LayerSpec(64), LayerSpec(64)])
    n_clusters: int = 4
    n_overclusters: int = 28
    n_head_replicas: int = 5
    n_domains_max: int = 8
    bn_epsilon: float = 1e-5
    bn_momentum: float = 0.1
    shared_bn: bool = False
    seed: int = 0

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.trunk = [s if isinstance(s, LayerSpec) else LayerSpec(**s) for s in self.trunk]

    @classmethod
    def default_image(cls, **kw) -> "ModelConfig":
        kw.setdefault("trunk", [LayerSpec(16), LayerSpec(32), LayerSpec(64)])
        kw.setdefault("input_shape", (32, 32, 3))
        return cls(input_mode="image", **kw)

    def validate(self) -> None:
        if self.input_mode not in ("vector", "image"):
            raise InvalidConfig(f"input_mode must be 'vector' or 'image', got {self.input_mode!r}")
        if self.input_mode == "vector" and len(self.input_shape) != 1:
            raise InvalidConfig("vector input_shape must be (dim,)")
        if self.input_mode == "image":
            if len(self.input_shape) != 3:
                raise InvalidConfig("image input_shape must be (h, w, channels)")
            h, w, _ = self.input_shape
            if max(h, w) > 64 or min(h, w) < 2 ** len(self.trunk):
                raise InvalidConfig(f"image size {h}x{w} unsupported for {len(self.trunk)} pooling blocks")
        if not self.trunk:
            raise InvalidConfig("trunk needs at least one layer")
        for spec in self.trunk:
            if spec.width < 1 or spec.activation not in _ACTIVATIONS:
                raise InvalidConfig(f"bad layer spec {spec}")
        if self.n_clusters < 2:
            raise InvalidConfig("n_clusters must be >= 2")
        if self.n_overclusters < self.n_clusters:
            raise InvalidConfig("n_overclusters must be >= n_clusters")
        if self.n_head_replicas < 1:
            raise InvalidConfig("n_head_replicas must be >= 1")
        if self.n_domains_max < 1:
            raise InvalidConfig("n_domains_max must be >= 1")
        if self.bn_epsilon <= 0:
            raise InvalidConfig("bn_epsilon must be > 0")
        if not 0 < self.bn_momentum <= 1:
            raise InvalidConfig("bn_momentum must lie in (0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @property
    def feature_dim(self) -> int:
        return self.trunk[-1].width


class DomainBatchNorm(nn.Module):
    """Batch normalization with per-domain statistics and shared affine parameters."""

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.gamma = nn.Parameter(torch.ones(num_features))
        self.beta = nn.Parameter(torch.zeros(num_features))

    def add_domain(self, key: int) -> None:
        ref = self.gamma
        self.register_buffer(f"mean_{key}", torch.zeros(self.num_features, dtype=ref.dtype, device=ref.device))
        self.register_buffer(f"var_{key}", torch.ones(self.num_features, dtype=ref.dtype, device=ref.device))

    def has_domain(self, key: int) -> bool:
        return hasattr(self, f"mean_{key}")

    def running(self, key: int):
        return getattr(self, f"mean_{key}"), getattr(self, f"var_{key}")

    def _shape(self, x):
        return (1, -1) + (1,) * (x.ndim - 2)

    def forward(self, x: torch.Tensor, key: int, mode: str) -> torch.Tensor:
        dims = (0,) + tuple(range(2, x.ndim))
        shape = self._shape(x)
        running_mean, running_var = self.running(key)
        if mode == "eval":
            mean, var = running_mean, running_var
        else:
            mean = x.mean(dim=dims)
            # biased (1/n) variance over the pooled batch
            var = ((x - mean.view(shape)) ** 2).mean(dim=dims)
            with torch.no_grad():
                running_mean.mul_(1 - self.momentum).add_(self.momentum * mean.detach())
                running_var.mul_(1 - self.momentum).add_(self.momentum * var.detach())
        x_hat = (x - mean.view(shape)) / torch.sqrt(var.view(shape) + self.eps)
        return self.gamma.view(shape) * x_hat + self.beta.view(shape)


class _Block(nn.Module):
    def __init__(self, layer: nn.Module, bn: DomainBatchNorm, activation: str, pool: bool):
        super().__init__()
        self.layer = layer
        self.bn = bn
        self.act = _ACTIVATIONS[activation]()
        self.pool = nn.MaxPool2d(2) if pool else None

    def forward(self, x, key, mode, probe=None):
        x = self.bn(self.layer(x), key, mode)
        if probe is not None:
            probe.append(x)
        x = self.act(x)
        if self.pool is not None:
            x = self.pool(x)
        return x


class ClusterNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        blocks = []
        if config.input_mode == "vector":
            fan_in = config.input_shape[0]
            for spec in config.trunk:
                layer = nn.Linear(fan_in, spec.width)
                blocks.append(_Block(layer, DomainBatchNorm(spec.width, config.bn_epsilon, config.bn_momentum),
                                     spec.activation, pool=False))
                fan_in = spec.width
        else:
            fan_in = config.input_shape[2]
            for spec in config.trunk:
                layer = nn.Conv2d(fan_in, spec.width, kernel_size=3, padding=1)
                blocks.append(_Block(layer, DomainBatchNorm(spec.width, config.bn_epsilon, config.bn_momentum),
                                     spec.activation, pool=True))
                fan_in = spec.width
        self.blocks = nn.ModuleList(blocks)
        feat = config.feature_dim
        self.heads = nn.ModuleDict({
            "main": nn.ModuleList(nn.Linear(feat, config.n_clusters) for _ in range(config.n_head_replicas)),
            "over": nn.ModuleList(nn.Linear(feat, config.n_overclusters) for _ in range(config.n_head_replicas)),
        })
        # domain id -> id of the domain whose statistics bank it uses
        self.bank_map: dict[int, int] = {}
        # domains the model was trained on; the adapter refuses them as targets
        self.source_domains: list[int] = []

    # domain bookkeeping -------------------------------------------------
    @property
    def domains(self) -> list[int]:
        return list(self.bank_map)

    def bank(self, domain_id: int) -> int:
        try:
            return self.bank_map[int(domain_id)]
        except KeyError:
            raise UnknownDomain(f"domain {domain_id} is not registered (known: {self.domains})") from None

    def owns_bank(self, domain_id: int) -> bool:
        return self.bank(domain_id) == int(domain_id)

    def bn_layers(self) -> list[DomainBatchNorm]:
        return [b.bn for b in self.blocks]

    def bn_statistics(self, domain_id: int) -> list[tuple[torch.Tensor, torch.Tensor]]:
        key = self.bank(domain_id)
        return [bn.running(key) for bn in self.bn_layers()]

    # forward ------------------------------------------------------------
    def prepare_input(self, x) -> torch.Tensor:
        ref = next(self.parameters())
        if self.config.input_mode == "image":
            if isinstance(x, torch.Tensor):
                t = x
            else:
                arr = np.asarray(x)
                t = torch.from_numpy(np.ascontiguousarray(arr))
            scale = 255.0 if t.dtype == torch.uint8 else 1.0
            t = t.to(ref.dtype) / scale
            return t.permute(0, 3, 1, 2).contiguous()
        t = x if isinstance(x, torch.Tensor) else torch.from_numpy(np.ascontiguousarray(np.asarray(x)))
        return t.to(ref.dtype)

    def features(self, x, domain_id: int, mode: str = "eval", probe=None) -> torch.Tensor:
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        key = self.bank(domain_id)
        h = self.prepare_input(x)
        if mode != "eval" and h.shape[0] < 2:
            raise BatchTooSmall("batch statistics need at least 2 samples")
        for block in self.blocks:
            h = block(h, key, mode, probe)
        if h.ndim == 4:
            h = h.mean(dim=(2, 3))
        return h

    def head_logits(self, feats: torch.Tensor, head: str = "main") -> torch.Tensor:
        if head not in HEAD_KINDS:
            raise ValueError(f"head must be one of {HEAD_KINDS}")
        return torch.stack([lin(feats) for lin in self.heads[head]])

    def forward(self, x, domain_id: int, head: str = "main", mode: str = "train", return_logits: bool = False):
        logits = self.head_logits(self.features(x, domain_id, mode), head)
        if return_logits:
            return logits
        return torch.softmax(logits, dim=-1)


def init_model(config: ModelConfig) -> ClusterNet:
    """Build a network with fan-in scaled uniform weights drawn from ``config.seed``."""
    config.validate()
    model = ClusterNet(config)
    gen = torch.Generator().manual_seed(config.seed)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Linear, nn.Conv2d)):
                fan_in = module.weight[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                module.weight.copy_(torch.rand(module.weight.shape, generator=gen) * 2 * bound - bound)
                module.bias.copy_(torch.rand(module.bias.shape, generator=gen) * 2 * bound - bound)
    return model


def register_domain(model: ClusterNet, domain_id: int, share_with: Optional[int] = None) -> None:
    """Give ``domain_id`` fresh statistics (mean 0, var 1) in every BN layer.

    With ``share_with`` (or a ``shared_bn`` model that already has a bank) the
    domain reuses an existing bank instead.
    """
    domain_id = int(domain_id)
    if domain_id in model.bank_map:
        raise DuplicateDomain(f"domain {domain_id} already registered")
    if len(model.bank_map) >= model.config.n_domains_max:
        raise CapacityExceeded(f"model holds at most {model.config.n_domains_max} domains")
    if share_with is None and model.config.shared_bn and model.bank_map:
        share_with = next(iter(model.bank_map))
    if share_with is not None:
        model.bank_map[domain_id] = model.bank(share_with)
        return
    model.bank_map[domain_id] = domain_id
    for bn in model.bn_layers():
        bn.add_domain(domain_id)


def forward(model: ClusterNet, inputs, domain_id: int, head: str = "main", mode: str = "train") -> torch.Tensor:
    """Replica-stacked probabilities of shape (s, N, K)."""
    if mode == "eval":
        with torch.no_grad():
            return model(inputs, domain_id, head, mode)
    return model(inputs, domain_id, head, mode)


def paired_forward(model: ClusterNet, originals, transformed, domain_id: int, head: str = "main",
                   mode: str = "train", return_logits: bool = False):
    """Run both views through one pass so batch statistics pool over the 2N activations."""
    x = model.prepare_input(originals)
    xp = model.prepare_input(transformed)
    if x.shape != xp.shape:
        raise ValueError("paired batches must have equal shapes")
    n = x.shape[0]
    out = model(torch.cat([x, xp]), domain_id, head, mode, return_logits=return_logits)
    return out[:, :n], out[:, n:]


def estimate_bn_statistics(model: ClusterNet, data_stream: Iterable, domain_id: int) -> int:
    """Update running statistics of ``domain_id`` from a stream of input batches.

    Returns the number of batches consumed. Weights are never modified.
    """
    model.bank(domain_id)
    seen = 0
    with torch.no_grad():
        for batch in data_stream:
            model.features(batch, domain_id, mode="estimate")
            seen += 1
    if seen == 0:
        raise EmptyStream("no batches in the estimation stream")
    return seen


def trainable_parameters(model: ClusterNet, heads: Sequence[str] = HEAD_KINDS) -> list[tuple[str, nn.Parameter]]:
    out = []
    for name, p in model.named_parameters():
        if name.startswith("heads."):
            if name.split(".")[1] not in heads:
                continue
        out.append((name, p))
    return out


def gradients(model: ClusterNet, loss: torch.Tensor) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of ``loss`` for every trainable parameter.

    Parameters the loss does not depend on receive exact zeros. Running BN
    statistics are buffers and never appear in the result.
    """
    if getattr(loss, "_acids_consumed", False):
        raise GraphConsumed("gradients already taken for this loss graph")
    named = list(model.named_parameters())
    try:
        grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    except RuntimeError as exc:
        if "second time" in str(exc):
            raise GraphConsumed(str(exc)) from exc
        raise
    loss._acids_consumed = True
    return {
        name: (g if g is not None else torch.zeros_like(p))
        for (name, p), g in zip(named, grads)
    }


def parameter_digest(model: ClusterNet) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()

"""Joint-distribution estimation and mutual-information terms.

Every quantity here is computed on torch tensors so that the losses built from
them stay differentiable. Inputs that arrive as numpy arrays or nested lists
are converted with ``torch.as_tensor`` (float64 for Python floats).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch

from .errors import EmptyBatch, EmptyDomain, ShapeMismatch

LOG_FLOOR = 1e-12
SIMPLEX_TOL = 1e-6


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    t = torch.as_tensor(x)
    if not t.is_floating_point():
        t = t.to(torch.float64)
    return t


@dataclass
class PredictionBatch:
    """Soft assignments for original and transformed views of a batch."""

    z: torch.Tensor
    z_prime: torch.Tensor
    domain_ids: torch.Tensor
    n_domains: int = 1

    def __post_init__(self):
        self.z = _as_tensor(self.z)
        self.z_prime = _as_tensor(self.z_prime)
        self.domain_ids = torch.as_tensor(self.domain_ids, dtype=torch.long)

    @classmethod
    def single_domain(cls, z, z_prime) -> "PredictionBatch":
        z = _as_tensor(z)
        return cls(z, z_prime, torch.zeros(z.shape[0], dtype=torch.long), 1)

    def validate(self) -> None:
        if self.z.shape != self.z_prime.shape:
            raise ShapeMismatch(f"z {tuple(self.z.shape)} vs z' {tuple(self.z_prime.shape)}")
        if self.z.ndim != 2:
            raise ShapeMismatch(f"predictions must be N x C, got {tuple(self.z.shape)}")
        if self.domain_ids.shape != (self.z.shape[0],):
            raise ShapeMismatch("domain_ids length must equal the number of rows")
        for name, m in (("z", self.z), ("z_prime", self.z_prime)):
            if m.shape[0] and not _on_simplex(m):
                raise ValueError(f"rows of {name} are not probability vectors")


def _on_simplex(m: torch.Tensor) -> bool:
    m = m.detach()
    rows = m.sum(dim=1)
    return bool((m >= 0).all()) and bool(((rows - 1).abs() <= SIMPLEX_TOL).all())


class JointDistribution:
    """Nonnegative matrix summing to one, with marginals taken as its row/column sums."""

    __slots__ = ("p",)

    def __init__(self, p):
        self.p = _as_tensor(p)

    @property
    def row_marginal(self) -> torch.Tensor:
        return self.p.sum(dim=1)

    @property
    def col_marginal(self) -> torch.Tensor:
        return self.p.sum(dim=0)

    @property
    def shape(self):
        return tuple(self.p.shape)

    def is_valid(self, tol: float = SIMPLEX_TOL) -> bool:
        p = self.p.detach()
        return bool((p >= 0).all()) and abs(float(p.sum()) - 1.0) <= tol

    def __repr__(self):
        return f"JointDistribution(shape={self.shape})"


def joint_from_predictions(batch: PredictionBatch, symmetrize: bool = True) -> JointDistribution:
    """Average of per-sample outer products ``z_n z'_n^T`` over every domain in the batch."""
    if batch.z.shape != batch.z_prime.shape:
        raise ShapeMismatch(f"z {tuple(batch.z.shape)} vs z' {tuple(batch.z_prime.shape)}")
    n = batch.z.shape[0]
    if n == 0:
        raise EmptyBatch("cannot estimate a joint from zero samples")
    p = batch.z.transpose(0, 1) @ batch.z_prime / n
    if symmetrize:
        p = (p + p.transpose(0, 1)) / 2
    return JointDistribution(p)


def mutual_information(j: JointDistribution) -> torch.Tensor:
    """Plug-in mutual information (nats) of a joint distribution.

    Cells, row marginals and column marginals are floored at ``LOG_FLOOR``
    inside the logarithms so empty cells contribute exactly zero.
    """
    p = j.p
    pr = p.sum(dim=1, keepdim=True)
    pc = p.sum(dim=0, keepdim=True)
    log_ratio = (
        torch.log(p.clamp(min=LOG_FLOOR))
        - torch.log(pr.clamp(min=LOG_FLOOR))
        - torch.log(pc.clamp(min=LOG_FLOOR))
    )
    return (p * log_ratio).sum()


def domain_joint(z, domain_ids, n_domains: int) -> JointDistribution:
    """C x S joint of cluster assignment and domain under a uniform domain prior."""
    z = _as_tensor(z)
    ids = torch.as_tensor(domain_ids, dtype=torch.long)
    if ids.shape != (z.shape[0],):
        raise ShapeMismatch("domain_ids length must equal the number of rows of z")
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= n_domains):
        raise EmptyDomain(f"domain ids must lie in [0, {n_domains})")
    onehot = torch.nn.functional.one_hot(ids, n_domains).to(z.dtype)
    counts = onehot.sum(dim=0)
    if bool((counts == 0).any()):
        missing = torch.nonzero(counts == 0).flatten().tolist()
        raise EmptyDomain(f"no samples for domain(s) {missing}")
    means = (z.transpose(0, 1) @ onehot) / counts
    return JointDistribution(means / n_domains)


@dataclass
class SmoothedJointState:
    """Moving-average memory for a joint estimate.

    ``p_hat`` is always stored detached; only the ``alpha * current`` part of a
    smoothed estimate carries gradient.
    """

    alpha: float = 1.0
    p_hat: Optional[torch.Tensor] = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")

    @property
    def initialized(self) -> bool:
        return self.p_hat is not None

    def reset(self) -> None:
        self.p_hat = None


def smooth_joint(current: JointDistribution, state: SmoothedJointState) -> JointDistribution:
    if not state.initialized or state.alpha == 1.0:
        out = current
    else:
        p_hat = state.p_hat.to(dtype=current.p.dtype, device=current.p.device)
        out = JointDistribution(state.alpha * current.p + (1.0 - state.alpha) * p_hat)
    state.p_hat = out.p.detach().clone()
    return out


def confident_mask(z, epsilon_conf: float) -> torch.Tensor:
    z = _as_tensor(z)
    return z.detach().max(dim=1).values >= epsilon_conf


def sharpen_predictions(z, epsilon_conf: float) -> torch.Tensor:
    """Replace rows whose top probability reaches ``epsilon_conf`` by a constant one-hot.

    Ties break to the lowest index (``torch.argmax`` returns the first maximum).
    Replaced rows are built from detached values, so no gradient reaches them.
    """
    z = _as_tensor(z)
    mask = confident_mask(z, epsilon_conf)
    onehot = torch.nn.functional.one_hot(z.detach().argmax(dim=1), z.shape[1]).to(z.dtype)
    return torch.where(mask.unsqueeze(1), onehot, z)


def adaptation_joint(z, z_prime, epsilon_conf: float, symmetrize: bool = False) -> JointDistribution:
    z = _as_tensor(z)
    z_prime = _as_tensor(z_prime)
    if z.shape != z_prime.shape:
        raise ShapeMismatch(f"z {tuple(z.shape)} vs z' {tuple(z_prime.shape)}")
    if z.shape[0] == 0:
        raise EmptyBatch("cannot estimate a joint from zero samples")
    p = sharpen_predictions(z, epsilon_conf).transpose(0, 1) @ z_prime / z.shape[0]
    if symmetrize:
        p = (p + p.transpose(0, 1)) / 2
    return JointDistribution(p)


def _row_entropy(z: torch.Tensor) -> torch.Tensor:
    return -(z * torch.log(z.clamp(min=LOG_FLOOR))).sum(dim=1)


def prediction_entropy(z) -> torch.Tensor:
    """Mean Shannon entropy (nats) of the rows of ``z``."""
    return _row_entropy(_as_tensor(z)).mean()


def thresholded_entropy(z, epsilon_conf: float) -> torch.Tensor:
    """Mean entropy over rows whose confidence is below ``epsilon_conf``.

    Returns a graph-connected zero when every row is confident.
    """
    z = _as_tensor(z)
    keep = ~confident_mask(z, epsilon_conf)
    if not bool(keep.any()):
        return (z * 0).sum()
    return _row_entropy(z[keep]).mean()

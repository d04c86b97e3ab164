"""Label-aware scoring of clusterings.

This is the only module that opens sealed labels.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .datagen import EVALUATOR, Dataset
from .encoder import ClusterNet
from .errors import EmptyInput, LabelOutOfRange, ShapeMismatch


@dataclass
class ClusterMetrics:
    accuracy: float
    nmi_class: float
    nmi_domain: float
    per_class_recall: list
    matching: list  # matching[k] = cluster assigned to class k (-1 if none)
    confusion: list  # n_clusters x n_classes counts
    n_samples: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def contingency(assignments: np.ndarray, labels: np.ndarray, n_clusters: int, n_classes: int) -> np.ndarray:
    table = np.zeros((n_clusters, n_classes), dtype=np.int64)
    np.add.at(table, (assignments, labels), 1)
    return table


def _check(assignments, labels, n_clusters, n_classes):
    a = np.asarray(assignments, dtype=np.int64).ravel()
    y = np.asarray(labels, dtype=np.int64).ravel()
    if a.size == 0:
        raise EmptyInput("no samples to score")
    if a.shape != y.shape:
        raise ShapeMismatch("assignments and labels differ in length")
    if a.min() < 0 or a.max() >= n_clusters:
        raise LabelOutOfRange(f"assignments must lie in [0, {n_clusters})")
    if y.min() < 0 or y.max() >= n_classes:
        raise LabelOutOfRange(f"labels must lie in [0, {n_classes})")
    if n_clusters < n_classes:
        raise LabelOutOfRange("need at least as many clusters as classes")
    return a, y


def hungarian_accuracy(assignments, labels, n_clusters: int, n_classes: int | None = None,
                       mapping: str = "hungarian") -> ClusterMetrics:
    """Accuracy under the cluster-to-class map maximizing total matches.

    ``mapping="majority"`` instead sends each cluster to its most frequent
    class (several clusters may share a class).
    """
    if n_classes is None:
        n_classes = n_clusters
    a, y = _check(assignments, labels, n_clusters, n_classes)
    table = contingency(a, y, n_clusters, n_classes)
    if mapping == "hungarian":
        rows, cols = linear_sum_assignment(table, maximize=True)
        cluster_to_class = np.full(n_clusters, -1)
        cluster_to_class[rows] = cols
    elif mapping == "majority":
        cluster_to_class = table.argmax(axis=1)
        cluster_to_class[table.sum(axis=1) == 0] = -1
    else:
        raise ValueError(f"unknown mapping {mapping!r}")
    hit = cluster_to_class[a] == y
    class_counts = np.bincount(y, minlength=n_classes)
    recall = np.bincount(y[hit], minlength=n_classes) / np.maximum(class_counts, 1)
    matching = [int(np.flatnonzero(cluster_to_class == k)[0]) if (cluster_to_class == k).any() else -1
                for k in range(n_classes)]
    return ClusterMetrics(
        accuracy=float(hit.mean()),
        nmi_class=nmi(a, y),
        nmi_domain=0.0,
        per_class_recall=recall.tolist(),
        matching=matching,
        confusion=table.tolist(),
        n_samples=int(a.size),
    )


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(a, b) -> float:
    """Normalized mutual information with arithmetic-mean normalization.

    Returns 0 when either labeling is constant.
    """
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.size == 0:
        raise EmptyInput("nmi of empty labelings")
    if a.shape != b.shape:
        raise ShapeMismatch("labelings differ in length")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1)
    ha, hb = _entropy(table.sum(axis=1)), _entropy(table.sum(axis=0))
    if ha == 0 or hb == 0:
        return 0.0
    joint = table / table.sum()
    pa, pb = joint.sum(axis=1, keepdims=True), joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    mi = float((joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])).sum())
    return float(np.clip(mi / ((ha + hb) / 2), 0.0, 1.0))


def align_replicas(probs: np.ndarray) -> np.ndarray:
    """Permute each replica's clusters onto replica 0, then average.

    Replicas are trained independently, so their cluster indices are only
    defined up to a permutation; matching uses predictions alone.
    """
    ref = probs[0].argmax(axis=1)
    k = probs.shape[2]
    aligned = [probs[0]]
    for rep in probs[1:]:
        table = contingency(rep.argmax(axis=1), ref, k, k)
        rows, cols = linear_sum_assignment(table, maximize=True)
        perm = np.empty(k, dtype=np.int64)
        perm[cols] = rows
        aligned.append(rep[:, perm])
    return np.mean(aligned, axis=0)


def replica_probabilities(model: ClusterNet, inputs, domain_id: int, head: str = "main",
                          batch_size: int = 256) -> np.ndarray:
    """Eval-mode probabilities of every replica, shape (s, N, K)."""
    out = []
    with torch.no_grad():
        for start in range(0, len(inputs), batch_size):
            out.append(model(inputs[start:start + batch_size], domain_id, head, mode="eval").cpu().numpy())
    k = model.config.n_clusters if head == "main" else model.config.n_overclusters
    if not out:
        return np.zeros((model.config.n_head_replicas, 0, k))
    return np.concatenate(out, axis=1)


def predict(model: ClusterNet, inputs, domain_id: int, head: str = "main") -> np.ndarray:
    """Replica-aligned mean probabilities, shape (N, K)."""
    return align_replicas(replica_probabilities(model, inputs, domain_id, head))


def evaluate_model(model: ClusterNet, dataset: Dataset, domain_id: Union[int, Sequence[int], None] = None,
                   head: str = "main", mapping: str = "hungarian") -> ClusterMetrics:
    """Score eval-mode assignments on one or several domains of ``dataset``."""
    if domain_id is None:
        domain_ids = dataset.manifest.domain_ids
    elif isinstance(domain_id, (int, np.integer)):
        domain_ids = [int(domain_id)]
    else:
        domain_ids = [int(d) for d in domain_id]
    probs, labels, domains = [], [], []
    for d in domain_ids:
        p = replica_probabilities(model, dataset.inputs(d), d, head)
        probs.append(p)
        labels.append(dataset.labels(d).open(EVALUATOR))
        domains.append(np.full(p.shape[1], d))
    # align on the pooled predictions so every domain shares one permutation
    a = align_replicas(np.concatenate(probs, axis=1)).argmax(axis=1)
    y, dom = np.concatenate(labels), np.concatenate(domains)
    k = model.config.n_clusters if head == "main" else model.config.n_overclusters
    metrics = hungarian_accuracy(a, y, k, dataset.manifest.n_classes, mapping=mapping)
    if len(domain_ids) > 1:
        metrics.nmi_domain = nmi(a, dom)
    return metrics


def export_embeddings(model: ClusterNet, dataset: Dataset, domain_ids: Sequence[int], out_path) -> Path:
    """Write pre-head trunk features plus domain/label columns for offline projection.

    Produces ``<out>.f32`` (features, row-major float32), ``<out>.meta.i32``
    (domain id and label per row) and ``<out>.json`` describing both.
    """
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    feats, meta = [], []
    with torch.no_grad():
        for d in domain_ids:
            x = dataset.inputs(d)
            for start in range(0, len(x), 256):
                feats.append(model.features(x[start:start + 256], d, mode="eval").cpu().numpy())
            y = dataset.labels(d).open(EVALUATOR)
            meta.append(np.stack([np.full(len(y), d), y], axis=1))
    features = np.concatenate(feats).astype("<f4")
    columns = np.concatenate(meta).astype("<i4")
    feat_file = out_path.with_suffix(".f32")
    meta_file = out_path.with_suffix(".meta.i32")
    features.tofile(feat_file)
    columns.tofile(meta_file)
    header = {
        "schema_version": 1,
        "n_rows": int(features.shape[0]),
        "feature_dim": int(features.shape[1]),
        "features_blob": feat_file.name,
        "features_dtype": "float32-le",
        "meta_blob": meta_file.name,
        "meta_dtype": "int32-le",
        "meta_columns": ["domain_id", "label"],
        "domain_ids": [int(d) for d in domain_ids],
        "sha256": hashlib.sha256(features.tobytes() + columns.tobytes()).hexdigest(),
    }
    header_file = out_path.with_suffix(".json")
    header_file.write_text(json.dumps(header, indent=2) + "\n", encoding="utf-8")
    return header_file

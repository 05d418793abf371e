"""Source class anchors: class prototypes, spherical K-Means on the unit
sphere, and the prototype-transport adaptation that needs no gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import l2_normalize_rows
from .data import DomainDataset
from .head import HeadModel, forward


@dataclass
class Prototypes:
    """One unit-norm center per class, row index = class id."""

    centers: np.ndarray

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        if self.centers.ndim != 2 or self.centers.shape[0] < 1:
            raise ValueError("prototypes must be a nonempty matrix")
        norms = np.linalg.norm(self.centers, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("prototype rows must be unit norm")

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]


def class_prototypes(features: np.ndarray, labels: np.ndarray, num_classes: int,
                     ) -> Prototypes:
    """Normalized mean of normalized member features, one row per class."""
    feats = l2_normalize_rows(np.asarray(features, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    centers = np.empty((num_classes, feats.shape[1]))
    for c in range(num_classes):
        members = feats[labels == c]
        if members.shape[0] == 0:
            raise ValueError(f"class {c} has no samples")
        m = members.mean(axis=0)
        norm = np.linalg.norm(m)
        if norm == 0.0:
            raise ValueError(f"class {c} prototype degenerates to zero")
        centers[c] = m / norm
    return Prototypes(centers)


def spherical_kmeans(features: np.ndarray, init: Prototypes,
                     max_iters: int = 100, tol: float = 1e-6,
                     ) -> tuple[Prototypes, np.ndarray, np.ndarray]:
    """Cosine K-Means initialized at the given centers.

    Assignment maximizes cosine similarity (ties to the lower center index);
    recentering takes the normalized member mean, keeping the previous center
    when a cluster empties. Returns (centers, assignments, objective trace);
    the trace of sum-of-best-similarities never decreases.
    """
    feats = l2_normalize_rows(np.asarray(features, dtype=np.float64))
    if feats.shape[1] != init.centers.shape[1]:
        raise ValueError("feature and center widths disagree")
    if max_iters < 1:
        raise ValueError("max_iters must be positive")
    centers = init.centers.copy()
    k = centers.shape[0]
    n = feats.shape[0]
    prev_assign = None
    trace: list[float] = []
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(max_iters):
        sims = feats @ centers.T
        assign = sims.argmax(axis=1).astype(np.int64)  # first max = lowest index
        trace.append(float(sims[np.arange(n), assign].sum()))
        if prev_assign is not None and np.array_equal(assign, prev_assign):
            break
        if len(trace) >= 2 and trace[-1] - trace[-2] < tol:
            break
        for c in range(k):
            members = feats[assign == c]
            if members.shape[0] == 0:
                continue  # frozen center
            m = members.mean(axis=0)
            norm = np.linalg.norm(m)
            if norm > 0.0:
                centers[c] = m / norm
        prev_assign = assign
    return Prototypes(centers), assign, np.asarray(trace)


def nearest_prototype(features: np.ndarray, protos: Prototypes) -> np.ndarray:
    """1-NN cosine labels against prototype rows, ties to the lower class."""
    sims = l2_normalize_rows(np.asarray(features, dtype=np.float64)) @ protos.centers.T
    return sims.argmax(axis=1).astype(np.int64)


def sca_adapt(source: DomainDataset, target_features: np.ndarray,
              space: str = "raw", model: HeadModel | None = None,
              ) -> tuple[np.ndarray, Prototypes]:
    """Transport source prototypes onto the target cloud by spherical K-Means,
    then label every target sample by its nearest adapted prototype.

    space="raw" clusters the input features directly; space="bottleneck" maps
    both domains through the model's bottleneck first (eval mode, no weight is
    modified).
    """
    if source.labels is None:
        raise ValueError("source dataset must be labeled")
    target_features = np.asarray(target_features, dtype=np.float64)
    if space == "bottleneck":
        if model is None:
            raise ValueError("bottleneck space needs a head model")
        src_feats = forward(model, source.features, "eval")[1]
        tgt_feats = forward(model, target_features, "eval")[1]
    elif space == "raw":
        src_feats = source.features
        tgt_feats = target_features
    else:
        raise ValueError(f"unknown space {space!r}")
    if tgt_feats.shape[1] != src_feats.shape[1]:
        raise ValueError(
            f"target width {tgt_feats.shape[1]} does not match source width {src_feats.shape[1]}")

    protos = class_prototypes(src_feats, source.labels, source.num_classes)
    adapted, _, _ = spherical_kmeans(tgt_feats, protos)
    labels = nearest_prototype(tgt_feats, adapted)
    return labels, adapted

"""Polycentric pseudo-labeling with mixup consistency. Each class may own
several centers so elongated or split clusters stop bleeding labels; training
reuses the frozen-classifier information-maximization loop."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import derive_rng, l2_normalize_rows
from .engine import DistConfig
from .head import HeadModel
from .sca import Prototypes, spherical_kmeans
from .shot import _label_pass, run_im_ce_loop


@dataclass
class PcsrConfig:
    M: int = 2
    mixup_alpha: float = 0.3
    mixup_weight: float = 1.0
    ce_weight: float = 0.3
    kmeans_rounds: int = 1
    epochs: int = 15
    batch_size: int = 64
    learning_rate: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be positive")
        if self.mixup_alpha <= 0:
            raise ValueError("mixup_alpha must be positive")
        if self.mixup_weight < 0 or self.ce_weight < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


def mixup_batch(x: np.ndarray, targets: np.ndarray, alpha: float,
                rng: np.random.Generator, lam: float | None = None,
                ) -> tuple[np.ndarray, np.ndarray, float]:
    """Convex combination with a shuffled partner, one Beta(alpha, alpha)
    coefficient per batch. lam overrides the draw (test hook)."""
    x = np.asarray(x, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError("mixup needs a batch of at least 2")
    if x.shape[0] != targets.shape[0]:
        raise ValueError("inputs and targets must pair up")
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    perm = rng.permutation(x.shape[0])
    xm = lam * x + (1.0 - lam) * x[perm]
    tm = lam * targets + (1.0 - lam) * targets[perm]
    return xm, tm, lam


def _polycentric_refine(feats_n: np.ndarray, labels: np.ndarray,
                        base: Prototypes, m_centers: int,
                        rng: np.random.Generator) -> np.ndarray:
    """Split each class into up to M cosine sub-centers, then relabel every
    sample by its globally nearest center's owning class."""
    c_count = base.num_classes
    centers: list[np.ndarray] = []
    owners: list[int] = []
    for c in range(c_count):
        member_idx = np.flatnonzero(labels == c)
        if member_idx.size == 0:
            centers.append(base.centers[c][None, :])
            owners.append(c)
            continue
        m_c = min(m_centers, member_idx.size)
        members = feats_n[member_idx]
        pick = rng.choice(member_idx.size, size=m_c, replace=False)
        init = Prototypes(members[pick])
        protos, _, _ = spherical_kmeans(members, init)
        centers.append(protos.centers)
        owners.extend([c] * m_c)
    all_centers = np.concatenate(centers, axis=0)
    owner = np.asarray(owners, dtype=np.int64)
    sims = feats_n @ all_centers.T
    return owner[sims.argmax(axis=1)]


def polycentric_pseudo_labels(model: HeadModel, target_features: np.ndarray,
                              m_centers: int, seed: int = 0,
                              kmeans_rounds: int = 1,
                              prev_prototypes: Prototypes | None = None,
                              ) -> np.ndarray:
    """Soft-prototype labeling refined by per-class sub-centers. With
    m_centers=1 this reproduces the single-center labeling fixpoint."""
    if m_centers < 1:
        raise ValueError("m_centers must be positive")
    rng = derive_rng(seed, "pcsr-centers")
    x = np.asarray(target_features, dtype=np.float64)
    labels, protos, feats = _label_pass(model, x, kmeans_rounds, prev_prototypes)
    return _polycentric_refine(l2_normalize_rows(feats), labels, protos,
                               m_centers, rng)


def pcsr_adapt(model: HeadModel, target_features: np.ndarray, cfg: PcsrConfig,
               dist: DistConfig | None = None) -> HeadModel:
    """Polycentric pseudo-label CE + information maximization + mixup CE.

    Classifier frozen. With M=1 and mixup_weight=0 the loop runs the same
    arithmetic as the single-center soft-prototype adapter.
    """
    x = np.asarray(target_features, dtype=np.float64)
    rng_centers = derive_rng(cfg.seed, "pcsr-centers")
    rng_mix = derive_rng(cfg.seed, "pcsr-mixup")

    def relabel(m, prev):
        labels, protos, feats = _label_pass(m, x, cfg.kmeans_rounds, prev)
        labels = _polycentric_refine(l2_normalize_rows(feats), labels, protos,
                                     cfg.M, rng_centers)
        return labels, protos

    mixup_fn = None
    if cfg.mixup_weight > 0.0:
        def mixup_fn(xb, tb):
            xm, tm, _ = mixup_batch(xb, tb, cfg.mixup_alpha, rng_mix)
            return xm, tm

    return run_im_ce_loop(
        model, x, epochs=cfg.epochs, batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate, ce_weight=cfg.ce_weight,
        momentum=cfg.momentum, weight_decay=cfg.weight_decay, seed=cfg.seed,
        relabel=relabel, mixup_fn=mixup_fn, mixup_weight=cfg.mixup_weight,
        dist=dist)

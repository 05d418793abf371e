"""Information-maximization adaptation with soft-weighted pseudo-label
prototypes. The classifier stays frozen; only the bottleneck and norm
parameters move."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import derive_rng, l2_normalize_rows, log_softmax, one_hot
from .engine import (DistConfig, TRAINED_BOTTLENECK, adapt_lr, effective_batch,
                     shard_rows, sharded_step)
from .head import HeadModel, SgdState, cross_entropy, forward, sgd_step
from .sca import Prototypes, spherical_kmeans


@dataclass
class ShotConfig:
    epochs: int = 15
    batch_size: int = 64
    learning_rate: float = 1e-2
    ce_weight: float = 0.3
    kmeans_rounds: int = 1
    momentum: float = 0.9
    weight_decay: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate < 0 or self.ce_weight < 0:
            raise ValueError("learning_rate and ce_weight must be nonnegative")
        if self.kmeans_rounds < 0:
            raise ValueError("kmeans_rounds must be nonnegative")


def weighted_prototypes(probs: np.ndarray, feats: np.ndarray) -> np.ndarray:
    """Soft-count class centroids: k_c = sum_i p_c(i) f(i) / sum_i p_c(i).

    Raw (unnormalized) output; every class must carry positive soft mass.
    """
    probs = np.asarray(probs, dtype=np.float64)
    feats = np.asarray(feats, dtype=np.float64)
    mass = probs.sum(axis=0)
    if np.any(mass <= 0.0):
        c = int(np.flatnonzero(mass <= 0.0)[0])
        raise ValueError(f"class {c} has zero soft mass")
    return (probs.T @ feats) / mass[:, None]


def _label_pass(model: HeadModel, x: np.ndarray, kmeans_rounds: int,
                prev: Prototypes | None):
    """Full-set eval pass -> soft prototypes -> cosine K-Means refinement.

    Fallback order for a class with zero soft mass: mean of the samples that
    argmax to it, else the previous epoch's prototype, else the global mean.
    """
    logits, feats, _ = forward(model, x, "eval")
    probs = np.exp(log_softmax(logits))
    c_count = model.num_classes
    mass = probs.sum(axis=0)
    hard = logits.argmax(axis=1)
    centers = np.empty((c_count, feats.shape[1]))
    for c in range(c_count):
        if mass[c] > 0.0:
            centers[c] = (probs[:, c] @ feats) / mass[c]
        else:
            members = feats[hard == c]
            if members.shape[0]:
                centers[c] = members.mean(axis=0)
            elif prev is not None:
                centers[c] = prev.centers[c]
            else:
                centers[c] = feats.mean(axis=0)
    norms = np.linalg.norm(centers, axis=1)
    if np.any(norms == 0.0):
        c = int(np.flatnonzero(norms == 0.0)[0])
        raise ValueError(f"prototype for class {c} is the zero vector")
    protos = Prototypes(centers / norms[:, None])

    feats_n = l2_normalize_rows(feats)
    for _ in range(kmeans_rounds):
        protos, _, _ = spherical_kmeans(feats, protos)
    labels = (feats_n @ protos.centers.T).argmax(axis=1).astype(np.int64)
    return labels, protos, feats

def shot_pseudo_labels(model: HeadModel, target_features: np.ndarray,
                       kmeans_rounds: int = 1,
                       prev_prototypes: Prototypes | None = None,
                       ) -> tuple[np.ndarray, Prototypes]:
    x = np.asarray(target_features, dtype=np.float64)
    labels, protos, _ = _label_pass(model, x, kmeans_rounds, prev_prototypes)
    return labels, protos


def entropy_loss(logits: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean per-row prediction entropy and its logit gradient."""
    b = logits.shape[0]
    logp = log_softmax(logits)
    p = np.exp(logp)
    plogp = np.where(p > 0.0, p * logp, 0.0)
    h_rows = -plogp.sum(axis=1)
    value = float(h_rows.mean())
    grad = np.where(p > 0.0, -p * (logp + h_rows[:, None]), 0.0) / b
    return value, grad


def diversity_loss(logits: np.ndarray) -> tuple[float, np.ndarray]:
    """Negative entropy of the batch-mean prediction, sum_k pbar_k ln pbar_k.

    This is the term that depends on who shares your batch: its minimum -ln C
    is reached when the batch marginal is uniform.
    """
    b = logits.shape[0]
    logp = log_softmax(logits)
    p = np.exp(logp)
    # log pbar_k = logsumexp_i logp_ik - log b, stable even under underflow
    m = logp.max(axis=0)
    m = np.where(np.isfinite(m), m, 0.0)
    log_pbar = np.log(np.exp(logp - m).sum(axis=0)) + m - np.log(b)
    pbar = np.exp(log_pbar)
    value = float(np.where(pbar > 0.0, pbar * log_pbar, 0.0).sum())
    inner = np.where(p > 0.0, p * log_pbar[None, :], 0.0)
    grad = (inner - p * inner.sum(axis=1, keepdims=True)) / b
    return value, grad


def im_loss(logits: np.ndarray) -> tuple[float, np.ndarray]:
    """Information-maximization objective: confident rows, diverse marginal.

    Lower bound is -ln C, attained by one-hot rows spread evenly over classes.
    """
    ve, ge = entropy_loss(logits)
    vd, gd = diversity_loss(logits)
    return ve + vd, ge + gd


def run_im_ce_loop(model: HeadModel, target_features: np.ndarray, *, epochs: int,
                   batch_size: int, learning_rate: float, ce_weight: float,
                   momentum: float, weight_decay: float, seed: int, relabel,
                   mixup_fn=None, mixup_weight: float = 0.0,
                   dist: DistConfig | None = None) -> HeadModel:
    """Shared trainer for the pseudo-label + information-maximization family.

    relabel(model, prev_protos) -> (labels, protos) runs once per epoch on the
    full set. The classifier never moves. mixup_fn, when given and weighted,
    contributes an extra supervised term on mixed inputs.
    """
    x = np.asarray(target_features, dtype=np.float64)
    model = model.copy()
    workers = dist.workers if dist is not None else 1
    sync = dist.sync_batchnorm if dist is not None else False
    n = x.shape[0]
    bs = effective_batch(n, batch_size, workers)
    if model.norm.kind == "batchnorm" and bs // workers < 2 and not sync:
        raise ValueError("shard size < 2 is invalid with a batchnorm head")

    c_count = model.num_classes
    state = SgdState({k: v for k, v in model.params().items() if k in TRAINED_BOTTLENECK})
    rng_shuffle = derive_rng(seed, "adapt-shuffle")
    steps_per_epoch = n // bs
    total_steps = epochs * steps_per_epoch
    step = 0
    protos = None
    for _ in range(epochs):
        labels, protos = relabel(model, protos)
        targets = one_hot(labels, c_count)

        order = rng_shuffle.permutation(n)
        for s in range(steps_per_epoch):
            rows = order[s * bs:(s + 1) * bs]
            shards = shard_rows(rows, workers)

            def objective(_w, sh, logits):
                v_im, d_im = im_loss(logits)
                v_ce, d_ce = cross_entropy(logits, targets[sh])
                return v_im + ce_weight * v_ce, d_im + ce_weight * d_ce

            _, grads, _ = sharded_step(model, x, shards, objective, sync)
            grads = {k: grads[k] for k in TRAINED_BOTTLENECK}

            if mixup_fn is not None and mixup_weight > 0.0:
                mixed = [mixup_fn(x[sh], targets[sh]) for sh in shards]
                xm = np.concatenate([m[0] for m in mixed])
                tm = np.concatenate([m[1] for m in mixed])
                pos = np.arange(len(xm))

                def mix_objective(w, sh, logits):
                    return cross_entropy(logits, tm[sh])

                _, gm, _ = sharded_step(model, xm, shard_rows(pos, workers),
                                        mix_objective, sync)
                for k in TRAINED_BOTTLENECK:
                    grads[k] += mixup_weight * gm[k]

            sgd_step(model, grads, state, adapt_lr(learning_rate, step, total_steps),
                     momentum, weight_decay)
            step += 1
    return model


def shot_adapt(model: HeadModel, target_features: np.ndarray, cfg: ShotConfig,
               dist: DistConfig | None = None) -> HeadModel:
    """Adapt the bottleneck to unlabeled target features; classifier frozen."""

    def relabel(m, prev):
        labels, protos = shot_pseudo_labels(m, target_features, cfg.kmeans_rounds, prev)
        return labels, protos

    return run_im_ce_loop(
        model, target_features, epochs=cfg.epochs, batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate, ce_weight=cfg.ce_weight,
        momentum=cfg.momentum, weight_decay=cfg.weight_decay, seed=cfg.seed,
        relabel=relabel, dist=dist)

"""Neighborhood-driven adaptation: a detached memory bank of features and
scores, reciprocal-neighbor affinity (NRC), and attract/disperse with a
decaying dispersal weight (AAD). Both update every head parameter."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import derive_rng, knn_indices, l2_normalize_rows, softmax
from .engine import (DistConfig, TRAINED_ALL, adapt_lr, effective_batch,
                     shard_rows, sharded_step)
from .head import HeadModel, SgdState, forward, sgd_step


@dataclass
class NrcConfig:
    K: int = 3
    KK: int = 3
    r: float = 0.1
    epochs: int = 15
    batch_size: int = 64
    learning_rate: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.K < 1 or self.KK < 1:
            raise ValueError("K and KK must be positive")
        if self.r < 0:
            raise ValueError("reduced affinity r must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


@dataclass
class AadConfig:
    K: int = 3
    beta: float = 0.75
    epochs: int = 15
    batch_size: int = 64
    learning_rate: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be positive")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    @property
    def background_size(self) -> int:
        return 2 * self.K


@dataclass
class MemoryBank:
    """Detached snapshot of the whole target set: unit features, simplex scores."""

    features: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.features.ndim != 2 or self.scores.ndim != 2:
            raise ValueError("bank tensors must be matrices")
        if self.features.shape[0] != self.scores.shape[0]:
            raise ValueError("bank row counts disagree")
        norms = np.linalg.norm(self.features, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("bank feature rows must be unit norm")
        if np.any(self.scores < -1e-12) or np.any(np.abs(self.scores.sum(axis=1) - 1.0) > 1e-6):
            raise ValueError("bank score rows must lie on the simplex")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    def refresh(self, rows: np.ndarray, feats: np.ndarray, scores: np.ndarray) -> None:
        self.features[rows] = l2_normalize_rows(feats)
        self.scores[rows] = scores


def build_bank(model: HeadModel, target_features: np.ndarray) -> MemoryBank:
    logits, feats, _ = forward(model, target_features, "eval")
    return MemoryBank(l2_normalize_rows(feats), softmax(logits))


def reciprocal_flags(bank: MemoryBank, k: int) -> np.ndarray:
    """flags[i, j] is True when i is also among the k neighbors of its j-th
    neighbor (mutual nearness)."""
    nn = knn_indices(bank.features, k, "cosine")
    return (nn[nn] == np.arange(bank.n)[:, None, None]).any(axis=-1)


def _simplex_nll_grad(scores: np.ndarray) -> tuple[float, np.ndarray]:
    # batch-marginal negative entropy, the diversity penalty on raw scores
    b = scores.shape[0]
    pbar = scores.mean(axis=0)
    if np.any(pbar <= 0.0):
        raise ValueError("batch marginal has a zero class")
    log_pbar = np.log(pbar)
    value = float((pbar * log_pbar).sum())
    grad = np.broadcast_to((log_pbar + 1.0) / b, scores.shape).copy()
    return value, grad


def nrc_loss(batch_scores: np.ndarray, batch_indices: np.ndarray, bank: MemoryBank,
             cfg: NrcConfig, self_anchor: np.ndarray | None = None,
             reciprocal_override: np.ndarray | None = None,
             ) -> tuple[float, np.ndarray]:
    """Reciprocal-weighted affinity to bank neighbors, expanded-neighborhood
    affinity scaled by r, a stop-gradient self term, and the batch diversity
    penalty. Gradient is with respect to batch_scores; bank entries and the
    self anchor are constants.
    """
    p = np.asarray(batch_scores, dtype=np.float64)
    bidx = np.asarray(batch_indices, dtype=np.int64)
    b = p.shape[0]
    if bidx.shape != (b,):
        raise ValueError("batch_indices must match batch_scores rows")
    if bidx.size and (bidx.min() < 0 or bidx.max() >= bank.n):
        raise ValueError("batch index outside the bank")
    if bank.n <= max(cfg.K, cfg.KK):
        raise ValueError("bank too small for the neighborhood sizes")
    anchor = p if self_anchor is None else np.asarray(self_anchor, dtype=np.float64)

    nn_k = knn_indices(bank.features, cfg.K, "cosine")
    nn_kk = nn_k if cfg.KK == cfg.K else knn_indices(bank.features, cfg.KK, "cosine")
    neigh = nn_k[bidx]                                   # (b, K)
    if reciprocal_override is None:
        recip = (nn_k[neigh] == bidx[:, None, None]).any(axis=-1)
    else:
        recip = np.asarray(reciprocal_override, dtype=bool)
    aff = np.where(recip, 1.0, cfg.r)                    # (b, K)

    s_neigh = bank.scores[neigh]                         # (b, K, C)
    s_aff = (aff[:, :, None] * s_neigh).sum(axis=1)      # (b, C)
    s_exp = bank.scores[nn_kk[neigh]].sum(axis=(1, 2))   # (b, C)

    pulled = s_aff + cfg.r * s_exp + anchor
    value = float(-(p * pulled).sum() / b)
    v_div, g_div = _simplex_nll_grad(p)
    return value + v_div, -pulled / b + g_div


def decay_lambda(step: int, max_step: int, beta: float) -> float:
    """Dispersal weight (1 + 10 step/max_step)^(-beta)."""
    if max_step < 1:
        raise ValueError("max_step must be positive")
    if not 0 <= step <= max_step:
        raise ValueError("step must lie in [0, max_step]")
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    return float((1.0 + 10.0 * step / max_step) ** -beta)


def sample_backgrounds(bank_n: int, neigh: np.ndarray, batch_indices: np.ndarray,
                       size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform non-neighbor sample per batch row, without replacement."""
    b, k = neigh.shape
    if bank_n <= k + size:
        raise ValueError(f"bank of {bank_n} too small for K={k} plus {size} background")
    out = np.empty((b, size), dtype=np.int64)
    for i in range(b):
        blocked = set(neigh[i].tolist())
        blocked.add(int(batch_indices[i]))
        pool = np.array([j for j in range(bank_n) if j not in blocked], dtype=np.int64)
        out[i] = rng.choice(pool, size=size, replace=False)
    return out


def aad_loss(batch_scores: np.ndarray, batch_indices: np.ndarray, bank: MemoryBank,
             lambda_t: float, cfg: AadConfig, rng: np.random.Generator | None = None,
             backgrounds: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Attract each prediction toward its close bank neighbors, disperse it
    from a resampled background set weighted by lambda_t. Gradient is with
    respect to batch_scores; bank entries are constants."""
    p = np.asarray(batch_scores, dtype=np.float64)
    bidx = np.asarray(batch_indices, dtype=np.int64)
    b = p.shape[0]
    if bidx.shape != (b,):
        raise ValueError("batch_indices must match batch_scores rows")
    if bidx.size and (bidx.min() < 0 or bidx.max() >= bank.n):
        raise ValueError("batch index outside the bank")

    neigh = knn_indices(bank.features, cfg.K, "cosine")[bidx]
    if backgrounds is None:
        if rng is None:
            raise ValueError("aad_loss needs an rng when backgrounds are not given")
        backgrounds = sample_backgrounds(bank.n, neigh, bidx, cfg.background_size, rng)

    s_close = bank.scores[neigh].sum(axis=1)         # (b, C)
    s_far = bank.scores[backgrounds].sum(axis=1)     # (b, C)
    value = float((-(p * s_close).sum() + lambda_t * (p * s_far).sum()) / b)
    grad = (-s_close + lambda_t * s_far) / b
    return value, grad


def softmax_score_grad(p: np.ndarray, dscores: np.ndarray) -> np.ndarray:
    """Pull a gradient on softmax outputs back to the logits."""
    return p * (dscores - (p * dscores).sum(axis=1, keepdims=True))


def _neighbor_adapt(model: HeadModel, target_features: np.ndarray, cfg,
                    kind: str, dist: DistConfig | None) -> HeadModel:
    x = np.asarray(target_features, dtype=np.float64)
    model = model.copy()
    workers = dist.workers if dist is not None else 1
    sync = dist.sync_batchnorm if dist is not None else False
    n = x.shape[0]
    bs = effective_batch(n, cfg.batch_size, workers)
    if model.norm.kind == "batchnorm" and bs // workers < 2 and not sync:
        raise ValueError("shard size < 2 is invalid with a batchnorm head")

    bank = build_bank(model, x)
    state = SgdState(model.params())
    rng_shuffle = derive_rng(cfg.seed, "adapt-shuffle")
    rng_bg = derive_rng(cfg.seed, "aad-background")
    steps_per_epoch = n // bs
    total_steps = cfg.epochs * steps_per_epoch

    step = 0
    for _ in range(cfg.epochs):
        order = rng_shuffle.permutation(n)
        for s in range(steps_per_epoch):
            rows = order[s * bs:(s + 1) * bs]
            shards = shard_rows(rows, workers)
            lambda_t = decay_lambda(step, total_steps, cfg.beta) if kind == "aad" else 0.0

            def objective(_w, sh, logits):
                p = softmax(logits)
                if kind == "nrc":
                    v, dscores = nrc_loss(p, sh, bank, cfg)
                else:
                    v, dscores = aad_loss(p, sh, bank, lambda_t, cfg, rng=rng_bg)
                return v, softmax_score_grad(p, dscores)

            _, grads, outputs = sharded_step(model, x, shards, objective, sync)
            sgd_step(model, grads, state, adapt_lr(cfg.learning_rate, step, total_steps),
                     cfg.momentum, cfg.weight_decay)
            for sh, logits, feats in outputs:
                bank.refresh(sh, feats, softmax(logits))
            step += 1
    return model


def nrc_adapt(model: HeadModel, target_features: np.ndarray, cfg: NrcConfig,
              dist: DistConfig | None = None) -> HeadModel:
    return _neighbor_adapt(model, target_features, cfg, "nrc", dist)


def aad_adapt(model: HeadModel, target_features: np.ndarray, cfg: AadConfig,
              dist: DistConfig | None = None) -> HeadModel:
    return _neighbor_adapt(model, target_features, cfg, "aad", dist)

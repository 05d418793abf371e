"""Trainable head: linear bottleneck, normalization, activation, and a linear
classifier, with hand-written forward/backward passes.

The backward pass differentiates through train-mode batch statistics, which is
what makes the sharded-gradient simulation meaningful. Finite-difference tests
pin every formula here.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import erf

from .core import derive_rng, log_softmax, make_rng, one_hot, softmax
from .data import DomainDataset

PARAM_NAMES = ("bottleneck_weight", "bottleneck_bias", "gamma", "beta",
               "classifier_weight", "classifier_bias")
BOTTLENECK_PARAMS = ("bottleneck_weight", "bottleneck_bias", "gamma", "beta")
CLASSIFIER_PARAMS = ("classifier_weight", "classifier_bias")

NORM_TAGS = {"batchnorm": 0, "layernorm": 1}
ACT_TAGS = {"relu": 0, "gelu": 1}
CKPT_MAGIC = b"SFHM"


class StaleCacheError(RuntimeError):
    pass


@dataclass
class HeadConfig:
    in_dim: int
    num_classes: int
    hidden_dim: int = 256
    norm_kind: str = "layernorm"
    activation: str = "relu"
    bn_momentum: float = 0.1
    eps: float | None = None    # None: 1e-5 for batchnorm, 1e-6 for layernorm

    seed: int = 0

    def __post_init__(self):
        if self.norm_kind not in NORM_TAGS:
            raise ValueError(f"unknown norm_kind {self.norm_kind!r}")
        if self.activation not in ACT_TAGS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if min(self.in_dim, self.num_classes, self.hidden_dim) < 1:
            raise ValueError("dimensions must be positive")
        if not 0.0 < self.bn_momentum <= 1.0:
            raise ValueError("bn_momentum must lie in (0, 1]")
        if self.eps is None:
            self.eps = 1e-5 if self.norm_kind == "batchnorm" else 1e-6
        if self.eps <= 0:
            raise ValueError("eps must be positive")


@dataclass
class NormLayer:
    kind: str
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray | None
    running_var: np.ndarray | None
    momentum: float
    eps: float

    def copy(self) -> "NormLayer":
        return NormLayer(self.kind, self.gamma.copy(), self.beta.copy(),
                         None if self.running_mean is None else self.running_mean.copy(),
                         None if self.running_var is None else self.running_var.copy(),
                         self.momentum, self.eps)


@dataclass
class HeadModel:
    bottleneck_weight: np.ndarray   # (d, h)
    bottleneck_bias: np.ndarray     # (h,)
    norm: NormLayer
    activation: str
    classifier_weight: np.ndarray   # (h, C)
    classifier_bias: np.ndarray     # (C,)
    version: int = 0

    @property
    def in_dim(self) -> int:
        return self.bottleneck_weight.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.bottleneck_weight.shape[1]

    @property
    def num_classes(self) -> int:
        return self.classifier_weight.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        """Live references to the trainable tensors, in declaration order."""
        return {
            "bottleneck_weight": self.bottleneck_weight,
            "bottleneck_bias": self.bottleneck_bias,
            "gamma": self.norm.gamma,
            "beta": self.norm.beta,
            "classifier_weight": self.classifier_weight,
            "classifier_bias": self.classifier_bias,
        }

    def copy(self) -> "HeadModel":
        return HeadModel(self.bottleneck_weight.copy(), self.bottleneck_bias.copy(),
                         self.norm.copy(), self.activation,
                         self.classifier_weight.copy(), self.classifier_bias.copy(),
                         self.version)

    def bump_version(self) -> None:
        self.version += 1


def init_head(cfg: HeadConfig) -> HeadModel:
    """He-style normal init for weights, zeros for biases, identity norm."""
    rng = make_rng(cfg.seed)
    d, h, c = cfg.in_dim, cfg.hidden_dim, cfg.num_classes
    w1 = rng.standard_normal((d, h)) * np.sqrt(2.0 / d)
    wc = rng.standard_normal((h, c)) * np.sqrt(2.0 / h)
    bn = cfg.norm_kind == "batchnorm"
    norm = NormLayer(cfg.norm_kind, np.ones(h), np.zeros(h),
                     np.zeros(h) if bn else None,
                     np.ones(h) if bn else None,
                     cfg.bn_momentum, cfg.eps)
    return HeadModel(w1, np.zeros(h), norm, cfg.activation, wc, np.zeros(c))


@dataclass
class ForwardCache:
    mode: str
    x: np.ndarray
    xhat: np.ndarray
    inv_std: np.ndarray
    y: np.ndarray
    feats: np.ndarray
    version: int


def _gelu(y: np.ndarray) -> np.ndarray:
    return y * 0.5 * (1.0 + erf(y / np.sqrt(2.0)))


def _gelu_grad(y: np.ndarray) -> np.ndarray:
    phi = np.exp(-0.5 * y * y) / np.sqrt(2.0 * np.pi)
    return 0.5 * (1.0 + erf(y / np.sqrt(2.0))) + y * phi


def forward(model: HeadModel, x: np.ndarray, mode: str = "eval",
            ) -> tuple[np.ndarray, np.ndarray, ForwardCache]:
    """Returns (logits, post-activation bottleneck features, cache).

    Train mode normalizes with batch statistics and updates the running
    estimates; eval mode is a pure per-row function.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.in_dim:
        raise ValueError(f"expected inputs of width {model.in_dim}, got {x.shape}")
    b = x.shape[0]
    norm = model.norm
    z = x @ model.bottleneck_weight + model.bottleneck_bias

    if norm.kind == "batchnorm":
        if mode == "train":
            if b < 2:
                raise ValueError("train-mode batchnorm needs a batch of at least 2")
            mu = z.mean(axis=0)
            var = z.var(axis=0)
            inv = 1.0 / np.sqrt(var + norm.eps)
            xhat = (z - mu) * inv
            m = norm.momentum
            norm.running_mean = (1.0 - m) * norm.running_mean + m * mu
            norm.running_var = (1.0 - m) * norm.running_var + m * var * b / (b - 1)
        else:
            inv = 1.0 / np.sqrt(norm.running_var + norm.eps)
            xhat = (z - norm.running_mean) * inv
    else:
        mu = z.mean(axis=1, keepdims=True)
        var = z.var(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + norm.eps)
        xhat = (z - mu) * inv
    y = norm.gamma * xhat + norm.beta

    if model.activation == "relu":
        feats = np.maximum(y, 0.0)
    else:
        feats = _gelu(y)
    logits = feats @ model.classifier_weight + model.classifier_bias
    cache = ForwardCache(mode, x, xhat, inv, y, feats, model.version)
    return logits, feats, cache


def backward(model: HeadModel, cache: ForwardCache, dlogits: np.ndarray,
             ) -> dict[str, np.ndarray]:
    """Analytic gradients of a scalar loss wrt every parameter tensor.

    Train-mode batchnorm gradients flow through the batch mean and variance;
    eval-mode statistics are constants.
    """
    if cache.version != model.version:
        raise StaleCacheError("forward cache is stale; parameters changed since")
    dlogits = np.asarray(dlogits, dtype=np.float64)
    feats, y, xhat, inv = cache.feats, cache.y, cache.xhat, cache.inv_std
    norm = model.norm

    d_wc = feats.T @ dlogits
    d_bc = dlogits.sum(axis=0)
    dfeats = dlogits @ model.classifier_weight.T

    if model.activation == "relu":
        dy = dfeats * (y > 0)
    else:
        dy = dfeats * _gelu_grad(y)

    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * norm.gamma

    if norm.kind == "batchnorm":
        if cache.mode == "train":
            dz = inv * (dxhat - dxhat.mean(axis=0)
                        - xhat * (dxhat * xhat).mean(axis=0))
        else:
            dz = dxhat * inv
    else:
        dz = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))

    d_w1 = cache.x.T @ dz
    d_b1 = dz.sum(axis=0)
    return {
        "bottleneck_weight": d_w1,
        "bottleneck_bias": d_b1,
        "gamma": dgamma,
        "beta": dbeta,
        "classifier_weight": d_wc,
        "classifier_bias": d_bc,
    }


def cross_entropy(logits: np.ndarray, targets: np.ndarray,
                  ) -> tuple[float, np.ndarray]:
    """Mean soft-target cross entropy and its logit gradient."""
    targets = np.asarray(targets, dtype=np.float64)
    b = logits.shape[0]
    logp = log_softmax(logits)
    value = float(-(targets * logp).sum() / b)
    dlogits = (softmax(logits) - targets) / b
    return value, dlogits


def smoothed_targets(labels: np.ndarray, num_classes: int, smoothing: float) -> np.ndarray:
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("label smoothing must lie in [0, 1)")
    hot = one_hot(labels, num_classes)
    return hot * (1.0 - smoothing) + smoothing / num_classes


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-3
    label_smoothing: float = 0.1
    lr_schedule: str = "inverse-decay"
    grad_clip: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.lr_schedule not in ("constant", "inverse-decay"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive when set")


def lr_at(cfg: TrainConfig, step: int, total_steps: int) -> float:
    """Base rate under the shared (1 + 10 t)^(-0.75) inverse-decay convention."""
    if cfg.lr_schedule == "constant":
        return cfg.learning_rate
    t = step / max(1, total_steps)
    return cfg.learning_rate * (1.0 + 10.0 * t) ** -0.75


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return min(total, max_norm)


class SgdState:
    """Per-tensor momentum buffers."""

    def __init__(self, params: dict[str, np.ndarray]):
        self.buf = {k: np.zeros_like(v) for k, v in params.items()}


def sgd_step(model: HeadModel, grads: dict[str, np.ndarray], state: SgdState,
             lr: float, momentum: float, weight_decay: float,
             lr_scale: dict[str, float] | None = None) -> None:
    params = model.params()
    for name, g in grads.items():
        p = params[name]
        buf = state.buf[name]
        buf *= momentum
        buf += g + weight_decay * p
        p -= lr * (lr_scale.get(name, 1.0) if lr_scale else 1.0) * buf
    model.bump_version()


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Seeded shuffle, contiguous batches, trailing partial batch dropped."""
    order = rng.permutation(n)
    steps = n // batch_size
    for s in range(steps):
        yield order[s * batch_size:(s + 1) * batch_size]


def train_supervised(model: HeadModel, data: DomainDataset, scope: str,
                     cfg: TrainConfig, step_hook=None) -> HeadModel:
    """Label-smoothed cross-entropy training with SGD momentum.

    scope="classifier_only" runs eval-mode forwards, so the bottleneck, the
    norm parameters, and the batchnorm running statistics stay untouched.
    scope="full" trains everything with the bottleneck at a tenth of the rate.
    """
    if data.labels is None:
        raise ValueError("supervised training needs labels")
    if scope not in ("classifier_only", "full"):
        raise ValueError(f"unknown scope {scope!r}")
    if data.d != model.in_dim or data.num_classes != model.num_classes:
        raise ValueError("model and dataset shapes disagree")
    model = model.copy()
    n = data.n
    bs = min(cfg.batch_size, n)
    if scope == "full" and model.norm.kind == "batchnorm" and bs < 2:
        raise ValueError("batch_size < 2 is invalid with a batchnorm head")

    names = CLASSIFIER_PARAMS if scope == "classifier_only" else PARAM_NAMES
    lr_scale = None
    if scope == "full":
        # bottleneck-side tensors move slower than the freshly seeded classifier
        lr_scale = {k: 0.1 for k in BOTTLENECK_PARAMS}
    state = SgdState({k: v for k, v in model.params().items() if k in names})
    targets = smoothed_targets(data.labels, data.num_classes, cfg.label_smoothing)
    rng = derive_rng(cfg.seed, "train-shuffle")
    mode = "train" if scope == "full" else "eval"
    steps_per_epoch = max(1, n // bs)
    total_steps = cfg.epochs * steps_per_epoch

    step = 0
    for _ in range(cfg.epochs):
        for rows in _epoch_batches(n, bs, rng):
            logits, _, cache = forward(model, data.features[rows], mode)
            loss, dlogits = cross_entropy(logits, targets[rows])
            grads = backward(model, cache, dlogits)
            grads = {k: grads[k] for k in names}
            if cfg.grad_clip is not None:
                clip_global_norm(grads, cfg.grad_clip)
            if step_hook is not None:
                step_hook(step, loss, grads)
            sgd_step(model, grads, state, lr_at(cfg, step, total_steps),
                     cfg.momentum, cfg.weight_decay, lr_scale)
            step += 1
    return model


def two_phase_finetune(model: HeadModel, data: DomainDataset, cfg: TrainConfig,
                       step_hook=None) -> HeadModel:
    """Classifier-only warmup, then full fine-tuning under gradient clipping."""
    if cfg.grad_clip is None:
        raise ValueError("two-phase fine-tuning requires grad_clip")
    warm = train_supervised(model, data, "classifier_only", cfg, step_hook=step_hook)
    return train_supervised(warm, data, "full", cfg, step_hook=step_hook)


def adabn(model: HeadModel, target_features: np.ndarray) -> HeadModel:
    """Swap batchnorm running statistics for the target set's pre-norm moments."""
    if model.norm.kind != "batchnorm":
        raise ValueError("statistic transfer needs a batchnorm head")
    x = np.asarray(target_features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.in_dim:
        raise ValueError("target features have the wrong width")
    if x.shape[0] < 2:
        raise ValueError("need at least 2 target samples")
    z = x @ model.bottleneck_weight + model.bottleneck_bias
    out = model.copy()
    out.norm.running_mean = z.mean(axis=0)
    out.norm.running_var = z.var(axis=0, ddof=1)
    out.bump_version()
    return out


def evaluate(model: HeadModel, features: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 accuracy in percent, eval-mode forward."""
    logits, _, _ = forward(model, features, "eval")
    pred = logits.argmax(axis=1)
    return float((pred == np.asarray(labels)).mean() * 100.0)


def save_head(model: HeadModel, path: str) -> None:
    norm = model.norm
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIIIBB", CKPT_MAGIC, model.in_dim, model.hidden_dim,
                             model.num_classes, NORM_TAGS[norm.kind],
                             ACT_TAGS[model.activation]))
        fh.write(struct.pack("<dd", norm.momentum, norm.eps))
        tensors = [model.bottleneck_weight, model.bottleneck_bias, norm.gamma, norm.beta]
        if norm.kind == "batchnorm":
            tensors += [norm.running_mean, norm.running_var]
        tensors += [model.classifier_weight, model.classifier_bias]
        for t in tensors:
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_head(path: str) -> HeadModel:
    with open(path, "rb") as fh:
        head = fh.read(18)
        if len(head) < 18:
            raise ValueError(f"{path}: truncated header")
        magic, d, h, c, norm_tag, act_tag = struct.unpack("<4sIIIBB", head)
        if magic != CKPT_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        momentum, eps = struct.unpack("<dd", fh.read(16))
        kinds = {v: k for k, v in NORM_TAGS.items()}
        acts = {v: k for k, v in ACT_TAGS.items()}
        if norm_tag not in kinds or act_tag not in acts:
            raise ValueError(f"{path}: unknown norm or activation tag")
        kind = kinds[norm_tag]

        def take(shape):
            count = int(np.prod(shape))
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ValueError(f"{path}: truncated tensor payload")
            return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()

        w1 = take((d, h))
        b1 = take((h,))
        gamma = take((h,))
        beta = take((h,))
        rm = take((h,)) if kind == "batchnorm" else None
        rv = take((h,)) if kind == "batchnorm" else None
        wc = take((h, c))
        bc = take((c,))
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after parameters")
    norm = NormLayer(kind, gamma, beta, rm, rv, momentum, eps)
    return HeadModel(w1, b1, norm, acts[act_tag], wc, bc)

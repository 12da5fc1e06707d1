"""Minimal feed-forward network engine on numpy.

Fixed ingredients: affine layers, exact (erf-based) GELU, inverted dropout,
softmax head with hard or neighbor-smoothed cross-entropy, hand-written
backprop, Adam with decoupled weight decay and global-norm gradient clipping,
early stopping on validation NLL. Everything is float64 and deterministic
given a seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.special import erf

LOG_FLOOR = 1e-12
DEFAULT_HIDDEN_WIDTHS = (64, 128, 256, 128, 64)

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class TrainingDiverged(RuntimeError):
    """Raised when validation NLL becomes non-finite; carries the history so far."""

    def __init__(self, message: str, history: list):
        super().__init__(message)
        self.history = history


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    grad_clip_norm: float = 5.0
    dropout_p: float = 0.2
    batch_size: int = 64
    max_epochs: int = 500
    patience: int = 20
    seed: int = 0
    label_smoothing_eps: float = 0.0
    improvement_tol: float = 1e-5

    def __post_init__(self):
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not 0.0 <= self.label_smoothing_eps < 0.5:
            raise ValueError(
                f"label_smoothing_eps must be in [0, 0.5), got {self.label_smoothing_eps}"
            )


@dataclass
class MlpParams:
    """Affine layer stack; weights[i] is (out, in), biases[i] is (out,)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])


@dataclass
class AdamState:
    m_w: list[np.ndarray]
    v_w: list[np.ndarray]
    m_b: list[np.ndarray]
    v_b: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: MlpParams) -> "AdamState":
        return cls(
            m_w=[np.zeros_like(w) for w in params.weights],
            v_w=[np.zeros_like(w) for w in params.weights],
            m_b=[np.zeros_like(b) for b in params.biases],
            v_b=[np.zeros_like(b) for b in params.biases],
        )


def init_params(widths, seed) -> MlpParams:
    """Glorot-uniform weights, zero biases; deterministic per seed."""
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2:
        raise ValueError(f"need at least input and output widths, got {widths}")
    if any(w <= 0 for w in widths):
        raise ValueError(f"zero or negative layer width in {widths}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def gelu(x):
    """Exact GELU: x * Phi(x) with Phi the standard normal CDF."""
    x = np.asarray(x, dtype=float)
    return x * (0.5 * (1.0 + erf(x / _SQRT2)))


def _normal_cdf(x):
    return 0.5 * (1.0 + erf(x / _SQRT2))


def _normal_pdf(x):
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def softmax(logits):
    """Numerically stable softmax along the last axis."""
    logits = np.asarray(logits, dtype=float)
    if not np.all(np.isfinite(logits)):
        raise ValueError("softmax requires finite logits")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def smoothed_targets(label: int, m: int, eps: float):
    """Target distribution with mass 1-2*eps at `label` and eps at each neighbor.

    At the edges the out-of-range neighbor's mass folds back onto the label.
    """
    if m < 2:
        raise ValueError(f"need at least 2 classes for smoothing, got m={m}")
    if not 0.0 <= eps < 0.5:
        raise ValueError(f"eps must be in [0, 0.5), got {eps}")
    if not 0 <= label < m:
        raise ValueError(f"label {label} out of range for m={m}")
    q = np.zeros(m)
    q[label] = 1.0 - 2.0 * eps
    for j in (label - 1, label + 1):
        if 0 <= j < m:
            q[j] += eps
        else:
            q[label] += eps
    return q


def target_matrix(labels, m: int, eps: float):
    """Stack of per-sample targets: one-hot when eps == 0, smoothed otherwise."""
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], m))
    out[np.arange(labels.shape[0]), labels] = 1.0
    if eps > 0.0:
        smooth = np.stack([smoothed_targets(j, m, eps) for j in range(m)])
        out = smooth[labels]
    return out


def cross_entropy(probs, target) -> float:
    """-sum(q * log p) with p floored at LOG_FLOOR; mean over a leading batch axis."""
    probs = np.asarray(probs, dtype=float)
    target = np.asarray(target, dtype=float)
    logp = np.log(np.maximum(probs, LOG_FLOOR))
    ce = -(target * logp).sum(axis=-1)
    return float(ce.mean())


@dataclass
class ForwardCache:
    params: MlpParams
    activations: list[np.ndarray]  # layer inputs: a_0 = x, then post-dropout hiddens
    preacts: list[np.ndarray]      # z per hidden layer
    normal_cdfs: list[np.ndarray]  # Phi(z) per hidden layer, reused in backward
    masks: list                    # dropout masks per hidden layer (None in eval)
    squeeze: bool                  # input was a single vector


def forward(params: MlpParams, x, *, train: bool = False, dropout_p: float = 0.0, rng=None):
    """Run the network; returns (logits, cache).

    Hidden layers apply affine -> GELU -> dropout (train mode only, inverted
    scaling); the final layer is affine. Eval mode is deterministic.
    """
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError(f"input must be a vector or a batch of vectors, got ndim={x.ndim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite value in network input")
    if x.shape[1] != params.weights[0].shape[1]:
        raise ValueError(
            f"input width {x.shape[1]} does not match first layer width "
            f"{params.weights[0].shape[1]}"
        )
    if train and dropout_p > 0.0 and rng is None:
        raise ValueError("train-mode dropout requires an rng")

    activations = [x]
    preacts: list[np.ndarray] = []
    cdfs: list[np.ndarray] = []
    masks: list = []
    a = x
    last = params.num_layers - 1
    for i in range(last):
        z = a @ params.weights[i].T + params.biases[i]
        phi = _normal_cdf(z)
        h = z * phi
        if train and dropout_p > 0.0:
            mask = np.where(rng.random(h.shape) >= dropout_p, 1.0 / (1.0 - dropout_p), 0.0)
            h = h * mask
        else:
            mask = None
        preacts.append(z)
        cdfs.append(phi)
        masks.append(mask)
        activations.append(h)
        a = h
    logits = a @ params.weights[last].T + params.biases[last]
    cache = ForwardCache(params, activations, preacts, cdfs, masks, squeeze)
    return (logits[0] if squeeze else logits), cache


def backward(cache: ForwardCache, target):
    """Exact gradient of softmax + cross-entropy w.r.t. all parameters.

    Softmax and CE are fused: the logit-layer gradient is (p - q), averaged
    over the batch when the cached forward was batched.
    """
    params = cache.params
    target = np.asarray(target, dtype=float)
    if cache.squeeze:
        target = target[None, :]
    logits = cache.activations[-1] @ params.weights[-1].T + params.biases[-1]
    probs = softmax(logits)
    batch = probs.shape[0]
    dlogits = (probs - target) / batch

    grads_w = [None] * params.num_layers
    grads_b = [None] * params.num_layers
    last = params.num_layers - 1
    grads_w[last] = dlogits.T @ cache.activations[last]
    grads_b[last] = dlogits.sum(axis=0)
    da = dlogits @ params.weights[last]
    for i in range(last - 1, -1, -1):
        if cache.masks[i] is not None:
            da = da * cache.masks[i]
        z = cache.preacts[i]
        phi = cache.normal_cdfs[i]
        dz = da * (phi + z * _normal_pdf(z))
        grads_w[i] = dz.T @ cache.activations[i]
        grads_b[i] = dz.sum(axis=0)
        da = dz @ params.weights[i]
    return grads_w, grads_b


def loss_and_grads(params: MlpParams, x, target, *, train=False, dropout_p=0.0, rng=None):
    logits, cache = forward(params, x, train=train, dropout_p=dropout_p, rng=rng)
    probs = softmax(logits)
    loss = cross_entropy(probs, target)
    grads_w, grads_b = backward(cache, target)
    return loss, grads_w, grads_b


def adam_step(params: MlpParams, grads, state: AdamState, config: TrainConfig):
    """One optimizer step in place: clip by global norm, decay, then Adam."""
    grads_w, grads_b = grads
    sq = 0.0
    for g in grads_w + grads_b:
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite gradient; refusing the optimizer step")
        sq += float((g * g).sum())
    norm = math.sqrt(sq)
    scale = 1.0
    if config.grad_clip_norm > 0.0 and norm > config.grad_clip_norm:
        scale = config.grad_clip_norm / norm

    lr = config.learning_rate
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    state.step += 1
    t = state.step
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    decay = 1.0 - lr * config.weight_decay
    for arrs, grads_, ms, vs in (
        (params.weights, grads_w, state.m_w, state.v_w),
        (params.biases, grads_b, state.m_b, state.v_b),
    ):
        for p, g, m, v in zip(arrs, grads_, ms, vs):
            g = g * scale
            if config.weight_decay != 0.0:
                p *= decay
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


def evaluate_nll(params: MlpParams, inputs, labels) -> float:
    """Mean -log p(label) in eval mode."""
    logits, _ = forward(params, inputs)
    probs = softmax(logits)
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.log(np.maximum(picked, LOG_FLOOR)).mean())


@dataclass
class TrainResult:
    params: MlpParams
    history: list[dict] = field(default_factory=list)  # per-epoch train/val NLL
    best_epoch: int = 0
    best_val_nll: float = math.inf


def train(
    train_inputs,
    train_labels,
    val_inputs,
    val_labels,
    num_classes: int,
    hidden_widths=DEFAULT_HIDDEN_WIDTHS,
    config: TrainConfig = None,
) -> TrainResult:
    """Mini-batch training with early stopping on validation NLL.

    Keeps the parameters of the best validation epoch; stops after `patience`
    epochs without an improvement larger than `improvement_tol`, or at
    `max_epochs`. Fully deterministic given `config.seed`.
    """
    if config is None:
        config = TrainConfig()
    train_inputs = np.asarray(train_inputs, dtype=float)
    train_labels = np.asarray(train_labels)
    val_inputs = np.asarray(val_inputs, dtype=float)
    val_labels = np.asarray(val_labels)
    if train_inputs.shape[0] == 0 or val_inputs.shape[0] == 0:
        raise ValueError("train and validation sets must be non-empty")
    if train_inputs.shape[0] != train_labels.shape[0]:
        raise ValueError("train inputs and labels are misaligned")
    if val_inputs.shape[0] != val_labels.shape[0]:
        raise ValueError("validation inputs and labels are misaligned")
    for name, labels in (("train", train_labels), ("validation", val_labels)):
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise ValueError(f"{name} labels out of range for m={num_classes}")

    widths = (train_inputs.shape[1], *hidden_widths, num_classes)
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    params = init_params(widths, seeds[0])
    state = AdamState.zeros_like(params)
    shuffle_rng = np.random.default_rng(seeds[1])
    dropout_rng = np.random.default_rng(seeds[2])

    n = train_inputs.shape[0]
    best = TrainResult(params.copy())
    history: list[dict] = []
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            targets = target_matrix(train_labels[idx], num_classes, config.label_smoothing_eps)
            logits, cache = forward(
                params,
                train_inputs[idx],
                train=True,
                dropout_p=config.dropout_p,
                rng=dropout_rng,
            )
            grads = backward(cache, targets)
            adam_step(params, grads, state, config)

        train_nll = evaluate_nll(params, train_inputs, train_labels)
        val_nll = evaluate_nll(params, val_inputs, val_labels)
        history.append({"epoch": epoch, "train_nll": train_nll, "val_nll": val_nll})
        if not math.isfinite(val_nll):
            best.history = history
            raise TrainingDiverged(f"validation NLL became {val_nll} at epoch {epoch}", history)
        if val_nll < best.best_val_nll - config.improvement_tol:
            best.best_val_nll = val_nll
            best.best_epoch = epoch
            best.params = params.copy()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    best.history = history
    return best


def save_params(path, params: MlpParams, *, config: TrainConfig = None, meta: dict = None):
    """JSON checkpoint embedding layer shapes and the training config; bit-exact."""
    doc = {
        "widths": list(params.widths),
        "config": asdict(config) if config is not None else None,
        "meta": meta or {},
        "layers": [
            {"weights": w.tolist(), "biases": b.tolist()}
            for w, b in zip(params.weights, params.biases)
        ],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def load_params(path):
    """Load a checkpoint; returns (params, config, meta)."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    weights = [np.array(layer["weights"], dtype=float) for layer in doc["layers"]]
    biases = [np.array(layer["biases"], dtype=float) for layer in doc["layers"]]
    params = MlpParams(weights, biases)
    if list(params.widths) != doc["widths"]:
        raise ValueError(f"checkpoint widths {doc['widths']} do not match layer shapes")
    config = TrainConfig(**doc["config"]) if doc.get("config") else None
    return params, config, doc.get("meta", {})

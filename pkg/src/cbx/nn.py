"""Minimal dense-network kernel: layers, activations, losses, backprop, SGD.

Everything is float64 and deterministic. Matrices are plain 2-D numpy
arrays (row-major); a batch of n inputs with d features is an (n, d) array.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("identity", "relu", "sigmoid", "softmax")

# Probability clamp used inside both losses to keep log() finite.
LOSS_EPS = 1e-12

CHECKPOINT_MAGIC = "CBX-CKPT v1"


@dataclass
class DenseLayer:
    """Fully connected layer: out = act(x @ weights.T + bias).

    weights has shape (out_dim, in_dim), bias has shape (out_dim,).
    The softmax activation is only meant for a final decision head; its
    backward pass is fused with the categorical cross-entropy (see
    `backward`).
    """

    weights: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError(f"weights must be 2-D, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError(
                f"bias length {self.bias.shape} does not match out_dim {self.weights.shape[0]}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weights.copy(), self.bias.copy(), self.activation)


@dataclass
class ParamGradients:
    """Per-layer loss gradients, shape-matched to the owning network."""

    weight_grads: list[np.ndarray]
    bias_grads: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.weight_grads)


def init_layers(dims, activations, seed) -> list[DenseLayer]:
    """Build a layer stack with Glorot-uniform weights and zero biases.

    dims is the dimension chain (d0, d1, ..., dL); activations has one
    entry per layer, so len(dims) == len(activations) + 1. Deterministic
    for a given seed.
    """
    dims = list(dims)
    activations = list(activations)
    if not activations or len(dims) != len(activations) + 1:
        raise ValueError(
            f"need len(dims) == len(activations) + 1 >= 2, got {len(dims)} dims "
            f"and {len(activations)} activations"
        )
    if any(int(d) < 1 for d in dims):
        raise ValueError(f"all dims must be >= 1, got {dims}")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out, act in zip(dims[:-1], dims[1:], activations):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        layers.append(DenseLayer(w, np.zeros(fan_out), act))
    return layers


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def sigmoid_elementwise(z: np.ndarray) -> np.ndarray:
    """Numerically stable elementwise logistic function.

    Outputs are clamped a hair inside (0, 1); without it, float64 rounds
    sigmoid(z) to exactly 1.0 once z exceeds ~37.
    """
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return np.clip(out, 1e-15, 1.0 - 1e-15)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilized by per-row max subtraction."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(logits).all():
        raise ValueError("softmax_rows requires finite logits")
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _apply_activation(name: str, z: np.ndarray) -> np.ndarray:
    if name == "identity":
        return z
    if name == "relu":
        return relu(z)
    if name == "sigmoid":
        return sigmoid_elementwise(z)
    if name == "softmax":
        return softmax_rows(z)
    raise ValueError(f"unknown activation {name!r}")


def forward(layers, x: np.ndarray) -> list[np.ndarray]:
    """Run the stack on a batch, returning one activation matrix per layer.

    The last entry is the network output; the full list is the cache the
    backward pass consumes.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"input must be 2-D (batch, features), got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("forward requires finite inputs")
    acts = []
    a = x
    for i, layer in enumerate(layers):
        if a.shape[1] != layer.in_dim:
            raise ValueError(
                f"layer {i}: expected {layer.in_dim} input columns, got {a.shape[1]}"
            )
        z = a @ layer.weights.T + layer.bias
        a = _apply_activation(layer.activation, z)
        if not np.isfinite(a).all():
            raise FloatingPointError(f"layer {i}: non-finite activation values")
        acts.append(a)
    return acts


def _activation_grad(layer: DenseLayer, act: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the layer's pre-activation z, given d loss / d act."""
    if layer.activation == "identity":
        return upstream
    if layer.activation == "relu":
        return upstream * (act > 0.0)
    if layer.activation == "sigmoid":
        return upstream * act * (1.0 - act)
    if layer.activation == "softmax":
        # Fused softmax + cross-entropy convention: the caller already
        # supplies the gradient w.r.t. the logits (see softmax_ce_grad).
        return upstream
    raise ValueError(f"unknown activation {layer.activation!r}")


def backward(layers, x: np.ndarray, activations, grad_output: np.ndarray):
    """Exact backprop through the stack.

    `activations` must come from a matching `forward(layers, x)` call.
    Returns (ParamGradients, gradient w.r.t. x). For a softmax output
    layer, grad_output must be the loss gradient w.r.t. the logits.
    """
    x = np.asarray(x, dtype=np.float64)
    if len(activations) != len(layers):
        raise ValueError(
            f"activation cache has {len(activations)} entries for {len(layers)} layers"
        )
    for i, (layer, act) in enumerate(zip(layers, activations)):
        if act.shape != (x.shape[0], layer.out_dim):
            raise ValueError(f"layer {i}: stale or mismatched activation cache")
    if grad_output.shape != activations[-1].shape:
        raise ValueError(
            f"grad_output shape {grad_output.shape} does not match "
            f"output shape {activations[-1].shape}"
        )

    weight_grads = [None] * len(layers)
    bias_grads = [None] * len(layers)
    upstream = grad_output
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        dz = _activation_grad(layer, activations[i], upstream)
        a_prev = activations[i - 1] if i > 0 else x
        weight_grads[i] = dz.T @ a_prev
        bias_grads[i] = dz.sum(axis=0)
        upstream = dz @ layer.weights
    return ParamGradients(weight_grads, bias_grads), upstream


def sgd_step(layers, grads: ParamGradients, learning_rate: float, freeze=None):
    """In-place p <- p - lr * grad for every unfrozen layer.

    freeze is an optional per-layer flag list; frozen layers are left
    bit-identical.
    """
    if learning_rate <= 0:
        raise ValueError(f"learning_rate must be > 0, got {learning_rate}")
    if len(grads) != len(layers):
        raise ValueError("gradient count does not match layer count")
    if freeze is None:
        freeze = [False] * len(layers)
    if len(freeze) != len(layers):
        raise ValueError("freeze flag count does not match layer count")
    for layer, dw, db, frozen in zip(layers, grads.weight_grads, grads.bias_grads, freeze):
        if frozen:
            continue
        if dw.shape != layer.weights.shape or db.shape != layer.bias.shape:
            raise ValueError("gradient shapes do not match layer shapes")
        layer.weights -= learning_rate * dw
        layer.bias -= learning_rate * db
    return layers


def _as_mask(mask, n: int) -> np.ndarray:
    if mask is None:
        return np.ones(n, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n,):
        raise ValueError(f"mask must have shape ({n},), got {mask.shape}")
    return mask


def multilabel_bce(pred: np.ndarray, target: np.ndarray, mask=None) -> float:
    """Multi-label binary cross-entropy.

    Mean over unmasked rows of the per-row sum over labels of
    -[y log p + (1-y) log(1-p)], with p clamped to [eps, 1-eps].
    Returns 0.0 when every row is masked off.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    m = _as_mask(mask, pred.shape[0])
    if not m.any():
        return 0.0
    p = np.clip(pred[m], LOSS_EPS, 1.0 - LOSS_EPS)
    y = target[m]
    row_loss = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).sum(axis=1)
    return float(row_loss.mean())


def multilabel_bce_grad(pred: np.ndarray, target: np.ndarray, mask=None) -> np.ndarray:
    """Gradient of multilabel_bce w.r.t. pred; masked rows get zeros."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    m = _as_mask(mask, pred.shape[0])
    grad = np.zeros_like(pred)
    n = int(m.sum())
    if n == 0:
        return grad
    p = np.clip(pred[m], LOSS_EPS, 1.0 - LOSS_EPS)
    grad[m] = (p - target[m]) / (p * (1.0 - p)) / n
    return grad


def _check_one_hot(target: np.ndarray):
    bad = ~np.isin(target, (0.0, 1.0)).all(axis=1) | (target.sum(axis=1) != 1.0)
    if bad.any():
        raise ValueError(f"target row {int(np.flatnonzero(bad)[0])} is not one-hot")


def categorical_ce(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean over rows of -log p(true class), with probability clamping."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    _check_one_hot(target)
    p_true = np.clip((pred * target).sum(axis=1), LOSS_EPS, 1.0)
    return float(-np.log(p_true).mean())


def softmax_ce_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Gradient of categorical_ce w.r.t. the softmax logits (fused form).

    For softmax followed by cross-entropy the combined gradient reduces to
    (pred - target) / n, which is what `backward` expects at a softmax
    output layer.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    _check_one_hot(target)
    return (pred - target) / pred.shape[0]


def save_checkpoint(layers, path):
    """Write the stack as a text checkpoint that round-trips bit-exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{CHECKPOINT_MAGIC}\n")
        write_layers(layers, fh)


def write_layers(layers, fh):
    fh.write(f"{len(layers)}\n")
    for layer in layers:
        fh.write(f"dims {layer.out_dim} {layer.in_dim}\n")
        fh.write(f"act {layer.activation}\n")
        for row in layer.weights:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")
        fh.write(" ".join(f"{v:.17g}" for v in layer.bias) + "\n")


def load_checkpoint(path) -> list[DenseLayer]:
    with open(path, "r", encoding="utf-8") as fh:
        magic = fh.readline().strip()
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file (bad header {magic!r})")
        return read_layers(fh)


def read_layers(fh) -> list[DenseLayer]:
    n_layers = int(fh.readline())
    layers = []
    for _ in range(n_layers):
        tag, out_s, in_s = fh.readline().split()
        if tag != "dims":
            raise ValueError(f"expected 'dims' line, got {tag!r}")
        out_dim, in_dim = int(out_s), int(in_s)
        act_tag, act = fh.readline().split()
        if act_tag != "act":
            raise ValueError(f"expected 'act' line, got {act_tag!r}")
        rows = [np.fromstring(fh.readline(), sep=" ") for _ in range(out_dim)]
        weights = np.vstack(rows)
        bias = np.fromstring(fh.readline(), sep=" ")
        if weights.shape != (out_dim, in_dim) or bias.shape != (out_dim,):
            raise ValueError("checkpoint layer block has inconsistent shapes")
        layers.append(DenseLayer(weights, bias, act))
    return layers

"""Dense feedforward classifier with exact input gradients.

Everything is plain numpy. Inputs may be a single vector ``(d,)`` or a batch
``(n, d)``; outputs follow the same convention.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .geometry import substream

__all__ = [
    "ACTIVATIONS",
    "Layer",
    "ModelWeights",
    "Dataset",
    "StructureError",
    "TrainingError",
    "forward",
    "predict",
    "accuracy",
    "input_gradient",
    "input_gradients",
    "init_weights",
    "train",
    "lipschitz_logit_bound",
    "with_activation",
]

log = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "softplus", "identity")

# max row norm of the softmax Jacobian: p_j * sqrt((1-p_j)^2 + sum_{k!=j} p_k^2) <= sqrt(2)/4
SOFTMAX_ROW_BOUND = math.sqrt(2.0) / 4.0


class StructureError(ValueError):
    """Shapes or layer chaining are inconsistent."""


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise StructureError(
                f"layer weight {self.weight.shape} and bias {self.bias.shape} do not match"
            )
        if self.activation not in ACTIVATIONS:
            raise StructureError(f"unknown activation {self.activation!r}")
        if not (np.isfinite(self.weight).all() and np.isfinite(self.bias).all()):
            raise StructureError("layer parameters must be finite")


@dataclass
class ModelWeights:
    layers: list[Layer]
    softplus_beta: float = 1.0

    def __post_init__(self):
        if not self.layers:
            raise StructureError("a model needs at least one layer")
        for k in range(1, len(self.layers)):
            prev, cur = self.layers[k - 1], self.layers[k]
            if cur.weight.shape[1] != prev.weight.shape[0]:
                raise StructureError(
                    f"layer {k} expects {cur.weight.shape[1]} inputs but layer {k - 1} "
                    f"produces {prev.weight.shape[0]}"
                )
        if not self.softplus_beta > 0.0:
            raise StructureError("softplus_beta must be positive")

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def class_count(self) -> int:
        return self.layers[-1].weight.shape[0]

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim] + [layer.weight.shape[0] for layer in self.layers]


@dataclass
class Dataset:
    X: np.ndarray  # (n, d), features in [0, 1]
    y: np.ndarray  # (n,) int labels in [0, c)
    c: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2:
            self.X = self.X.reshape(len(self.X), -1)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.shape[0] != self.y.shape[0]:
            raise StructureError("sample and label counts differ")
        if self.X.size and (self.X.min() < 0.0 or self.X.max() > 1.0):
            raise StructureError("features must lie in [0, 1]")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.c):
            raise StructureError(f"labels must lie in [0, {self.c})")

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def __len__(self) -> int:
        return self.X.shape[0]

    def head(self, n: int) -> "Dataset":
        return Dataset(self.X[:n], self.y[:n], self.c, dict(self.provenance))


def _act(name: str, z: np.ndarray, beta: float) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "softplus":
        return np.logaddexp(0.0, beta * z) / beta
    return z


def _act_grad(name: str, z: np.ndarray, beta: float) -> np.ndarray:
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "softplus":
        return expit(beta * z)
    return np.ones_like(z)


def _act_and_grad(name: str, z: np.ndarray, beta: float, want_value: bool):
    """(activation or None, derivative), sharing one exp for Softplus."""
    if name == "softplus":
        t = np.exp(-beta * np.abs(z))
        s_neg = t / (1.0 + t)  # sigmoid(-beta |z|)
        grad = 0.5 + np.copysign(0.5 - s_neg, z)
        if not want_value:
            return None, grad
        return np.maximum(z, 0.0) + np.log1p(t) / beta, grad
    if name == "relu":
        mask = z > 0.0
        return (np.where(mask, z, 0.0) if want_value else None), mask.astype(np.float64)
    return (z if want_value else None), None

def _as_batch(w: ModelWeights, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != w.input_dim:
        raise StructureError(f"input of shape {x.shape} does not match model input dim {w.input_dim}")
    return X, single


def _forward_cache(w: ModelWeights, X: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    pre = []
    a = X
    for layer in w.layers:
        z = a @ layer.weight.T + layer.bias
        pre.append(z)
        a = _act(layer.activation, z, w.softplus_beta)
    return pre, a


def forward(w: ModelWeights, x) -> tuple[np.ndarray, np.ndarray]:
    """Return (logits, softmax probabilities)."""
    X, single = _as_batch(w, x)
    _, logits = _forward_cache(w, X)
    probs = softmax(logits, axis=1)
    if single:
        return logits[0], probs[0]
    return logits, probs


def predict(w: ModelWeights, x) -> np.ndarray | int:
    logits, _ = forward(w, x)
    if logits.ndim == 1:
        return int(np.argmax(logits))
    return np.argmax(logits, axis=1)


def accuracy(w: ModelWeights, data: Dataset) -> float:
    if len(data) == 0:
        return math.nan
    return float(np.mean(predict(w, data.X) == data.y))


def input_gradients(w: ModelWeights, X: np.ndarray, classes, wrt: str = "logit",
                    group: int = 1) -> np.ndarray:
    """Batched reverse-mode gradient of logit/prob ``classes`` w.r.t. the rows of X.

    With ``group > 1`` the gradients of each run of ``group`` consecutive rows
    are averaged (before the final linear map, which is cheaper), giving
    shape (n // group, d).
    """
    X, _ = _as_batch(w, X)
    n = X.shape[0]
    if group < 1 or n % group:
        raise ValueError(f"row count {n} is not a multiple of group={group}")
    classes = np.broadcast_to(np.asarray(classes, dtype=np.int64), (n,))
    c = w.class_count
    if classes.size and (classes.min() < 0 or classes.max() >= c):
        raise StructureError(f"class index out of range [0, {c})")
    need_logits = wrt == "prob"
    if wrt not in ("logit", "prob"):
        raise ValueError(f"wrt must be 'logit' or 'prob', got {wrt!r}")
    derivs = []
    a = X
    last = len(w.layers) - 1
    # a linear output layer contributes only its weight when logits are not needed
    skip_last = not need_logits and w.layers[last].activation == "identity"
    for i, layer in enumerate(w.layers):
        if i == last and skip_last:
            derivs.append(None)
            break
        z = a @ layer.weight.T + layer.bias
        want = not (skip_last and i == last - 1)
        a, g = _act_and_grad(layer.activation, z, w.softplus_beta, want)
        derivs.append(g)
    rows = np.arange(n)
    up = np.zeros((n, c))
    up[rows, classes] = 1.0
    if need_logits:
        p = softmax(a, axis=1)
        pc = p[rows, classes][:, None]
        up = pc * (up - p)
    for k in range(len(w.layers) - 1, -1, -1):
        if derivs[k] is not None:
            up = up * derivs[k]
        if k == 0 and group > 1:
            up = up.reshape(n // group, group, -1).mean(axis=1)
        up = up @ w.layers[k].weight
    return up


def input_gradient(w: ModelWeights, x, class_index: int, wrt: str = "logit") -> np.ndarray:
    """Exact gradient of one output (logit or softmax probability) w.r.t. the input."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise StructureError("input_gradient takes a single input vector; use input_gradients for batches")
    return input_gradients(w, x[None, :], class_index, wrt)[0]


def init_weights(sizes: Sequence[int], activation: str = "relu", seed: int = 0,
                 softplus_beta: float = 1.0) -> ModelWeights:
    """Glorot-uniform weights, zero biases; identity on the output layer."""
    if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
        raise StructureError(f"architecture needs at least input and output sizes, got {list(sizes)}")
    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        rng = substream(seed, 0, k)
        weight = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        act = "identity" if k == len(sizes) - 2 else activation
        layers.append(Layer(weight, np.zeros(fan_out), act))
    return ModelWeights(layers, softplus_beta)


def train(data: Dataset, sizes: Sequence[int], activation: str = "relu", lr: float = 0.1,
          epochs: int = 50, batch_size: int = 32, seed: int = 0,
          softplus_beta: float = 1.0) -> ModelWeights:
    """Mini-batch SGD on softmax cross-entropy. Deterministic for a given seed."""
    sizes = list(sizes)
    if sizes[0] != data.d or sizes[-1] != data.c:
        raise StructureError(
            f"architecture {sizes} does not match data (d={data.d}, classes={data.c})"
        )
    w = init_weights(sizes, activation, seed, softplus_beta)
    n = len(data)
    if epochs <= 0 or n == 0:
        return w
    beta = w.softplus_beta
    with np.errstate(over="ignore", invalid="ignore"):
        _sgd(w, data, lr, epochs, batch_size, seed, beta)
    log.info("trained %s for %d epochs, train accuracy %.4f", sizes, epochs, accuracy(w, data))
    return w


def _sgd(w: ModelWeights, data: Dataset, lr: float, epochs: int, batch_size: int, seed: int,
         beta: float) -> None:
    n = len(data)
    for epoch in range(epochs):
        order = substream(seed, 1, epoch).permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            X, y = data.X[idx], data.y[idx]
            pre, logits = _forward_cache(w, X)
            logp = log_softmax(logits, axis=1)
            total += -logp[np.arange(len(idx)), y].sum()
            up = np.exp(logp)
            up[np.arange(len(idx)), y] -= 1.0
            up /= len(idx)
            acts = [X] + [_act(layer.activation, z, beta) for layer, z in zip(w.layers[:-1], pre[:-1])]
            for k in range(len(w.layers) - 1, -1, -1):
                layer = w.layers[k]
                if layer.activation != "identity":
                    up = up * _act_grad(layer.activation, pre[k], beta)
                gW = up.T @ acts[k]
                gb = up.sum(axis=0)
                up = up @ layer.weight
                layer.weight -= lr * gW
                layer.bias -= lr * gb
        mean_loss = total / n
        if not math.isfinite(mean_loss) or not all(
            np.isfinite(layer.weight).all() for layer in w.layers
        ):
            raise TrainingError("training diverged: non-finite loss", epoch)


def lipschitz_logit_bound(w: ModelWeights, wrt: str = "logit") -> float:
    """Global upper bound on ||grad of any output||_2: product of layer spectral norms.

    Valid because relu, softplus (any beta) and identity are 1-Lipschitz.
    For ``wrt='prob'`` the softmax Jacobian row bound sqrt(2)/4 is applied.
    """
    bound = 1.0
    for layer in w.layers:
        bound *= float(np.linalg.norm(layer.weight, 2))
    bound *= 1.0 + 1e-6
    if wrt == "prob":
        bound *= SOFTMAX_ROW_BOUND
    return bound


def with_activation(w: ModelWeights, src: str = "relu", dst: str = "softplus",
                    softplus_beta: float | None = None) -> ModelWeights:
    """Copy of w with every ``src`` activation replaced by ``dst``."""
    layers = [
        Layer(layer.weight, layer.bias, dst if layer.activation == src else layer.activation)
        for layer in w.layers
    ]
    beta = w.softplus_beta if softplus_beta is None else softplus_beta
    return replace(w, layers=layers, softplus_beta=beta)

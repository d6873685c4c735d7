"""Linear classification head trained on frozen features.

Parameters are float32; loss and gradient reductions run in float64.  The
optimizer is mini-batch SGD with (heavy-ball) momentum::

    v <- momentum * v + grad
    p <- p - lr * v
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import stream
from .tensorio import ContainerError, read_container, write_container

HEAD_MAGIC = b"HEAD"
GRAD_CHECK_FLOOR = 1e-2


@dataclass(frozen=True, eq=False)
class ClassifierHead:
    weights: np.ndarray  # (num_classes, dim) float32
    bias: np.ndarray  # (num_classes,) float32

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float32)
        b = np.array(self.bias, dtype=np.float32)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ValueError(f"inconsistent head shapes {w.shape}, {b.shape}")
        if w.shape[0] < 2:
            raise ValueError("a head needs at least two classes")
        w.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @classmethod
    def zeros(cls, num_classes: int, dim: int) -> "ClassifierHead":
        return cls(np.zeros((num_classes, dim), np.float32), np.zeros(num_classes, np.float32))

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def __eq__(self, other):
        if not isinstance(other, ClassifierHead):
            return NotImplemented
        return (self.weights.tobytes() == other.weights.tobytes()
                and self.bias.tobytes() == other.bias.tobytes()
                and self.weights.shape == other.weights.shape)

    def logits(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features)
        if features.shape[-1] != self.dim:
            raise ValueError(f"feature dim {features.shape[-1]} != head dim {self.dim}")
        return features.astype(np.float64) @ self.weights.T.astype(np.float64) + self.bias


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 256
    learning_rate: float = 0.01
    momentum: float = 0.9
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")


def _softmax64(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loss_and_grad(weights, bias, features, labels, with_grad: bool = True):
    """Mean cross-entropy and its gradient, all in float64."""
    x = np.asarray(features, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    b = np.asarray(bias, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    n = x.shape[0]
    logits = x @ w.T + b
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(log_norm - z[np.arange(n), labels]))
    if not with_grad:
        return loss
    delta = np.exp(z - log_norm[:, None])
    delta[np.arange(n), labels] -= 1.0
    delta /= n
    return loss, delta.T @ x, delta.sum(axis=0)


def mean_loss(head: ClassifierHead, features, labels) -> float:
    return loss_and_grad(head.weights, head.bias, features, labels, with_grad=False)


def _check_dataset(features, labels, k=None):
    features = np.asarray(features, dtype=np.float32)
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError("empty dataset")
    if labels.shape != (features.shape[0],):
        raise ValueError(f"{features.shape[0]} features but {labels.shape} labels")
    if k is not None and labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    return features, labels.astype(np.intp)


def train_head(features, labels, k: int, cfg: TrainConfig = TrainConfig(),
               history: list | None = None) -> ClassifierHead:
    """Train a zero-initialized head; appends per-epoch mean loss to ``history``.

    Epoch ``e`` visits samples in the order ``permutation(n)`` drawn from
    ``stream(shuffle_seed, "head-shuffle", e)``; the final short batch is used
    as is.
    """
    if k < 2:
        raise ValueError("need at least two classes")
    x, y = _check_dataset(features, labels, k)
    n, dim = x.shape
    w = np.zeros((k, dim), np.float32)
    b = np.zeros(k, np.float32)
    vw = np.zeros_like(w)
    vb = np.zeros_like(b)
    lr = np.float32(cfg.learning_rate)
    mu = np.float32(cfg.momentum)
    for epoch in range(cfg.epochs):
        order = stream(cfg.shuffle_seed, "head-shuffle", epoch).permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, gw, gb = loss_and_grad(w, b, x[idx], y[idx])
            vw = mu * vw + gw.astype(np.float32)
            vb = mu * vb + gb.astype(np.float32)
            w = w - lr * vw
            b = b - lr * vb
        if history is not None:
            history.append(loss_and_grad(w, b, x, y, with_grad=False))
    return ClassifierHead(w, b)


def predict(head: ClassifierHead, f) -> tuple[int, np.ndarray]:
    """Arg-max class (lowest index on ties) and softmax probabilities."""
    logits = head.logits(np.asarray(f).reshape(-1))
    return int(np.argmax(logits)), _softmax64(logits)


def predict_batch(head: ClassifierHead, features) -> np.ndarray:
    return np.argmax(head.logits(np.asarray(features).reshape(-1, head.dim)), axis=1)


def evaluate(head: ClassifierHead, features, labels) -> float:
    x, y = _check_dataset(features, labels)
    return float(np.mean(predict_batch(head, x) == y))


def grad_check(head: ClassifierHead, batch, step: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``batch`` is ``(features, labels)``.  Each entry's error is
    ``|a - n| / max(|a|, |n|, 1e-2)``.  Central differences at ``step=1e-3``
    carry roughly 1e-6 truncation error, so entries below 1e-2 are compared on
    that scale instead of their own.
    """
    x, y = _check_dataset(*batch, head.num_classes)
    w = head.weights.astype(np.float64)
    b = head.bias.astype(np.float64)
    _, gw, gb = loss_and_grad(w, b, x, y)
    analytic = np.concatenate([gw.ravel(), gb])
    params = np.concatenate([w.ravel(), b])
    numeric = np.empty_like(params)
    split = w.size

    def loss_at(p):
        return loss_and_grad(p[:split].reshape(w.shape), p[split:], x, y, with_grad=False)

    for i in range(params.size):
        orig = params[i]
        params[i] = orig + step
        up = loss_at(params)
        params[i] = orig - step
        down = loss_at(params)
        params[i] = orig
        numeric[i] = (up - down) / (2 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), GRAD_CHECK_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom))


def save_head(head: ClassifierHead) -> bytes:
    return write_container(HEAD_MAGIC, [("weight", head.weights), ("bias", head.bias)])


def load_head(data: bytes) -> ClassifierHead:
    tensors = dict(read_container(HEAD_MAGIC, data))
    if set(tensors) != {"weight", "bias"}:
        raise ContainerError(f"head file needs 'weight' and 'bias', found {sorted(tensors)}")
    return ClassifierHead(tensors["weight"], tensors["bias"])

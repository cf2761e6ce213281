"""Dense ReLU networks trained with minibatch SGD + momentum.

Parameters live in float64 arrays but are kept on the float32 grid (at
initialisation and after training) so the ``TFM1`` file round-trips exactly.

Model file::

    b"TFM1" | u16 version=1 | u8 head (0 linear, 1 softmax2) | u16 n_sizes
    | n_sizes x u32 layer sizes | all weight matrices (out x in, row-major)
    | all bias vectors            -- float32 little-endian
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"TFM1"
VERSION = 1
HEAD_LINEAR = 0
HEAD_SOFTMAX2 = 1
_HEADS = {"linear": HEAD_LINEAR, "softmax2": HEAD_SOFTMAX2}
_HEAD_NAMES = {v: k for k, v in _HEADS.items()}

RANGE_SIZES = (280, 40, 10, 10, 1)
BOUNDARY_SIZES = (240, 40, 20, 2)


class ModelFormatError(ValueError):
    pass


class ModelVersionError(ModelFormatError):
    pass


class CorruptModelError(ModelFormatError):
    pass


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(eq=False)
class MlpModel:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    head: str = "linear"

    def __post_init__(self):
        if self.head not in _HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix")
        self.weights = [np.array(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.array(b, dtype=np.float64) for b in self.biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i} input size does not chain")
        if self.head == "softmax2" and self.weights[-1].shape[0] != 2:
            raise ValueError("softmax2 head needs 2 outputs")

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def input_size(self) -> int:
        return self.weights[0].shape[1]

    def copy(self) -> MlpModel:
        return MlpModel([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.head)

    def params(self) -> list[np.ndarray]:
        return self.weights + self.biases


def _to_f32_grid(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


def init_model(sizes, head: str = "linear", seed=0) -> MlpModel:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(_to_f32_grid(rng.uniform(-lim, lim, size=(fan_out, fan_in))))
        biases.append(np.zeros(fan_out))
    return MlpModel(weights, biases, head)


def range_net(seed=0) -> MlpModel:
    return init_model(RANGE_SIZES, "linear", seed)


def boundary_net(seed=0) -> MlpModel:
    return init_model(BOUNDARY_SIZES, "softmax2", seed)


def _as_batch(model: MlpModel, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.input_size:
        raise ValueError(f"input shape {x.shape} does not fit model input size {model.input_size}")
    return x, single


def _forward_trace(model: MlpModel, x: np.ndarray):
    """Return the list of layer inputs (post-ReLU) and the final pre-activation."""
    acts = [x]
    h = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w.T + b
        if i == last:
            return acts, z
        h = np.maximum(z, 0.0)
        acts.append(h)


def forward(model: MlpModel, x) -> np.ndarray:
    """Network output: affine+ReLU chain, final affine layer without activation.

    For the softmax head these are logits. Accepts one vector or a batch.
    """
    xb, single = _as_batch(model, x)
    _, z = _forward_trace(model, xb)
    return z[0] if single else z


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_proba(model: MlpModel, x) -> np.ndarray:
    return softmax(forward(model, x))


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def _labels(target, n_classes, n) -> np.ndarray:
    lab = np.asarray(target).reshape(-1)
    if lab.size != n:
        raise ValueError("one label per sample required")
    as_int = lab.astype(np.int64)
    if np.any(as_int != lab) or np.any(as_int < 0) or np.any(as_int >= n_classes):
        raise ValueError(f"labels must be integers in [0, {n_classes})")
    return as_int


def sample_losses(output, target, kind: str) -> np.ndarray:
    out = np.atleast_2d(np.asarray(output, dtype=np.float64))
    if kind == "euclidean":
        t = np.asarray(target, dtype=np.float64).reshape(out.shape[0], -1)
        if t.shape != out.shape:
            raise ValueError(f"target shape {t.shape} != output shape {out.shape}")
        return 0.5 * ((out - t) ** 2).sum(axis=1)
    if kind == "cross_entropy":
        lab = _labels(target, out.shape[1], out.shape[0])
        return -_log_softmax(out)[np.arange(out.shape[0]), lab]
    raise ValueError(f"unknown loss kind {kind!r}")


def loss(output, target, kind: str) -> float:
    """Mean of ``0.5*(y-t)^2`` or ``-log softmax(logits)[label]`` over the batch."""
    return float(sample_losses(output, target, kind).mean())


def loss_kind(model: MlpModel) -> str:
    return "euclidean" if model.head == "linear" else "cross_entropy"


def backward(model: MlpModel, x, target, kind: str | None = None):
    """Analytic gradient of the mean loss w.r.t. every weight and bias.

    Returns ``(grad_weights, grad_biases, loss_value)``.
    """
    kind = kind or loss_kind(model)
    xb, _ = _as_batch(model, x)
    n = xb.shape[0]
    acts, z = _forward_trace(model, xb)
    if kind == "euclidean":
        t = np.asarray(target, dtype=np.float64).reshape(n, -1)
        if t.shape != z.shape:
            raise ValueError(f"target shape {t.shape} != output shape {z.shape}")
        diff = z - t
        value = 0.5 * float((diff ** 2).sum()) / n
        delta = diff / n
    elif kind == "cross_entropy":
        lab = _labels(target, z.shape[1], n)
        logp = _log_softmax(z)
        value = -float(logp[np.arange(n), lab].sum()) / n
        delta = np.exp(logp)
        delta[np.arange(n), lab] -= 1.0
        delta /= n
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    gw = [None] * len(model.weights)
    gb = [None] * len(model.weights)
    for i in range(len(model.weights) - 1, -1, -1):
        gw[i] = delta.T @ acts[i]
        gb[i] = delta.sum(axis=0)
        if i:
            # ReLU'(0) = 0
            delta = (delta @ model.weights[i]) * (acts[i] > 0)
    return gw, gb, value


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 500
    epochs: int = 40
    lr_decay: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0 or self.epochs < 0:
            raise ValueError("learning_rate and epochs must be non-negative")


@dataclass
class TrainResult:
    model: MlpModel
    epoch_losses: list[float] = field(default_factory=list)
    learning_rates: list[float] = field(default_factory=list)


def train(model: MlpModel, inputs, targets, config: TrainConfig, kind: str | None = None) -> TrainResult:
    """Minibatch SGD with momentum: ``v <- mu*v - lr*grad; w <- w + v``.

    The input model is not modified. Each epoch reshuffles with a generator
    seeded from ``config.seed``; the learning rate is multiplied by
    ``lr_decay`` after every epoch. Epoch losses are sample-weighted means of
    the minibatch losses seen during that epoch.
    """
    kind = kind or loss_kind(model)
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(targets)
    n = len(x)
    if n == 0:
        raise ValueError("no training samples")
    net = model.copy()
    params = net.params()
    vel = [np.zeros_like(p) for p in params]
    rng = np.random.default_rng(config.seed)
    lr = config.learning_rate
    result = TrainResult(net)
    n_w = len(net.weights)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            # divergence is reported as NumericError below, not as numpy warnings
            with np.errstate(over="ignore", invalid="ignore"):
                gw, gb, value = backward(net, x[idx], y[idx], kind)
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch + 1}, batch starting {start}")
            total += value * len(idx)
            with np.errstate(over="ignore", invalid="ignore"):
                for j, (p, g) in enumerate(zip(params, gw + gb)):
                    if config.weight_decay and j < n_w:
                        g = g + config.weight_decay * p
                    vel[j] *= config.momentum
                    vel[j] -= lr * g
                    p += vel[j]
        mean = total / n
        result.epoch_losses.append(mean)
        result.learning_rates.append(lr)
        log.debug("epoch %d lr %.5g loss %.6g", epoch + 1, lr, mean)
        lr *= config.lr_decay
    for p in params:
        if not np.all(np.isfinite(p)):
            raise NumericError("non-finite parameters after training")
        p[...] = _to_f32_grid(p)
    return result


def encode_model(model: MlpModel) -> bytes:
    sizes = model.layer_sizes
    parts = [struct.pack("<4sHBH", MAGIC, VERSION, _HEADS[model.head], len(sizes)),
             struct.pack(f"<{len(sizes)}I", *sizes)]
    parts += [w.astype("<f4").tobytes() for w in model.weights]
    parts += [b.astype("<f4").tobytes() for b in model.biases]
    return b"".join(parts)


def decode_model(buf: bytes) -> MlpModel:
    head_fmt = struct.Struct("<4sHBH")
    if len(buf) < head_fmt.size:
        raise CorruptModelError("truncated header")
    magic, version, head, n_sizes = head_fmt.unpack_from(buf)
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ModelVersionError(f"unsupported model version {version}")
    if head not in _HEAD_NAMES:
        raise CorruptModelError(f"unknown head tag {head}")
    if n_sizes < 2:
        raise CorruptModelError("need at least an input and an output size")
    off = head_fmt.size
    if len(buf) < off + 4 * n_sizes:
        raise CorruptModelError("truncated layer sizes")
    sizes = struct.unpack_from(f"<{n_sizes}I", buf, off)
    off += 4 * n_sizes
    if min(sizes) == 0:
        raise CorruptModelError("zero-width layer")
    shapes = list(zip(sizes[1:], sizes[:-1]))
    n_floats = sum(o * i for o, i in shapes) + sum(sizes[1:])
    if len(buf) != off + 4 * n_floats:
        raise CorruptModelError(f"payload is {len(buf) - off} bytes, expected {4 * n_floats}")
    flat = np.frombuffer(buf, dtype="<f4", offset=off).astype(np.float64)
    weights, biases = [], []
    pos = 0
    for o, i in shapes:
        weights.append(flat[pos:pos + o * i].reshape(o, i))
        pos += o * i
    for o, _ in shapes:
        biases.append(flat[pos:pos + o])
        pos += o
    return MlpModel(weights, biases, _HEAD_NAMES[head])


def save_model(model: MlpModel, path) -> None:
    Path(path).write_bytes(encode_model(model))


def load_model(path) -> MlpModel:
    return decode_model(Path(path).read_bytes())

"""Small dense ReLU networks with hand-written backprop over a flat parameter vector.

Parameters live in a single 1-D float32 array. Each layer contributes its
weight matrix of shape ``(fan_in, fan_out)`` in row-major order followed by
its bias, so the same array can be interpolated, differenced, checkpointed
and fed to the optimisers without any reshaping bookkeeping.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidInputError

DTYPE = np.float32
DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class ArchSpec:
    layer_widths: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise InvalidInputError("ArchSpec needs at least an input and an output width")
        if any(w < 1 for w in widths):
            raise InvalidInputError(f"layer widths must be positive, got {widths}")
        if self.activation != "relu":
            raise InvalidInputError(f"unsupported activation {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def output_dim(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def n_params(self) -> int:
        w = self.layer_widths
        return sum(w[i] * w[i + 1] + w[i + 1] for i in range(len(w) - 1))

    def layer_slices(self) -> list[tuple[slice, tuple[int, int], slice]]:
        """(weight slice, weight shape, bias slice) for each layer, in canonical order."""
        out = []
        off = 0
        w = self.layer_widths
        for i in range(len(w) - 1):
            fan_in, fan_out = w[i], w[i + 1]
            ws = slice(off, off + fan_in * fan_out)
            off += fan_in * fan_out
            bs = slice(off, off + fan_out)
            off += fan_out
            out.append((ws, (fan_in, fan_out), bs))
        return out


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 1
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.weight_decay < 0:
            raise InvalidInputError("weight_decay must be >= 0")
        if not self.learning_rate > 0:
            raise InvalidInputError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidInputError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be positive")
        if self.epochs < 1:
            raise InvalidInputError("epochs must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidInputError("seed must be an unsigned 64-bit integer")


@dataclass(frozen=True, eq=False)
class Model:
    arch: ArchSpec
    params: np.ndarray = field(repr=False)

    def __post_init__(self):
        p = np.asarray(self.params)
        if p.ndim != 1 or p.shape[0] != self.arch.n_params:
            raise InvalidInputError(
                f"parameter vector has length {p.size}, arch expects {self.arch.n_params}"
            )
        if p.dtype != DTYPE and p.dtype != np.float64:
            p = p.astype(DTYPE)
        object.__setattr__(self, "params", p)

    def with_params(self, params: np.ndarray) -> "Model":
        return Model(self.arch, params)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


def init_params(arch: ArchSpec, seed: int) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    rng = make_rng(seed)
    params = np.zeros(arch.n_params, dtype=DTYPE)
    for ws, (fan_in, fan_out), _ in arch.layer_slices():
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params[ws] = rng.uniform(-bound, bound, size=fan_in * fan_out).astype(DTYPE)
    return params


def init_model(arch: ArchSpec, seed: int) -> Model:
    return Model(arch, init_params(arch, seed))


def unpack(arch: ArchSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(params[ws].reshape(shape), params[bs]) for ws, shape, bs in arch.layer_slices()]


def _check_batch(arch: ArchSpec, batch: np.ndarray) -> np.ndarray:
    x = np.asarray(batch)
    if x.ndim == 1:
        x = x[None, :]
    elif x.ndim > 2:
        x = x.reshape(x.shape[0], -1)
    if x.shape[1] != arch.input_dim:
        raise InvalidInputError(f"batch rows have width {x.shape[1]}, arch expects {arch.input_dim}")
    return x


def forward_cache(arch: ArchSpec, params: np.ndarray, x: np.ndarray):
    """Forward pass returning logits plus the per-layer inputs needed by :func:`backward`."""
    x = _check_batch(arch, x).astype(params.dtype, copy=False)
    acts = [x]
    h = x
    layers = unpack(arch, params)
    for i, (W, b) in enumerate(layers):
        z = h @ W + b
        if i < len(layers) - 1:
            h = np.maximum(z, 0)
            acts.append(h)
        else:
            h = z
    return h, acts


def forward(model: Model, batch: np.ndarray) -> np.ndarray:
    logits, _ = forward_cache(model.arch, model.params, batch)
    return logits


def backward(arch: ArchSpec, params: np.ndarray, acts: list[np.ndarray], dlogits: np.ndarray,
             input_grad: bool = False):
    """Backpropagate ``dlogits`` (d loss / d logits, already batch-averaged).

    Returns the flat parameter gradient and, if requested, the gradient with
    respect to the network input.
    """
    grad = np.zeros_like(params)
    layers = unpack(arch, params)
    slices = arch.layer_slices()
    delta = dlogits.astype(params.dtype, copy=False)
    dx = None
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        ws, shape, bs = slices[i]
        a = acts[i]
        grad[ws] = (a.T @ delta).ravel()
        grad[bs] = delta.sum(axis=0)
        if i > 0 or input_grad:
            d_in = delta @ W.T
            if i > 0:
                delta = d_in * (acts[i] > 0)
            else:
                dx = d_in
    return grad, dx


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(labels, n_rows: int, n_classes: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).ravel()
    if y.shape[0] != n_rows:
        raise InvalidInputError(f"{y.shape[0]} labels for {n_rows} rows")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise InvalidInputError(f"labels must lie in [0, {n_classes})")
    return y


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy, accumulated in float64."""
    lp = log_softmax(logits)
    picked = lp[np.arange(len(labels)), labels]
    return float(-np.sum(picked, dtype=np.float64) / len(labels))


def ce_logit_grad(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    g = softmax(logits)
    g[np.arange(len(labels)), labels] -= 1
    return g / len(labels)


def loss_and_grad_params(arch: ArchSpec, params: np.ndarray, batch: np.ndarray, labels):
    x = _check_batch(arch, batch)
    if x.shape[0] == 0:
        raise InvalidInputError("empty batch")
    y = _check_labels(labels, x.shape[0], arch.output_dim)
    logits, acts = forward_cache(arch, params, x)
    loss = cross_entropy(logits, y)
    grad, _ = backward(arch, params, acts, ce_logit_grad(logits, y))
    return loss, grad


def loss_and_grad(model: Model, batch: np.ndarray, labels) -> tuple[float, np.ndarray]:
    return loss_and_grad_params(model.arch, model.params, batch, labels)


def _same_length(*vecs: np.ndarray):
    n = vecs[0].shape[0]
    if any(v.shape[0] != n for v in vecs[1:]):
        raise InvalidInputError(f"vector lengths differ: {[v.shape[0] for v in vecs]}")


def sgd_step(params: np.ndarray, grad: np.ndarray, velocity: np.ndarray, cfg: SgdConfig):
    """Heavy-ball SGD: ``v' = m v + g``, ``w' = w - lr v'``.

    A nonzero ``cfg.weight_decay`` adds ``wd * w`` to ``g`` first.
    """
    _same_length(params, grad, velocity)
    dt = params.dtype
    g = grad.astype(dt, copy=False)
    if cfg.weight_decay:
        g = g + dt.type(cfg.weight_decay) * params
    v = dt.type(cfg.momentum) * velocity + g
    return params - dt.type(cfg.learning_rate) * v, v


def param_interpolate(w0: np.ndarray, w1: np.ndarray, t: float) -> np.ndarray:
    _same_length(w0, w1)
    if not 0.0 <= t <= 1.0:
        raise InvalidInputError(f"interpolation coefficient must lie in [0, 1], got {t}")
    dt = w0.dtype
    return dt.type(1.0 - t) * w0 + dt.type(t) * w1


def param_axpy_unit(w: np.ndarray, d: np.ndarray, rho: float) -> np.ndarray:
    """``w + rho * d / ||d||`` with one global L2 norm; identity for a vanishing ``d``."""
    _same_length(w, d)
    norm = float(np.linalg.norm(d.astype(np.float64)))
    if norm < DEGENERATE_NORM or rho == 0:
        return w.copy()
    return w + (d.astype(np.float64) * (rho / norm)).astype(w.dtype)


def grad_check(model: Model, batch: np.ndarray, labels, fd_step: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs in float64 so that the difference quotient is not swamped by
    single-precision rounding of the loss.
    """
    if not fd_step > 0:
        raise InvalidInputError("fd_step must be positive")
    arch = model.arch
    p = model.params.astype(np.float64)
    x = _check_batch(arch, batch).astype(np.float64)
    y = _check_labels(labels, x.shape[0], arch.output_dim)
    _, analytic = loss_and_grad_params(arch, p, x, y)
    worst = 0.0
    for k in range(p.size):
        orig = p[k]
        p[k] = orig + fd_step
        lp = cross_entropy(forward_cache(arch, p, x)[0], y)
        p[k] = orig - fd_step
        lm = cross_entropy(forward_cache(arch, p, x)[0], y)
        p[k] = orig
        fd = (lp - lm) / (2 * fd_step)
        worst = max(worst, abs(analytic[k] - fd) / max(1.0, abs(fd)))
    return worst


def predict(model: Model, batch: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Argmax class per row; ``np.argmax`` breaks ties toward the lowest index."""
    x = _check_batch(model.arch, batch)
    out = np.empty(x.shape[0], dtype=np.int64)
    for s in range(0, x.shape[0], chunk):
        out[s:s + chunk] = np.argmax(forward(model, x[s:s + chunk]), axis=1)
    return out


def checksum(params: np.ndarray) -> str:
    import hashlib

    return hashlib.sha256(np.ascontiguousarray(params).tobytes()).hexdigest()


def as_vector(values: Sequence[float]) -> np.ndarray:
    return np.asarray(values, dtype=DTYPE)

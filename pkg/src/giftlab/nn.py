"""Layers with an explicit forward/backward contract.

Every layer caches what its backward needs during ``forward`` and drops the
cache inside ``backward``, so a second backward without a fresh forward raises.
Parameter gradients are accumulated, never overwritten.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .core import Rng, Tensor, rand_uniform
from .errors import DataError, DimensionError

GROUPS = ("embedding", "adapter", "classifier")


class Param:
    """A named trainable tensor with its gradient buffer and Adam state."""

    __slots__ = ("name", "value", "grad", "adam_m", "adam_v", "step_count", "_group")

    def __init__(self, name: str, value: Tensor, group: str):
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)
        self.step_count = 0
        self._group = group

    @property
    def group(self) -> str:
        return self._group

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.value.shape}, group={self._group!r})"


def xavier_uniform(rng: Rng, d_in: int, d_out: int) -> Tensor:
    bound = np.sqrt(6.0 / (d_in + d_out))
    return rand_uniform(rng, (d_in, d_out), -bound, bound)


class Layer:
    params: list[Param]

    def __init__(self):
        self.params = []
        self._cache = None

    def _pop_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{type(self).__name__}.backward called without a pending forward")
        cache, self._cache = self._cache, None
        return cache

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def backward(self, dy: Tensor) -> Tensor:
        raise NotImplementedError

    __call__ = forward


def _check_rows(x: Tensor, d: int, what: str) -> None:
    if x.ndim != 2 or x.shape[1] != d:
        raise DimensionError(f"{what} expects input of shape (B, {d}), got {x.shape}")


class Linear(Layer):
    def __init__(self, d_in: int, d_out: int, name: str, group: str, rng: Rng | None = None):
        super().__init__()
        w = xavier_uniform(rng, d_in, d_out) if rng is not None else np.zeros((d_in, d_out))
        self.weight = Param(f"{name}.weight", w, group)
        self.bias = Param(f"{name}.bias", np.zeros(d_out), group)
        self.params = [self.weight, self.bias]

    def forward(self, x):
        _check_rows(x, self.weight.value.shape[0], "Linear")
        self._cache = x
        return x @ self.weight.value + self.bias.value

    def backward(self, dy):
        x = self._pop_cache()
        self.weight.grad += x.T @ dy
        self.bias.grad += dy.sum(axis=0)
        return dy @ self.weight.value.T


class ReLU(Layer):
    def forward(self, x):
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, 0.0)

    def backward(self, dy):
        return np.where(self._pop_cache(), dy, 0.0)


def sigmoid(x: Tensor) -> Tensor:
    # exp(-|x|) never overflows; sigmoid(0) is exactly 0.5
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


class Sigmoid(Layer):
    def forward(self, x):
        s = sigmoid(x)
        self._cache = s
        return s

    def backward(self, dy):
        s = self._pop_cache()
        return dy * s * (1.0 - s)


class LayerNorm(Layer):
    """Per-row normalisation with biased variance and learnable affine."""

    def __init__(self, d: int, name: str, group: str, eps: float = 1e-5):
        super().__init__()
        if d < 2:
            raise DimensionError(f"LayerNorm needs d >= 2, got {d}")
        self.eps = eps
        self.gamma = Param(f"{name}.gamma", np.ones(d), group)
        self.beta = Param(f"{name}.beta", np.zeros(d), group)
        self.params = [self.gamma, self.beta]

    def forward(self, x):
        _check_rows(x, self.gamma.value.shape[0], "LayerNorm")
        xc = x - x.mean(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + self.eps)
        xhat = xc * inv
        self._cache = (xhat, inv)
        return xhat * self.gamma.value + self.beta.value

    def backward(self, dy):
        xhat, inv = self._pop_cache()
        self.gamma.grad += (dy * xhat).sum(axis=0)
        self.beta.grad += dy.sum(axis=0)
        dxhat = dy * self.gamma.value
        return inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )


class GLU(Layer):
    """Gated linear unit: ``(x W + b) * sigmoid(x V + c)``."""

    def __init__(self, d_in: int, d_out: int, name: str, group: str, rng: Rng | None = None):
        super().__init__()
        zeros = np.zeros((d_in, d_out))
        self.W = Param(f"{name}.W", xavier_uniform(rng, d_in, d_out) if rng is not None else zeros, group)
        self.V = Param(f"{name}.V", xavier_uniform(rng, d_in, d_out) if rng is not None else zeros.copy(), group)
        self.b = Param(f"{name}.b", np.zeros(d_out), group)
        self.c = Param(f"{name}.c", np.zeros(d_out), group)
        self.params = [self.W, self.b, self.V, self.c]

    def forward(self, x):
        _check_rows(x, self.W.value.shape[0], "GLU")
        lin = x @ self.W.value + self.b.value
        gate = sigmoid(x @ self.V.value + self.c.value)
        self._cache = (x, lin, gate)
        return lin * gate

    def backward(self, dy):
        x, lin, gate = self._pop_cache()
        dlin = dy * gate
        dgate_in = dy * lin * gate * (1.0 - gate)
        self.W.grad += x.T @ dlin
        self.b.grad += dlin.sum(axis=0)
        self.V.grad += x.T @ dgate_in
        self.c.grad += dgate_in.sum(axis=0)
        return dlin @ self.W.value.T + dgate_in @ self.V.value.T


class Sequential(Layer):
    def __init__(self, layers: Sequence[Layer]):
        super().__init__()
        self.layers = list(layers)
        self.params = [p for layer in self.layers for p in layer.params]

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


class StatsPool(Layer):
    """Concatenate per-segment mean and (biased) std of consecutive frame rows.

    ``forward(x, lengths)`` treats ``x`` as the row-concatenation of segments
    with the given frame counts. Variance is floored at ``floor`` before sqrt.
    """

    def __init__(self, floor: float = 1e-8):
        super().__init__()
        self.floor = floor

    def forward(self, x, lengths=None):
        if lengths is None:
            lengths = [x.shape[0]]
        lengths = np.asarray(lengths, dtype=np.int64)
        if np.any(lengths < 2):
            raise DataError("statistics pooling needs at least 2 frames per segment")
        if lengths.sum() != x.shape[0]:
            raise DimensionError(f"segment lengths sum to {lengths.sum()}, input has {x.shape[0]} rows")
        starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        counts = lengths[:, None].astype(np.float64)
        mean = np.add.reduceat(x, starts, axis=0) / counts
        xc = x - np.repeat(mean, lengths, axis=0)
        var = np.add.reduceat(xc * xc, starts, axis=0) / counts
        live = var > self.floor
        std = np.sqrt(np.where(live, var, self.floor))
        self._cache = (lengths, counts, xc, std, live)
        return np.concatenate([mean, std], axis=1)

    def backward(self, dy):
        lengths, counts, xc, std, live = self._pop_cache()
        h = xc.shape[1]
        dmean, dstd = dy[:, :h], dy[:, h:]
        dvar = np.where(live, dstd * 0.5 / std, 0.0)
        return np.repeat(dmean / counts, lengths, axis=0) + np.repeat(2.0 * dvar / counts, lengths, axis=0) * xc


def softmax_xent(logits: Tensor, labels) -> tuple[float, Tensor]:
    """Mean cross-entropy of ``labels`` under ``softmax(logits)`` and its gradient."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} and labels {labels.shape} disagree")
    n, c = logits.shape
    if np.any(labels < 0) or np.any(labels >= c):
        raise DataError(f"label out of range [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(n)
    loss = float(-log_p[rows, labels].mean())
    grad = np.exp(log_p)
    grad[rows, labels] -= 1.0
    return loss, grad / n


class SoftmaxXent(Layer):
    """Cross-entropy against fixed labels, shaped as a layer for gradcheck."""

    def __init__(self, labels):
        super().__init__()
        self.labels = np.asarray(labels, dtype=np.int64)

    def forward(self, logits):
        loss, grad = softmax_xent(logits, self.labels)
        self._cache = grad
        return np.array([[loss]])

    def backward(self, dy):
        return self._pop_cache() * float(np.sum(dy))


# --- gradient checking -----------------------------------------------------

@dataclass
class GradcheckReport:
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def failures(self) -> list[str]:
        return [k for k, v in self.errors.items() if not v <= self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    def lines(self) -> list[str]:
        return [
            f"{'ok  ' if err <= self.tolerance else 'FAIL'} {name:<32s} {err:.3e}"
            for name, err in self.errors.items()
        ]


def rel_error(a: Tensor, n: Tensor) -> Tensor:
    return np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))


# A closure evaluates the scalar loss. With ``backward=True`` it also zeroes and
# accumulates parameter grads and returns the gradients w.r.t. ``inputs``.
LossClosure = Callable[[bool], tuple[float, list[Tensor]]]


def check_gradients(
    closure: LossClosure,
    params: Iterable[Param],
    inputs: Sequence[Tensor] = (),
    tolerance: float = 1e-5,
) -> GradcheckReport:
    params = list(params)
    for p in params:
        p.zero_grad()
    _, input_grads = closure(True)
    analytic = {p.name: p.grad.copy() for p in params}
    for i, g in enumerate(input_grads):
        analytic[f"input[{i}]"] = np.asarray(g, dtype=np.float64).copy()

    targets = [(p.name, p.value) for p in params] + [(f"input[{i}]", x) for i, x in enumerate(inputs)]
    report = GradcheckReport(tolerance)
    for name, arr in targets:
        numeric = np.zeros_like(arr)
        flat, nflat = arr.reshape(-1), numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            h = 1e-6 * max(1.0, abs(orig))
            flat[j] = orig + h
            up = closure(False)[0]
            flat[j] = orig - h
            down = closure(False)[0]
            flat[j] = orig
            nflat[j] = (up - down) / (2.0 * h)
        report.errors[name] = float(rel_error(analytic[name], numeric).max(initial=0.0))
    for p in params:
        p.zero_grad()
    return report


def layer_closure(layer: Layer, x: Tensor, probe: Tensor) -> LossClosure:
    """Loss ``sum(layer(x) * probe)``; ``x`` is perturbed in place by the checker."""

    def closure(backward: bool):
        out = layer.forward(x)
        loss = float(np.sum(out * probe))
        if not backward:
            layer._cache = None
            return loss, []
        for p in layer.params:
            p.zero_grad()
        return loss, [layer.backward(probe)]

    return closure


def gradcheck(target, x, tolerance: float = 1e-5, rng: Rng | None = None, **kwargs) -> GradcheckReport:
    """Compare analytic and central-difference gradients for a layer or a model.

    Layers are checked on ``sum(layer(x) * probe)`` for a fixed random probe.
    Objects exposing ``loss_closure(x, **kwargs) -> (closure, params, inputs)``
    (model stacks) supply their own loss.
    """
    if hasattr(target, "loss_closure"):
        closure, params, inputs = target.loss_closure(x, **kwargs)
        return check_gradients(closure, params, inputs, tolerance)
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.array(x, dtype=np.float64)
    out_shape = target.forward(x).shape
    target._cache = None
    probe = rng.uniform(-1.0, 1.0, size=out_shape)
    return check_gradients(layer_closure(target, x, probe), target.params, [x], tolerance)

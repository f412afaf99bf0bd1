"""Minimal reverse-mode building blocks for coordinate networks.

Every layer exposes ``forward(x) -> (y, cache)`` and ``backward(cache, g) -> dx``.
The cache is returned rather than stored on the layer, so a frozen layer can be
evaluated from several threads at once; only ``backward`` writes (into
``Parameter.grads``).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64


class ConfigError(ValueError):
    """Inconsistent shapes, widths or hyperparameters.

    ``problems`` lists each individual issue (one per field for configs).
    """

    def __init__(self, message: str, problems=None):
        super().__init__(message)
        self.problems = list(problems) if problems else [message]


class DomainError(ValueError):
    """Coordinates outside the unit cube."""


class UsageError(RuntimeError):
    """Operations called out of order (e.g. backward before forward)."""


class NonFiniteError(FloatingPointError):
    """NaN or Inf reached a parameter, gradient or loss."""


# Multiplies every linear weight gradient; used only by negative-control tests.
_GRAD_CORRUPTION = 1.0


@contextlib.contextmanager
def corrupted_gradients(factor: float = 1.001):
    """Temporarily scale linear weight gradients by ``factor`` (test hook)."""
    global _GRAD_CORRUPTION
    previous = _GRAD_CORRUPTION
    _GRAD_CORRUPTION = float(factor)
    try:
        yield
    finally:
        _GRAD_CORRUPTION = previous


@dataclass(eq=False)
class Parameter:
    """Named trainable buffer with a gradient of identical shape.

    ``group`` selects the optimizer learning rate (``"net"`` or ``"table"``).
    """

    name: str
    values: np.ndarray
    group: str = "net"
    grads: np.ndarray = field(init=False)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=DTYPE)
        if self.values.ndim == 1:
            self.values = self.values.reshape(-1, 1)
        if self.values.ndim != 2:
            raise ConfigError(f"{self.name}: parameters are 2-D, got shape {self.values.shape}")
        self.grads = np.zeros_like(self.values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def zero_grads(self) -> None:
        self.grads.fill(0.0)

    def check_finite(self) -> None:
        if not np.all(np.isfinite(self.values)):
            raise NonFiniteError(f"non-finite values in parameter {self.name!r}")
        if not np.all(np.isfinite(self.grads)):
            raise NonFiniteError(f"non-finite gradients in parameter {self.name!r}")


@dataclass(frozen=True)
class Activation:
    kind: str = "relu"
    w0: float = 30.0

    def __post_init__(self):
        if self.kind not in ("relu", "sine", "identity"):
            raise ConfigError(f"unknown activation {self.kind!r}")
        if self.kind == "sine" and not self.w0 > 0:
            raise ConfigError("sine activation needs w0 > 0")

    def forward(self, x: np.ndarray):
        if self.kind == "relu":
            return np.maximum(x, 0.0), x
        if self.kind == "sine":
            return np.sin(self.w0 * x), x
        return x, None

    def backward(self, cache, upstream: np.ndarray) -> np.ndarray:
        if self.kind == "relu":
            # subgradient at exactly 0 is 0
            return upstream * (cache > 0.0)
        if self.kind == "sine":
            return upstream * (self.w0 * np.cos(self.w0 * cache))
        return upstream


def _as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 2:
        raise ConfigError(f"expected a 2-D (n, width) array, got shape {x.shape}")
    return x


class Linear:
    """Dense layer ``y = x W^T + b`` with weight shape (out, in)."""

    def __init__(self, weight: Parameter, bias: Parameter):
        if bias.size != weight.shape[0]:
            raise ConfigError(
                f"bias {bias.name} has {bias.size} entries, weight {weight.name} has {weight.shape[0]} rows"
            )
        self.weight = weight
        self.bias = bias

    @classmethod
    def create(cls, name: str, d_in: int, d_out: int, rng: np.random.Generator,
               bound: float, bias_bound: float | None = None, group: str = "net") -> "Linear":
        """Uniform(-bound, bound) weights; bias bound defaults to the weight bound."""
        bias_bound = bound if bias_bound is None else bias_bound
        w = rng.uniform(-bound, bound, size=(d_out, d_in))
        b = rng.uniform(-bias_bound, bias_bound, size=(d_out, 1))
        return cls(Parameter(f"{name}.weight", w, group), Parameter(f"{name}.bias", b, group))

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def forward(self, x):
        x = _as_matrix(x)
        if x.shape[1] != self.d_in:
            raise ConfigError(f"{self.weight.name}: input width {x.shape[1]} != {self.d_in}")
        return x @ self.weight.values.T + self.bias.values[:, 0], x

    def backward(self, cache, upstream: np.ndarray) -> np.ndarray:
        if cache is None:
            raise UsageError(f"{self.weight.name}: backward without a forward context")
        x = cache
        self.weight.grads += _GRAD_CORRUPTION * (upstream.T @ x)
        self.bias.grads[:, 0] += upstream.sum(axis=0)
        return upstream @ self.weight.values


class Dense:
    """Linear layer followed by an activation."""

    def __init__(self, linear: Linear, activation: Activation):
        self.linear = linear
        self.activation = activation

    def parameters(self) -> list[Parameter]:
        return self.linear.parameters()

    def forward(self, x):
        z, lin_cache = self.linear.forward(x)
        y, act_cache = self.activation.forward(z)
        return y, (lin_cache, act_cache)

    def backward(self, cache, upstream):
        lin_cache, act_cache = cache
        return self.linear.backward(lin_cache, self.activation.backward(act_cache, upstream))


class Sequential:
    def __init__(self, layers):
        self.layers = list(layers)

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x)
            caches.append(c)
        return x, caches

    def backward(self, caches, upstream):
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            upstream = layer.backward(c, upstream)
        return upstream


def concat_forward(a: np.ndarray, b: np.ndarray):
    """Column-wise join, ``a`` first. Returns (out, split index)."""
    a, b = _as_matrix(a), _as_matrix(b)
    if a.shape[0] != b.shape[0]:
        raise ConfigError(f"concat row mismatch: {a.shape[0]} vs {b.shape[0]}")
    return np.concatenate([a, b], axis=1), a.shape[1]


def concat_backward(split: int, upstream: np.ndarray):
    return upstream[:, :split], upstream[:, split:]


def mse_loss(pred, target):
    """Mean squared error over all entries and its gradient w.r.t. ``pred``."""
    pred, target = _as_matrix(pred), _as_matrix(target)
    if pred.shape != target.shape:
        raise ConfigError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    if pred.shape[0] == 0:
        raise UsageError("mse_loss on an empty batch")
    diff = pred - target
    count = diff.size
    loss = float(np.sum(diff * diff) / count)
    if not np.isfinite(loss):
        raise NonFiniteError("loss is not finite")
    return loss, (2.0 / count) * diff

"""Dense feedforward networks with hand-written backprop and Adam.

Parameters live in one flat float64 vector plus a tuple of ``LayerSpec``
describing how to slice it.  Each layer stores its weight matrix row-major
with shape ``(output_dim, input_dim)`` followed by the bias.

All functions accept a single input vector or a batch (rows are samples).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

ACTIVATIONS = ("tanh", "relu", "identity")


class NonFiniteError(FloatingPointError):
    """Raised when a loss, target or gradient stops being finite."""


@dataclass(frozen=True)
class LayerSpec:
    input_dim: int
    output_dim: int
    activation: str = "tanh"

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError(f"layer dims must be >= 1, got {self.input_dim}x{self.output_dim}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")

    @property
    def n_params(self) -> int:
        return self.input_dim * self.output_dim + self.output_dim


@dataclass(frozen=True, eq=False)
class ApproximatorParams:
    """Layer header plus the flat parameter vector."""

    shape_header: tuple[LayerSpec, ...]
    values: np.ndarray

    def __post_init__(self):
        header = tuple(self.shape_header)
        object.__setattr__(self, "shape_header", header)
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        if not header:
            raise ValueError("shape_header must contain at least one layer")
        for prev, nxt in zip(header, header[1:]):
            if prev.output_dim != nxt.input_dim:
                raise ValueError(f"layer chain broken: {prev.output_dim} -> {nxt.input_dim}")
        if any(layer.activation == "identity" for layer in header[:-1]):
            raise ValueError("identity activation is only allowed on the final layer")
        expected = sum(layer.n_params for layer in header)
        if values.ndim != 1 or values.shape[0] != expected:
            raise ValueError(f"values length {values.shape} does not match header ({expected})")
        if not np.all(np.isfinite(values)):
            raise NonFiniteError("parameter vector contains non-finite entries")

    @property
    def input_dim(self) -> int:
        return self.shape_header[0].input_dim

    @property
    def output_dim(self) -> int:
        return self.shape_header[-1].output_dim

    def with_values(self, values: np.ndarray) -> "ApproximatorParams":
        return ApproximatorParams(self.shape_header, values)

    def copy(self) -> "ApproximatorParams":
        return ApproximatorParams(self.shape_header, self.values.copy())

    def same_shape(self, other: "ApproximatorParams") -> bool:
        return self.shape_header == other.shape_header

    def layers(self):
        """Yield ``(W, b)`` views into ``values`` for every layer."""
        offset = 0
        for spec in self.shape_header:
            n_w = spec.input_dim * spec.output_dim
            W = self.values[offset:offset + n_w].reshape(spec.output_dim, spec.input_dim)
            b = self.values[offset + n_w:offset + n_w + spec.output_dim]
            offset += spec.n_params
            yield spec, W, b


def mlp_header(input_dim: int, output_dim: int, hidden: Sequence[int] = (64, 64),
               activation: str = "tanh", output_activation: str = "identity") -> tuple[LayerSpec, ...]:
    dims = [input_dim, *hidden, output_dim]
    layers = [LayerSpec(i, o, activation) for i, o in zip(dims[:-2], dims[1:-1])]
    layers.append(LayerSpec(dims[-2], dims[-1], output_activation))
    return tuple(layers)


def init_params(header: Sequence[LayerSpec], rng: np.random.Generator,
                final_scale: float = 1e-2) -> ApproximatorParams:
    """Glorot-uniform hidden layers, small uniform output layer, zero biases."""
    header = tuple(header)
    chunks = []
    for i, spec in enumerate(header):
        if i == len(header) - 1:
            limit = final_scale
        else:
            limit = np.sqrt(6.0 / (spec.input_dim + spec.output_dim))
        chunks.append(rng.uniform(-limit, limit, size=spec.input_dim * spec.output_dim))
        chunks.append(np.zeros(spec.output_dim))
    return ApproximatorParams(header, np.concatenate(chunks))


def zeros_like(params: ApproximatorParams) -> ApproximatorParams:
    return params.with_values(np.zeros_like(params.values))


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _activation_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    return np.ones_like(z)


def _as_batch(params: ApproximatorParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ValueError(f"input has shape {np.shape(x)}, network expects {params.input_dim} features")
    return x, single


def forward_cache(params: ApproximatorParams, x) -> tuple[np.ndarray, list]:
    """Batched forward pass that keeps what the backward pass needs."""
    h, _ = _as_batch(params, x)
    cache = []
    for spec, W, b in params.layers():
        z = h @ W.T + b
        a = _activate(spec.activation, z)
        cache.append((h, z, a))
        h = a
    return h, cache


def forward(params: ApproximatorParams, x) -> np.ndarray:
    _, single = _as_batch(params, x)
    out, _ = forward_cache(params, x)
    return out[0] if single else out


def backward(params: ApproximatorParams, cache: list, upstream,
             need_input_grad: bool = False) -> tuple[np.ndarray, np.ndarray | None]:
    """Backprop ``upstream`` (dL/d output, one row per sample).

    Returns the parameter gradient summed over the batch and, optionally, the
    per-sample gradient with respect to the network input.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.ndim == 1:
        upstream = upstream[None, :]
    n_rows = cache[0][0].shape[0]
    if upstream.shape != (n_rows, params.output_dim):
        raise ValueError(f"upstream has shape {upstream.shape}, expected {(n_rows, params.output_dim)}")
    layers = list(params.layers())
    grads = [None] * len(layers)
    delta = upstream
    for i in range(len(layers) - 1, -1, -1):
        spec, W, _ = layers[i]
        h_in, z, a = cache[i]
        dz = delta * _activation_grad(spec.activation, z, a)
        grads[i] = (dz.T @ h_in).ravel(), dz.sum(axis=0)
        if i > 0 or need_input_grad:
            delta = dz @ W
    flat = np.concatenate([part for pair in grads for part in pair])
    return flat, (delta if need_input_grad else None)


def grad(params: ApproximatorParams, x, upstream) -> np.ndarray:
    """Gradient of ``sum(upstream * forward(params, x))`` w.r.t. the parameters."""
    _, cache = forward_cache(params, x)
    g, _ = backward(params, cache, upstream)
    return g


def input_grad(params: ApproximatorParams, x, upstream) -> np.ndarray:
    """Gradient of ``sum(upstream * forward(params, x))`` w.r.t. the input rows."""
    _, single = _as_batch(params, x)
    _, cache = forward_cache(params, x)
    _, gx = backward(params, cache, upstream, need_input_grad=True)
    return gx[0] if single else gx


@dataclass(frozen=True, eq=False)
class OptimizerState:
    step_size: float
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mode: str = "adam"  # or "sgd"

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.m.shape != self.v.shape:
            raise ValueError("moment accumulators must have equal length")
        if self.mode not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer mode {self.mode!r}")


def make_optimizer(params: ApproximatorParams, step_size: float = 3e-4, mode: str = "adam",
                   **kwargs) -> OptimizerState:
    n = params.values.shape[0]
    return OptimizerState(step_size, np.zeros(n), np.zeros(n), mode=mode, **kwargs)


def optimizer_step(params: ApproximatorParams, state: OptimizerState,
                   gradient: np.ndarray) -> tuple[ApproximatorParams, OptimizerState]:
    """One descent step; returns new params and new optimizer state."""
    gradient = np.asarray(gradient, dtype=np.float64)
    if gradient.shape != params.values.shape or state.m.shape != params.values.shape:
        raise ValueError(f"gradient length {gradient.shape} does not match params {params.values.shape}")
    if not np.all(np.isfinite(gradient)):
        bad = np.flatnonzero(~np.isfinite(gradient))
        raise NonFiniteError(f"non-finite gradient at {bad.size} entries (first index {bad[0]}), "
                             f"step {state.step_count}")
    t = state.step_count + 1
    if state.mode == "sgd":
        new_values = params.values - state.step_size * gradient
        return params.with_values(new_values), replace(state, step_count=t)
    m = state.beta1 * state.m + (1.0 - state.beta1) * gradient
    v = state.beta2 * state.v + (1.0 - state.beta2) * gradient * gradient
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_values = params.values - state.step_size * m_hat / (np.sqrt(v_hat) + state.eps)
    return params.with_values(new_values), replace(state, m=m, v=v, step_count=t)


def polyak_update(target: ApproximatorParams, online: ApproximatorParams,
                  tau: float) -> ApproximatorParams:
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    if not target.same_shape(online):
        raise ValueError("polyak_update: target and online shapes differ")
    if tau == 1.0:
        return online.copy()
    return target.with_values((1.0 - tau) * target.values + tau * online.values)

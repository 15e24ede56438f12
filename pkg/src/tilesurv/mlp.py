"""Tiny fully-connected nets with hand-written backprop.

Shared by the contrastive encoder and the survival network heads. Hidden
layers use tanh, the final layer is linear; callers attach whatever output
map (normalization, sigmoid, ...) they need and chain gradients through
:func:`backward`. A params object also flattens to a single vector so tests
can run finite-difference checks over every coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MlpParams:
    weights: list[np.ndarray]  # layer l: shape (in_l, out_l)
    biases: list[np.ndarray]   # layer l: shape (out_l,)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple([self.weights[0].shape[0]] + [w.shape[1] for w in self.weights])

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def to_vector(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    @classmethod
    def from_vector(cls, dims, vec: np.ndarray) -> "MlpParams":
        weights, biases = [], []
        pos = 0
        for din, dout in zip(dims[:-1], dims[1:]):
            weights.append(vec[pos:pos + din * dout].reshape(din, dout).copy())
            pos += din * dout
            biases.append(vec[pos:pos + dout].copy())
            pos += dout
        if pos != vec.size:
            raise ValueError(f"vector of size {vec.size} does not match dims {dims}")
        return cls(weights, biases)


def init_params(dims, rng: np.random.Generator, scale: float | None = None) -> MlpParams:
    """Gaussian init with per-layer 1/sqrt(fan_in) std unless `scale` overrides it."""
    weights, biases = [], []
    for din, dout in zip(dims[:-1], dims[1:]):
        std = scale if scale is not None else 1.0 / np.sqrt(din)
        weights.append(rng.normal(0.0, std, size=(din, dout)))
        biases.append(np.zeros(dout))
    return MlpParams(weights, biases)


def zeros_like(params: MlpParams) -> MlpParams:
    return MlpParams([np.zeros_like(w) for w in params.weights],
                     [np.zeros_like(b) for b in params.biases])


def add_scaled(params: MlpParams, other: MlpParams, coef: float) -> MlpParams:
    return MlpParams(
        [w + coef * g for w, g in zip(params.weights, other.weights)],
        [b + coef * g for b, g in zip(params.biases, other.biases)],
    )


def ema(target: MlpParams, source: MlpParams, momentum: float) -> MlpParams:
    """Elementwise momentum * target + (1 - momentum) * source."""
    return MlpParams(
        [momentum * t + (1.0 - momentum) * s for t, s in zip(target.weights, source.weights)],
        [momentum * t + (1.0 - momentum) * s for t, s in zip(target.biases, source.biases)],
    )


def forward(params: MlpParams, x: np.ndarray):
    """Run the net on a batch (n, d_in); returns (output, caches for backward)."""
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[0]:
        raise ValueError(f"input of shape {x.shape} does not match "
                         f"encoder input dim {params.weights[0].shape[0]}")
    activations = [x]
    h = x
    n_layers = len(params.weights)
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        h = np.tanh(z) if l < n_layers - 1 else z
        activations.append(h)
    return h, activations


def backward(params: MlpParams, activations, grad_out: np.ndarray):
    """Backprop a gradient w.r.t. the net output; returns (param grads, input grad).

    Gradients are summed over the batch; callers average if they want means.
    """
    grads = zeros_like(params)
    n_layers = len(params.weights)
    g = grad_out
    for l in range(n_layers - 1, -1, -1):
        h_out = activations[l + 1]
        if l < n_layers - 1:  # undo tanh
            g = g * (1.0 - h_out * h_out)
        h_in = activations[l]
        grads.weights[l] = h_in.T @ g
        grads.biases[l] = g.sum(axis=0)
        g = g @ params.weights[l].T
    return grads, g


def l2_normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise FloatingPointError("cannot normalize an (almost) zero embedding")
    return x / norms


def l2_normalize_backward(raw: np.ndarray, normalized: np.ndarray,
                          grad_out: np.ndarray) -> np.ndarray:
    """Gradient of row-wise normalization: projects out the radial component."""
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    radial = (grad_out * normalized).sum(axis=1, keepdims=True)
    return (grad_out - radial * normalized) / norms

"""Small fully connected networks: ReLU hidden layers, identity output."""

from __future__ import annotations

import numpy as np

from .rng import Rng
from .tape import Tensor, linear, relu


class Mlp:
    """Multilayer perceptron over row-batches of inputs.

    ``layer_widths`` lists input, hidden..., output sizes. ``weights[i]`` has
    shape ``(layer_widths[i+1], layer_widths[i])`` and ``biases[i]`` length
    ``layer_widths[i+1]``. Weights are drawn uniformly in ±1/sqrt(fan_in) when
    an ``rng`` is given, otherwise zero-initialized; biases start at zero.
    """

    def __init__(self, layer_widths: list[int], rng: Rng | None = None,
                 dtype=np.float32):
        if len(layer_widths) < 2 or any(w <= 0 for w in layer_widths):
            raise ValueError(f"bad layer widths: {layer_widths}")
        self.layer_widths = list(layer_widths)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for fan_in, fan_out in zip(layer_widths[:-1], layer_widths[1:]):
            if rng is None:
                w = np.zeros((fan_out, fan_in), dtype=dtype)
            else:
                bound = 1.0 / np.sqrt(fan_in)
                w = rng.uniform(-bound, bound, (fan_out, fan_in)).astype(dtype)
            self.weights.append(Tensor(w, requires_grad=True))
            self.biases.append(Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True))

    def forward(self, x: Tensor) -> Tensor:
        """Differentiable forward pass; x has shape (batch, layer_widths[0])."""
        if x.data.ndim != 2 or x.data.shape[1] != self.layer_widths[0]:
            raise ValueError(
                f"expected input shape (batch, {self.layer_widths[0]}), got {x.data.shape}")
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = linear(h, w, b)
            if i != last:
                h = relu(h)
        return h

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Forward pass without recording gradients; same arithmetic as forward."""
        if x.ndim != 2 or x.shape[1] != self.layer_widths[0]:
            raise ValueError(
                f"expected input shape (batch, {self.layer_widths[0]}), got {x.shape}")
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.data.T + b.data
            if i != last:
                h = np.maximum(h, 0)
        return h

    def parameters(self) -> list[Tensor]:
        """Trainable tensors in declaration order (w0, b0, w1, b1, ...)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy(self, dtype=None) -> "Mlp":
        clone = Mlp(self.layer_widths, rng=None,
                    dtype=dtype or self.weights[0].data.dtype)
        clone.load_from(self, dtype=dtype)
        return clone

    def load_from(self, other: "Mlp", dtype=None):
        if other.layer_widths != self.layer_widths:
            raise ValueError("layer widths differ")
        for mine, theirs in zip(self.parameters(), other.parameters()):
            mine.data = theirs.data.astype(dtype) if dtype else theirs.data.copy()

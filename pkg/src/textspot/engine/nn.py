"""Tiny parameter-container layer: modules, linear maps, layer norm.

Modules exist to give parameters stable names (for checkpoints and
optimizer groups); they hold no forward-graph state. Construction takes
an explicit ``numpy.random.Generator`` so initialization is seeded.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tensor


def parameter(data, dtype="f32"):
    return Tensor(np.asarray(data), requires_grad=True, dtype=dtype)


class Module:
    """Base container; children are discovered from instance attributes."""

    def named_parameters(self, prefix=""):
        out = []
        for key, val in vars(self).items():
            name = f"{prefix}{key}" if prefix else key
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((name, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(f"{name}."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{name}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out.append((f"{name}.{i}", item))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def load_arrays(self, arrays, prefix=""):
        """Copy values from ``{name: ndarray}`` into matching parameters."""
        for name, p in self.named_parameters(prefix):
            if name not in arrays:
                raise KeyError(f"checkpoint is missing parameter '{name}'")
            arr = arrays[name]
            if tuple(arr.shape) != p.shape:
                raise ValueError(
                    f"parameter '{name}': checkpoint shape {arr.shape} != model {p.shape}")
            p.data = arr.astype(p.data.dtype).reshape(p.shape).copy()


class Linear(Module):
    """y = x @ w + b with w of shape [in_dim, out_dim]."""

    def __init__(self, in_dim, out_dim, rng, bias=True, dtype="f32"):
        bound = float(np.sqrt(6.0 / (in_dim + out_dim)))
        self.w = parameter(rng.uniform(-bound, bound, size=(in_dim, out_dim)), dtype)
        self.b = parameter(np.zeros(out_dim), dtype) if bias else None

    def __call__(self, x):
        return ops.linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, dim, dtype="f32", eps=1e-6):
        self.gamma = parameter(np.ones(dim), dtype)
        self.beta = parameter(np.zeros(dim), dtype)
        self._eps = eps

    def __call__(self, x):
        return ops.layer_norm(x, self.gamma, self.beta, eps=self._eps)


class MLP(Module):
    """Stack of linear layers with ReLU between (none after the last)."""

    def __init__(self, dims, rng, dtype="f32"):
        self.layers = [Linear(dims[i], dims[i + 1], rng, dtype=dtype)
                       for i in range(len(dims) - 1)]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < len(self.layers):
                x = ops.relu(x)
        return x


class Conv2d(Module):
    """Strided 2-D convolution on a single [Cin, H, W] image."""

    def __init__(self, cin, cout, kernel, rng, stride=1, padding=0, dtype="f32"):
        scale = float(np.sqrt(2.0 / (cin * kernel * kernel)))
        self.w = parameter(rng.normal(scale=scale, size=(cout, cin, kernel, kernel)),
                           dtype)
        self.b = parameter(np.zeros(cout), dtype)
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return ops.conv2d(x, self.w, self.b, stride=self.stride,
                          padding=self.padding)

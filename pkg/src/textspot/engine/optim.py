"""AdamW with bias correction, decoupled weight decay, and parameter groups."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class AdamW:
    """Standard AdamW update, deterministic given parameters and gradients.

    ``params`` is either a flat list of tensors or a list of group dicts
    ``{"params": [...], "lr_scale": float}``; per-group scales multiply
    the shared base learning rate (used for the 0.1x projection groups).
    """

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=1e-4):
        if params and isinstance(params[0], Tensor):
            params = [{"params": list(params), "lr_scale": 1.0}]
        self.groups = [
            {"params": list(g["params"]), "lr_scale": float(g.get("lr_scale", 1.0))}
            for g in params
        ]
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self._m = {}
        self._v = {}
        for p in self._all_params():
            self._m[id(p)] = np.zeros_like(p.data)
            self._v[id(p)] = np.zeros_like(p.data)

    def _all_params(self):
        for g in self.groups:
            yield from g["params"]

    def zero_grad(self):
        for p in self._all_params():
            p.grad = None

    def step(self):
        """Apply one update to every parameter whose ``grad`` is set."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for group in self.groups:
            lr = self.lr * group["lr_scale"]
            for p in group["params"]:
                g = p.grad
                if g is None:
                    continue
                if g.shape != p.data.shape:
                    raise ValueError(
                        f"gradient shape {g.shape} does not match parameter {p.data.shape}")
                m = self._m[id(p)]
                v = self._v[id(p)]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * (g * g)
                m_hat = m / bc1
                v_hat = v / bc2
                p.data -= lr * (m_hat / (np.sqrt(v_hat) + self.eps)
                                + self.weight_decay * p.data)

    # -- persistence (for bit-identical training resume) --------------

    def state_tensors(self, named_params):
        """Moment buffers keyed off parameter names, for checkpointing."""
        out = {}
        for name, p in named_params:
            out[f"optim.m.{name}"] = self._m[id(p)]
            out[f"optim.v.{name}"] = self._v[id(p)]
        return out

    def load_state_tensors(self, named_params, tensors, t):
        self.t = int(t)
        for name, p in named_params:
            m = tensors[f"optim.m.{name}"]
            v = tensors[f"optim.v.{name}"]
            if m.shape != p.data.shape or v.shape != p.data.shape:
                raise ValueError(f"optimizer state shape mismatch for '{name}'")
            self._m[id(p)] = m.astype(p.data.dtype).reshape(p.data.shape)
            self._v[id(p)] = v.astype(p.data.dtype).reshape(p.data.shape)

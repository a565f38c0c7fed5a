"""Sinusoidal positional encodings and the differentiable box encoder.

1-D encodings serve the character query slots, 2-D encodings the
flattened feature-map tokens. The box encoder turns a normalized
(cx, cy, w, h) box into a d_model vector via sine features (one quarter
of the channels per coordinate, scaled by 2*pi), a linear layer, and a
LayerNorm; it is differentiable both in its weights and in the box
coordinates.
"""

from __future__ import annotations

import numpy as np

from .engine import Tensor, nn, ops

DEFAULT_TEMPERATURE = 10000.0


def sine_pe_1d(positions, d_model: int, temperature: float = DEFAULT_TEMPERATURE):
    """Interleaved sin/cos features at geometric frequencies.

    ``positions`` is a scalar or 1-D array; returns [d_model] or
    [len(positions), d_model]. Even channels are sines (0 at position
    0), odd channels cosines (1 at position 0).
    """
    if d_model % 2:
        raise ValueError(f"d_model must be even, got {d_model}")
    p = np.asarray(positions, dtype=np.float64)
    scalar = p.ndim == 0
    p = np.atleast_1d(p)
    k = np.arange(d_model // 2, dtype=np.float64)
    inv_freq = temperature ** (-2.0 * k / d_model)
    ang = p[:, None] * inv_freq[None, :]
    pe = np.empty((p.shape[0], d_model), dtype=np.float64)
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang)
    return pe[0] if scalar else pe


def sine_pe_2d(h: int, w: int, d_model: int,
               temperature: float = DEFAULT_TEMPERATURE):
    """Per-axis 1-D encodings concatenated: first half row (y), second half column (x)."""
    if d_model % 4:
        raise ValueError(f"2-D encoding needs d_model divisible by 4, got {d_model}")
    half = d_model // 2
    pe_y = sine_pe_1d(np.arange(h), half, temperature)       # [h, half]
    pe_x = sine_pe_1d(np.arange(w), half, temperature)       # [w, half]
    out = np.empty((h, w, d_model), dtype=np.float64)
    out[:, :, :half] = pe_y[:, None, :]
    out[:, :, half:] = pe_x[None, :, :]
    return out


class BoxEncoder(nn.Module):
    """phi: normalized boxes [Q, 4] -> guidance vectors [Q, d_model]."""

    def __init__(self, d_model: int, rng, temperature: float = DEFAULT_TEMPERATURE,
                 dtype: str = "f32"):
        if d_model % 4:
            raise ValueError(f"box encoding needs d_model divisible by 4, got {d_model}")
        self.d_model = d_model
        quarter = d_model // 4
        k = np.arange(quarter // 2, dtype=np.float64)
        inv_freq = temperature ** (-2.0 * k / quarter)
        self._angular = Tensor(2.0 * np.pi * inv_freq, dtype=dtype)
        self.proj = nn.Linear(d_model, d_model, rng, dtype=dtype)
        self.norm = nn.LayerNorm(d_model, dtype=dtype)

    def __call__(self, boxes: Tensor) -> Tensor:
        if boxes.ndim != 2 or boxes.shape[1] != 4:
            raise ValueError(f"boxes must be [Q,4], got {boxes.shape}")
        q = boxes.shape[0]
        feats = []
        for coord in range(4):
            ang = ops.reshape(boxes[:, coord], (q, 1)) * self._angular
            pair = ops.stack([ops.sin(ang), ops.cos(ang)], axis=-1)
            feats.append(ops.reshape(pair, (q, self.d_model // 4)))
        return self.norm(self.proj(ops.concat(feats, axis=1)))

"""Multi-scale deformable attention and factorized self-attention.

Deformable attention gathers K bilinear samples per head per feature
level at locations offset from a per-query reference point; attention
weights are softmax-normalized jointly over the L*K sampling slots of
each head. Offsets and weights are linear functions of the query
content only. Factorized self-attention splits composite-query
interaction into an intra-group stage (within one instance's subqueries)
followed by an inter-group stage (across instances at a fixed subquery
position), each with residual connection and LayerNorm.
"""

from __future__ import annotations

import numpy as np

from .engine import Tensor, nn, ops


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention over batched sequences [B, T, d]."""

    def __init__(self, d_model: int, heads: int, rng, dtype: str = "f32"):
        if d_model % heads:
            raise ValueError(f"heads ({heads}) must divide d_model ({d_model})")
        self.heads = heads
        self.d_model = d_model
        self.wq = nn.Linear(d_model, d_model, rng, dtype=dtype)
        self.wk = nn.Linear(d_model, d_model, rng, dtype=dtype)
        self.wv = nn.Linear(d_model, d_model, rng, dtype=dtype)
        self.wo = nn.Linear(d_model, d_model, rng, dtype=dtype)

    def _split(self, x, b, t):
        dh = self.d_model // self.heads
        return ops.transpose(ops.reshape(x, (b, t, self.heads, dh)), (0, 2, 1, 3))

    def __call__(self, queries, keys, values, return_weights=False):
        if queries.ndim != 3 or keys.ndim != 3 or values.ndim != 3:
            raise ValueError("attention inputs must be [B, T, d]")
        if queries.shape[-1] != self.d_model or keys.shape[-1] != self.d_model:
            raise ValueError(f"expected model width {self.d_model}")
        b, tq, _ = queries.shape
        tk = keys.shape[1]
        dh = self.d_model // self.heads
        qh = self._split(self.wq(queries), b, tq)
        kh = self._split(self.wk(keys), b, tk)
        vh = self._split(self.wv(values), b, tk)
        scores = ops.matmul(qh, ops.transpose(kh, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
        attn = ops.softmax(scores, axis=-1)
        mixed = ops.matmul(attn, vh)
        out = ops.reshape(ops.transpose(mixed, (0, 2, 1, 3)), (b, tq, self.d_model))
        out = self.wo(out)
        if return_weights:
            return out, attn
        return out


class FactorizedSelfAttention(nn.Module):
    """Intra-group then inter-group self-attention over [Q, N, d] queries."""

    def __init__(self, d_model: int, heads: int, rng, dtype: str = "f32"):
        self.intra = MultiHeadAttention(d_model, heads, rng, dtype=dtype)
        self.norm_intra = nn.LayerNorm(d_model, dtype=dtype)
        self.inter = MultiHeadAttention(d_model, heads, rng, dtype=dtype)
        self.norm_inter = nn.LayerNorm(d_model, dtype=dtype)

    def intra_stage(self, x):
        """Self-attention within each instance's subqueries (instances batched)."""
        return self.norm_intra(x + self.intra(x, x, x))

    def inter_stage(self, x):
        """Self-attention across instances at each subquery position."""
        xt = ops.transpose(x, (1, 0, 2))
        xt = self.norm_inter(xt + self.inter(xt, xt, xt))
        return ops.transpose(xt, (1, 0, 2))

    def __call__(self, x):
        if x.ndim != 3:
            raise ValueError(f"composite queries must be [Q, N, d], got {x.shape}")
        return self.inter_stage(self.intra_stage(x))


class MSDeformAttention(nn.Module):
    """One multi-scale deformable attention layer (heads H, levels L, points K)."""

    def __init__(self, d_model: int, heads: int, levels: int, points: int, rng,
                 dtype: str = "f32"):
        if d_model % heads:
            raise ValueError(f"heads ({heads}) must divide d_model ({d_model})")
        self.d_model = d_model
        self.heads = heads
        self.levels = levels
        self.points = points
        self.value_proj = nn.Linear(d_model, d_model, rng, dtype=dtype)
        self.out_proj = nn.Linear(d_model, d_model, rng, dtype=dtype)
        self.offset_head = nn.Linear(d_model, heads * levels * points * 2, rng,
                                     dtype=dtype)
        self.weight_head = nn.Linear(d_model, heads * levels * points, rng,
                                     dtype=dtype)
        self._init_sampling_heads()
        self.sample_count = 0  # bilinear samples taken, for accounting tests

    def _init_sampling_heads(self):
        """Zero both heads' weights; bias the offsets into a star pattern.

        Head h starts aiming along angle 2*pi*h/H, point k at radius k+1
        (level pixel units), so early training sees a spread of sampling
        locations around each reference point.
        """
        h, l, k = self.heads, self.levels, self.points
        self.offset_head.w.data[:] = 0
        self.weight_head.w.data[:] = 0
        self.weight_head.b.data[:] = 0
        thetas = 2.0 * np.pi * np.arange(h) / h
        grid = np.stack([np.cos(thetas), np.sin(thetas)], axis=-1)
        grid /= np.abs(grid).max(axis=-1, keepdims=True)
        bias = np.tile(grid[:, None, None, :], (1, l, k, 1))
        bias *= (np.arange(k) + 1.0)[None, None, :, None]
        self.offset_head.b.data[:] = bias.reshape(-1).astype(
            self.offset_head.b.data.dtype)

    def sampling_terms(self, queries):
        """Per-query offsets [Nq,H,L,K,2] and softmaxed weights [Nq,H,L,K]."""
        nq = queries.shape[0]
        h, l, k = self.heads, self.levels, self.points
        offsets = ops.reshape(self.offset_head(queries), (nq, h, l, k, 2))
        logits = ops.reshape(self.weight_head(queries), (nq, h, l * k))
        weights = ops.reshape(ops.softmax(logits, axis=-1), (nq, h, l, k))
        return offsets, weights

    def __call__(self, queries, reference_points, memory, shapes):
        """Attend from [Nq, d] queries into flattened multi-level memory.

        ``memory`` is [T, d] with the L levels' row-major pixels
        concatenated; ``shapes`` lists the (h, w) of each level;
        ``reference_points`` is [Nq, 2] in normalized coordinates.
        """
        if len(shapes) != self.levels:
            raise ValueError(f"expected {self.levels} levels, got {len(shapes)}")
        total = sum(hh * ww for hh, ww in shapes)
        if memory.shape != (total, self.d_model):
            raise ValueError(
                f"memory shape {memory.shape} does not match levels {shapes}")
        reference_points = ops.as_tensor(reference_points, like=memory)
        nq = queries.shape[0]
        if reference_points.shape != (nq, 2):
            raise ValueError(
                f"reference points must be [{nq}, 2], got {reference_points.shape}")
        h = self.heads
        dh = self.d_model // h

        value = self.value_proj(memory)
        offsets, weights = self.sampling_terms(queries)
        offsets = ops.transpose(offsets, (1, 2, 0, 3, 4))   # [H, L, Nq, K, 2]
        weights = ops.transpose(weights, (1, 2, 0, 3))      # [H, L, Nq, K]
        ref = ops.reshape(reference_points, (1, nq, 1, 2))

        acc = None
        start = 0
        for lvl, (lh, lw) in enumerate(shapes):
            seg = value[start:start + lh * lw]
            start += lh * lw
            value_l = ops.transpose(ops.reshape(seg, (lh, lw, h, dh)), (2, 3, 0, 1))
            inv_scale = Tensor(np.array([1.0 / lw, 1.0 / lh]), dtype=memory.dtype)
            loc = ref + offsets[:, lvl] * inv_scale        # [H, Nq, K, 2]
            sampled = ops.bilinear_sample(value_l, ops.reshape(loc, (h, nq * self.points, 2)))
            self.sample_count += h * nq * self.points
            sampled = ops.reshape(sampled, (h, nq, self.points, dh))
            w_l = ops.reshape(weights[:, lvl], (h, nq, self.points, 1))
            term = ops.tsum(sampled * w_l, axis=2)          # [H, Nq, dh]
            acc = term if acc is None else acc + term
        out = ops.reshape(ops.transpose(acc, (1, 0, 2)), (nq, self.d_model))
        return self.out_proj(out)


def flatten_pyramid(pyramid):
    """[d, H_l, W_l] level maps -> (tokens [T, d], shapes [(H_l, W_l)])."""
    tokens = []
    shapes = []
    for level in pyramid:
        if level.ndim != 3:
            raise ValueError(f"pyramid level must be [d, H, W], got {level.shape}")
        d, lh, lw = level.shape
        shapes.append((lh, lw))
        tokens.append(ops.reshape(ops.transpose(level, (1, 2, 0)), (lh * lw, d)))
    return ops.concat(tokens, axis=0), shapes


def ms_deform_attn(queries, reference_points, pyramid, layer: MSDeformAttention):
    """Apply a deformable layer directly to a feature pyramid."""
    memory, shapes = flatten_pyramid(pyramid)
    return layer(queries, reference_points, memory, shapes)

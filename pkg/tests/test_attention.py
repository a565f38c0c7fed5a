"""Deformable attention (weights, sampling, gradients) and factorized attention."""

import numpy as np
import pytest

from gradcheck import check_gradients
from textspot.attention import (FactorizedSelfAttention, MSDeformAttention,
                                MultiHeadAttention, flatten_pyramid,
                                ms_deform_attn)
from textspot.engine import Tensor, ops


def t64(arr, grad=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad, dtype="f64")


def random_pyramid(rng, d, shapes):
    return [t64(rng.normal(size=(d, h, w))) for h, w in shapes]


class TestMultiHeadAttention:
    def test_single_kv_pair_returns_projected_value(self):
        rng = np.random.default_rng(0)
        mha = MultiHeadAttention(16, 4, rng, dtype="f64")
        q = t64(rng.normal(size=(1, 5, 16)))
        kv = t64(rng.normal(size=(1, 1, 16)))
        out = mha(q, kv, kv)
        expected = mha.wo(mha.wv(kv)).data[0, 0]
        for row in out.data[0]:
            np.testing.assert_allclose(row, expected, atol=1e-12)

    def test_identical_keys_uniform_weights(self):
        rng = np.random.default_rng(1)
        mha = MultiHeadAttention(8, 2, rng, dtype="f64")
        q = t64(rng.normal(size=(1, 3, 8)))
        key = rng.normal(size=8)
        k = t64(np.tile(key, (1, 6, 1)))
        _, attn = mha(q, k, t64(rng.normal(size=(1, 6, 8))), return_weights=True)
        np.testing.assert_allclose(attn.data, 1.0 / 6.0, atol=1e-12)

    def test_weights_sum_to_one(self):
        rng = np.random.default_rng(2)
        mha = MultiHeadAttention(8, 4, rng, dtype="f64")
        x = t64(rng.normal(size=(2, 7, 8)))
        _, attn = mha(x, x, x, return_weights=True)
        np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_head_count_must_divide(self):
        with pytest.raises(ValueError, match="divide"):
            MultiHeadAttention(10, 3, np.random.default_rng(0))


class TestFactorizedSelfAttention:
    def test_intra_stage_instance_independence(self):
        rng = np.random.default_rng(3)
        fsa = FactorizedSelfAttention(8, 2, rng, dtype="f64")
        x = rng.normal(size=(4, 5, 8))
        base = fsa.intra_stage(t64(x)).data
        modified = x.copy()
        modified[2] += rng.normal(size=(5, 8))
        out = fsa.intra_stage(t64(modified)).data
        for i in (0, 1, 3):
            np.testing.assert_allclose(out[i], base[i], atol=1e-12)
        assert not np.allclose(out[2], base[2])

    def test_inter_stage_position_independence(self):
        rng = np.random.default_rng(4)
        fsa = FactorizedSelfAttention(8, 2, rng, dtype="f64")
        x = rng.normal(size=(4, 5, 8))
        base = fsa.inter_stage(t64(x)).data
        modified = x.copy()
        modified[:, 3] += rng.normal(size=(4, 8))
        out = fsa.inter_stage(t64(modified)).data
        for j in (0, 1, 2, 4):
            np.testing.assert_allclose(out[:, j], base[:, j], atol=1e-12)

    def test_single_instance_inter_stage_closed_form(self):
        # with Q=1 the inter stage sees one token: attention output is the
        # value path wo(wv(x)), then residual + norm
        rng = np.random.default_rng(5)
        fsa = FactorizedSelfAttention(8, 2, rng, dtype="f64")
        x = t64(rng.normal(size=(1, 6, 8)))
        out = fsa.inter_stage(x).data
        expected = fsa.norm_inter(x + fsa.inter.wo(fsa.inter.wv(x))).data
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_gradcheck_through_both_stages(self):
        rng = np.random.default_rng(6)
        fsa = FactorizedSelfAttention(4, 2, rng, dtype="f64")
        x = t64(rng.normal(size=(2, 3, 4)), grad=True)
        probe = rng.normal(size=(2, 3, 4))
        check_gradients(lambda x: ops.tsum(fsa(x) * probe), [x], tol=2e-4)


class TestMSDeformAttention:
    def test_degenerate_identity_returns_bilinear_sample(self):
        # H=1, K=1, L=1, zero offsets, single weight, identity projections
        rng = np.random.default_rng(7)
        layer = MSDeformAttention(4, 1, 1, 1, rng, dtype="f64")
        layer.offset_head.w.data[:] = 0
        layer.offset_head.b.data[:] = 0
        layer.value_proj.w.data[:] = np.eye(4)
        layer.value_proj.b.data[:] = 0
        layer.out_proj.w.data[:] = np.eye(4)
        layer.out_proj.b.data[:] = 0
        pyramid = random_pyramid(rng, 4, [(5, 6)])
        refs = t64(rng.uniform(0.2, 0.8, size=(3, 2)))
        queries = t64(rng.normal(size=(3, 4)))
        out = ms_deform_attn(queries, refs, pyramid, layer)
        direct = ops.bilinear_sample(pyramid[0], refs)
        np.testing.assert_allclose(out.data, direct.data, atol=1e-12)

    def test_weight_normalization_per_query_head(self):
        rng = np.random.default_rng(8)
        layer = MSDeformAttention(16, 8, 3, 4, rng, dtype="f64")
        layer.weight_head.w.data[:] = rng.normal(size=layer.weight_head.w.shape)
        layer.weight_head.b.data[:] = rng.normal(size=layer.weight_head.b.shape)
        queries = t64(rng.normal(size=(5, 16)))
        _, weights = layer.sampling_terms(queries)
        np.testing.assert_allclose(weights.data.sum(axis=(2, 3)), 1.0, atol=1e-6)

    def test_permuting_sampling_slots_with_logits_is_invariant(self):
        rng = np.random.default_rng(9)
        d, h, l, k = 8, 2, 1, 3
        layer = MSDeformAttention(d, h, l, k, rng, dtype="f64")
        layer.offset_head.w.data[:] = rng.normal(size=layer.offset_head.w.shape) * 0.5
        layer.offset_head.b.data[:] = rng.normal(size=layer.offset_head.b.shape)
        layer.weight_head.w.data[:] = rng.normal(size=layer.weight_head.w.shape)
        layer.weight_head.b.data[:] = rng.normal(size=layer.weight_head.b.shape)
        pyramid = random_pyramid(rng, d, [(6, 7)])
        refs = t64(rng.uniform(0.2, 0.8, size=(4, 2)))
        queries = t64(rng.normal(size=(4, d)))
        base = ms_deform_attn(queries, refs, pyramid, layer).data

        perm = np.array([2, 0, 1])
        off_w = layer.offset_head.w.data.reshape(d, h, l, k, 2)
        off_b = layer.offset_head.b.data.reshape(h, l, k, 2)
        wgt_w = layer.weight_head.w.data.reshape(d, h, l, k)
        wgt_b = layer.weight_head.b.data.reshape(h, l, k)
        layer.offset_head.w.data = off_w[:, :, :, perm].reshape(d, -1).copy()
        layer.offset_head.b.data = off_b[:, :, perm].reshape(-1).copy()
        layer.weight_head.w.data = wgt_w[:, :, :, perm].reshape(d, -1).copy()
        layer.weight_head.b.data = wgt_b[:, :, perm].reshape(-1).copy()
        permuted = ms_deform_attn(queries, refs, pyramid, layer).data
        np.testing.assert_allclose(permuted, base, atol=1e-12)

    def test_sample_count_accounting(self):
        rng = np.random.default_rng(10)
        h, l, k, nq = 8, 3, 4, 7
        layer = MSDeformAttention(16, h, l, k, rng, dtype="f64")
        pyramid = random_pyramid(rng, 16, [(8, 8), (4, 4), (2, 2)])
        queries = t64(rng.normal(size=(nq, 16)))
        refs = t64(rng.uniform(0.1, 0.9, size=(nq, 2)))
        layer.sample_count = 0
        ms_deform_attn(queries, refs, pyramid, layer)
        assert layer.sample_count == h * l * k * nq

    def test_level_count_mismatch_rejected(self):
        rng = np.random.default_rng(11)
        layer = MSDeformAttention(8, 2, 2, 2, rng, dtype="f64")
        pyramid = random_pyramid(rng, 8, [(4, 4)])
        with pytest.raises(ValueError, match="levels"):
            ms_deform_attn(t64(rng.normal(size=(2, 8))),
                           t64(np.full((2, 2), 0.5)), pyramid, layer)

    def test_reference_shape_mismatch_rejected(self):
        rng = np.random.default_rng(12)
        layer = MSDeformAttention(8, 2, 1, 2, rng, dtype="f64")
        pyramid = random_pyramid(rng, 8, [(4, 4)])
        with pytest.raises(ValueError, match="reference points"):
            ms_deform_attn(t64(rng.normal(size=(2, 8))),
                           t64(np.full((3, 2), 0.5)), pyramid, layer)

    def test_full_config_gradients_match_finite_differences(self):
        rng = np.random.default_rng(13)
        d, h, l, k = 16, 8, 3, 4
        layer = MSDeformAttention(d, h, l, k, rng, dtype="f64")
        # non-trivial sampling heads so their gradients are exercised
        layer.offset_head.w.data[:] = rng.normal(size=layer.offset_head.w.shape) * 0.3
        layer.weight_head.w.data[:] = rng.normal(size=layer.weight_head.w.shape) * 0.3
        pyramid = random_pyramid(rng, d, [(7, 9), (4, 5), (2, 3)])
        memory, shapes = flatten_pyramid(pyramid)
        memory = memory.detach()
        memory.requires_grad = True
        queries = t64(rng.normal(size=(3, d)), grad=True)
        refs = t64(rng.uniform(0.25, 0.75, size=(3, 2)), grad=True)
        probe = rng.normal(size=(3, d))

        def fn(queries, refs, memory, off_w, val_w):
            return ops.tsum(layer(queries, refs, memory, shapes) * probe)

        # floor=1e-4: elements with near-zero true gradient (softmax tails)
        # sit below what central differences can resolve at this h
        check_gradients(
            fn,
            [queries, refs, memory, layer.offset_head.w, layer.value_proj.w],
            h=1e-5, tol=1e-4, max_elements=60, rng=rng, floor=1e-4)

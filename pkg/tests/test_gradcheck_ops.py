"""Finite-difference gradient soundness for every differentiable op.

Each op gets >= 20 randomized instances checked against f64 central
differences at relative error < 1e-4. Inputs are kept away from kinks
(relu/abs zeros, clamp edges, bilinear grid lines) where the derivative
is not defined.
"""

import numpy as np
import pytest

from gradcheck import check_gradients
from textspot.engine import Tensor, ops

N_INSTANCES = 20


def t64(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True, dtype="f64")


def random_away_from(rng, shape, forbidden=0.0, margin=0.05):
    x = rng.normal(size=shape)
    x = np.where(np.abs(x - forbidden) < margin, x + 2 * margin, x)
    return x


@pytest.mark.parametrize("trial", range(N_INSTANCES))
def test_elementwise_binary(trial):
    rng = np.random.default_rng(100 + trial)
    shape = tuple(rng.integers(1, 5, size=2))
    a = t64(rng.normal(size=shape))
    b = t64(random_away_from(rng, shape))

    def fn(a, b):
        s = a * b + a - b
        q = s / (ops.absolute(b) + 1.5)
        return ops.tsum(q * q)

    check_gradients(fn, [a, b])


@pytest.mark.parametrize("trial", range(N_INSTANCES))
def test_matmul(trial):
    rng = np.random.default_rng(200 + trial)
    n, k, m = rng.integers(1, 5, size=3)
    a = t64(rng.normal(size=(n, k)))
    b = t64(rng.normal(size=(k, m)))
    check_gradients(lambda a, b: ops.tsum(ops.matmul(a, b) ** 2.0), [a, b])


@pytest.mark.parametrize("trial", range(N_INSTANCES))
def test_scalar_functions(trial):
    rng = np.random.default_rng(300 + trial)
    x = t64(rng.uniform(0.2, 2.0, size=(3, 4)))

    def fn(x):
        y = ops.log(x) + ops.exp(-x) + ops.sqrt(x) + ops.sin(x) * ops.cos(x)
        return ops.tsum(ops.sigmoid(y))

    check_gradients(fn, [x])


@pytest.mark.parametrize("trial", range(N_INSTANCES))
def test_relu_and_abs_off_kink(trial):
    rng = np.random.default_rng(400 + trial)
    x = t64(random_away_from(rng, (4, 4)))
    check_gradients(lambda x: ops.tsum(ops.relu(x) + 0.5 * ops.absolute(x)), [x])


@pytest.mark.parametrize("trial", range(N_INSTANCES))
def test_min_max_clamp_off_ties(trial):
    rng = np.random.default_rng(500 + trial)
    a = rng.normal(size=(3, 3))
    b = a + np.where(rng.normal(size=(3, 3)) > 0, 0.3, -0.3)
    ta, tb = t64(a), t64(b)

    def fn(a, b):
        y = ops.maximum(a, b) - ops.minimum(a, b) + ops.clamp(a, -0.8, 0.8)
        return ops.tsum(y * y)

    check_gradients(fn, [ta, tb])


@pytest.mark.parametrize("trial", range(N_INSTANCES))
def test_softmax_and_log_softmax(trial):
    rng = np.random.default_rng(600 + trial)
    x = t64(rng.normal(size=(3, 5)))
    w = t64(rng.normal(size=(3, 5)))

    def fn(x, w):
        return ops.tsum(ops.softmax(x, axis=1) * w) + \
            ops.tsum(ops.log_softmax(x, axis=0) * w)

    check_gradients(fn, [x, w])


@pytest.mark.parametrize("trial", range(N_INSTANCES))
def test_inverse_sigmoid_interior(trial):
    rng = np.random.default_rng(700 + trial)
    x = t64(rng.uniform(0.05, 0.95, size=(6,)))
    check_gradients(lambda x: ops.tsum(ops.inverse_sigmoid(x) ** 2.0), [x])


@pytest.mark.parametrize("trial", range(N_INSTANCES))
def test_layer_norm(trial):
    rng = np.random.default_rng(800 + trial)
    x = t64(rng.normal(size=(3, 8)))
    gamma = t64(rng.uniform(0.5, 1.5, size=8))
    beta = t64(rng.normal(size=8))

    def fn(x, gamma, beta):
        return ops.tsum(ops.layer_norm(x, gamma, beta) ** 2.0)

    check_gradients(fn, [x, gamma, beta], tol=2e-4)


@pytest.mark.parametrize("trial", range(N_INSTANCES))
def test_reshape_transpose_concat_slice(trial):
    rng = np.random.default_rng(900 + trial)
    a = t64(rng.normal(size=(2, 6)))
    b = t64(rng.normal(size=(3, 6)))

    def fn(a, b):
        c = ops.concat([a, b], axis=0)
        d = ops.transpose(ops.reshape(c, (5, 3, 2)), (2, 0, 1))
        e = d[:, 1:4, :]
        return ops.tsum(e * e) + ops.tsum(ops.stack([a.mean(), b.mean()]))

    check_gradients(fn, [a, b])


@pytest.mark.parametrize("trial", range(N_INSTANCES))
def test_gather_and_reductions(trial):
    rng = np.random.default_rng(1000 + trial)
    x = t64(rng.normal(size=(5, 3)))
    idx = rng.integers(0, 5, size=4)

    def fn(x):
        g = ops.gather(x, idx, axis=0)
        return ops.tsum(g.mean(axis=1) ** 2.0) + x.sum() * 0.1

    check_gradients(fn, [x])


@pytest.mark.parametrize("trial", range(N_INSTANCES))
def test_conv2d(trial):
    rng = np.random.default_rng(1100 + trial)
    stride = int(rng.integers(1, 3))
    x = t64(rng.normal(size=(2, 6, 7)))
    w = t64(rng.normal(size=(3, 2, 3, 3)) * 0.5)
    b = t64(rng.normal(size=3))

    def fn(x, w, b):
        return ops.tsum(ops.conv2d(x, w, b, stride=stride, padding=1) ** 2.0)

    check_gradients(fn, [x, w, b], max_elements=40, rng=rng)


@pytest.mark.parametrize("trial", range(N_INSTANCES))
def test_bilinear_sample_feature_and_locations(trial):
    rng = np.random.default_rng(1200 + trial)
    c, h, w = 3, 5, 6
    f = t64(rng.normal(size=(c, h, w)))
    # keep fractional parts >= 1e-3 from integer grid lines (kinks)
    px = rng.uniform(-1.0, w, size=(7,))
    py = rng.uniform(-1.0, h, size=(7,))
    px = np.where(np.abs(px - np.round(px)) < 5e-3, px + 0.01, px)
    py = np.where(np.abs(py - np.round(py)) < 5e-3, py + 0.01, py)
    loc = t64(np.stack([(px + 0.5) / w, (py + 0.5) / h], axis=-1))
    coef = np.arange(1.0, 7 * c + 1).reshape(7, c)

    def fn(f, loc):
        return ops.tsum(ops.bilinear_sample(f, loc) * coef)

    check_gradients(fn, [f, loc], h=1e-5)


@pytest.mark.parametrize("trial", range(N_INSTANCES))
def test_composite_graph(trial):
    """matmul -> layer_norm -> softmax -> sum, randomized."""
    rng = np.random.default_rng(1300 + trial)
    x = t64(rng.normal(size=(4, 6)))
    w = t64(rng.normal(size=(6, 8)))
    gamma = t64(rng.uniform(0.5, 1.5, size=8))
    beta = t64(rng.normal(size=8))
    probe = rng.normal(size=(4, 8))

    def fn(x, w, gamma, beta):
        y = ops.layer_norm(ops.matmul(x, w), gamma, beta)
        return ops.tsum(ops.softmax(y, axis=-1) * probe)

    check_gradients(fn, [x, w, gamma, beta], tol=2e-4)

import math

import numpy as np
import pytest

from gmetafl import nn
from gmetafl.nn import Batch, DimensionError, HessianTooLargeError, MLPSpec, QuadraticSpec


def central_diff(f, w, eps=1e-6):
    g = np.zeros_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = eps
        g[i] = (f(w + e) - f(w - e)) / (2 * eps)
    return g


def test_gradient_matches_finite_differences(small_mlp):
    spec, client, w = small_mlp
    g = nn.grad(spec, w, client.train)
    fd = central_diff(lambda v: nn.loss(spec, v, client.train), w)
    assert np.linalg.norm(g - fd) <= 1e-7 * np.linalg.norm(fd)


def test_hvp_matches_gradient_differences(small_mlp):
    spec, client, w = small_mlp
    v = np.random.default_rng(3).standard_normal(w.size)
    eps = 1e-5
    fd = (nn.grad(spec, w + eps * v, client.train) - nn.grad(spec, w - eps * v, client.train)) / (2 * eps)
    hv = nn.hvp(spec, w, v, client.train)
    assert np.linalg.norm(hv - fd) <= 1e-6 * np.linalg.norm(fd)


def test_dense_hessian_symmetric_and_consistent_with_hvp(small_mlp):
    spec, client, w = small_mlp
    H = nn.dense_hessian(spec, w, client.train)
    assert np.abs(H - H.T).max() <= 1e-12 * max(1.0, np.abs(H).max())
    v = np.random.default_rng(4).standard_normal(w.size)
    np.testing.assert_allclose(H @ v, nn.hvp(spec, w, v, client.train), rtol=1e-10, atol=1e-12)


def test_dense_hessian_refuses_large_models(small_mlp):
    spec, client, w = small_mlp
    with pytest.raises(HessianTooLargeError):
        nn.dense_hessian(spec, w, client.train, cap=spec.dim - 1)


def test_batch_mean_convention(small_mlp):
    spec, client, w = small_mlp
    a = Batch(client.train.inputs[:20], client.train.labels[:20])
    b = Batch(client.train.inputs[20:], client.train.labels[20:])
    both = Batch.concat(a, b)
    np.testing.assert_allclose(nn.grad(spec, w, both), 0.5 * (nn.grad(spec, w, a) + nn.grad(spec, w, b)),
                               rtol=1e-12, atol=1e-14)
    G = nn.per_sample_grads(spec, w, both)
    np.testing.assert_allclose(G.mean(axis=0), nn.grad(spec, w, both), rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(nn.per_sample_losses(spec, w, both).mean(), nn.loss(spec, w, both))


def test_hand_computed_two_by_two_network():
    # layer order: W1 (out, in), b1, W2, b2
    spec = MLPSpec(2, (2,), 2)
    W1 = np.array([[1.0, 0.0], [0.0, 2.0]])
    b1 = np.array([0.0, 0.5])
    W2 = np.array([[1.0, -1.0], [0.5, 0.0]])
    b2 = np.array([0.1, 0.0])
    w = np.concatenate([W1.ravel(), b1, W2.ravel(), b2])
    x = [0.3, -0.4]
    h1, h2 = math.tanh(0.3), math.tanh(2 * -0.4 + 0.5)
    z0, z1 = h1 - h2 + 0.1, 0.5 * h1
    np.testing.assert_allclose(nn.logits(spec, w, np.array([x]))[0], [z0, z1], rtol=1e-14)
    expected_loss = math.log(math.exp(z0) + math.exp(z1)) - z1
    assert nn.loss(spec, w, Batch(np.array([x]), np.array([1]))) == pytest.approx(expected_loss, rel=1e-13)


def test_init_is_deterministic_and_scaled():
    spec = MLPSpec(100, (50,), 10)
    a, b = nn.init_params(spec, 7), nn.init_params(spec, 7)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, nn.init_params(spec, 8).values)
    W1 = a.unflatten()[0]
    assert W1.shape == (50, 100)
    assert W1.std() == pytest.approx(0.1, rel=0.05)
    assert np.all(a.unflatten()[1] == 0)


def test_dimension_errors(small_mlp):
    spec, client, w = small_mlp
    with pytest.raises(DimensionError):
        nn.grad(spec, w[:-1], client.train)
    with pytest.raises(DimensionError):
        nn.grad(spec, w, Batch(np.zeros((2, 5)), np.zeros(2)))
    with pytest.raises(DimensionError):
        nn.grad(spec, w, Batch(np.zeros((2, 4)), np.array([0, 3])))
    with pytest.raises(DimensionError):
        nn.hvp(spec, w, np.ones(3), client.train)


def test_quadratic_model():
    A = np.array([[2.0, 0.5], [0.5, 1.0]])
    b = np.array([1.0, -1.0])
    spec = QuadraticSpec(A, b)
    w = np.array([0.3, 0.7])
    batch = Batch(np.zeros((1, 1)), np.zeros(1))
    assert nn.loss(spec, w, batch) == pytest.approx(0.5 * w @ A @ w + b @ w)
    np.testing.assert_allclose(nn.grad(spec, w, batch), A @ w + b)
    np.testing.assert_allclose(nn.dense_hessian(spec, w, batch), A)
    with pytest.raises(ValueError):
        QuadraticSpec(np.array([[1.0, 2.0], [0.0, 1.0]]), np.zeros(2))


def test_mlp_spec_dimension():
    spec = MLPSpec(3072, (80, 60), 10)
    assert spec.dim == 3072 * 80 + 80 + 80 * 60 + 60 + 60 * 10 + 10

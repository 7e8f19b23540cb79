import numpy as np
from hypothesis import given, strategies as st

from geomatch import autodiff as ad
from geomatch.consistency import confidence_scores, encode_confidence, fosc_matrix
from geomatch.core import random_rigid
from geomatch.pipeline import ModelWeights


def alpha(G, log_sigma=0.0):
    return confidence_scores(G, log_sigma).data


def test_rigid_image_gives_zero(rng):
    X = rng.normal(size=(15, 3))
    assert np.array_equal(fosc_matrix(X, X), np.zeros((15, 15)))
    G = fosc_matrix(X, random_rigid(1).apply(X))
    assert np.abs(G).max() < 1e-12


def test_three_point_hand_values():
    X = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
    Y = np.array([[0.0, 0, 0], [1, 0, 0], [0, 2, 0]])
    G = fosc_matrix(X, Y)
    assert G[0, 1] == 0.0
    assert np.isclose(G[0, 2], 1.0, atol=1e-15)
    assert np.isclose(G[1, 2], np.sqrt(5) - np.sqrt(2), atol=1e-15)
    a = alpha(G)
    scalar = [np.mean([np.exp(-G[i, j]) for j in range(3)]) for i in range(3)]
    assert np.allclose(a, scalar, atol=1e-15)
    assert np.allclose(a, [0.7893, 0.8132, 0.6025], atol=1e-3)


def test_zero_G_all_ones():
    assert np.array_equal(alpha(np.zeros((4, 4))), np.ones(4))


def test_single_outlier_is_minimum(rng):
    X = rng.normal(size=(6, 3))
    Y = random_rigid(3).apply(X)
    Y[3] += np.array([0.8, -0.5, 0.6])
    a = alpha(fosc_matrix(X, Y))
    assert np.argmin(a) == 3 and np.sum(a == a.min()) == 1


@given(st.integers(0, 2**31 - 1))
def test_invariant_under_independent_motions(seed):
    r = np.random.default_rng(seed)
    X, Y = r.normal(size=(10, 3)), r.normal(size=(10, 3))
    G = fosc_matrix(X, Y)
    G2 = fosc_matrix(random_rigid(r, 180, 3).apply(X), random_rigid(r, 180, 3).apply(Y))
    assert np.abs(G - G2).max() <= 1e-9


@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(0.01, 2))
def test_alpha_non_increasing_in_sigma(seed, log_sigma, step):
    G = np.abs(np.random.default_rng(seed).normal(size=(6, 6)))
    assert np.all(alpha(G, log_sigma + step) <= alpha(G, log_sigma))


def test_confidence_gradient_reaches_log_sigma(rng):
    G = np.abs(rng.normal(size=(5, 5)))
    ls = ad.Tensor(np.array([0.3]))
    assert ad.grad_check(lambda t: ad.sum_reduce(confidence_scores(G, t)), ls) < 1e-6


def test_identical_alpha_identical_rows():
    w = ModelWeights.init(16, 0, np.float64)
    h = encode_confidence(ad.Tensor(np.array([0.4, 0.9, 0.4, 0.1])), w).data
    assert h.shape == (4, 16)
    assert np.array_equal(h[0], h[2])

import numpy as np
import pytest
from hypothesis import given, strategies as st

from geomatch import autodiff as ad
from geomatch.core import DegenerateGeometryError, RigidTransform, gt_correspondences, random_rigid
from geomatch.registration import rre_deg
from geomatch.reposition import (
    fuse_pair_features,
    score_argmax_match,
    solve_rigid,
    warp_and_match,
    weighted_procrustes,
)


def test_recovers_transform_from_peaked_scores(rng):
    X = rng.normal(size=(30, 3))
    T = random_rigid(5, 90.0, 1.0)
    T_est = weighted_procrustes(X, T.apply(X), 100.0 * np.eye(30))
    assert rre_deg(T_est.rotation, T.rotation) < 1e-4


def test_uniform_scores_identity(rng):
    X = rng.normal(size=(10, 3))
    T = weighted_procrustes(X, X, np.zeros((10, 10)))
    assert np.allclose(T.rotation, np.eye(3)) and np.allclose(T.translation, 0, atol=1e-12)


def test_reflection_trap():
    r = np.random.default_rng(0)
    X = np.c_[r.normal(size=(20, 2)), np.zeros(20)]
    Y = X * np.array([1.0, 1.0, -1.0])
    Y = Y * np.array([-1.0, 1.0, 1.0])  # mirrored in-plane
    T = solve_rigid(X, Y)
    assert np.isclose(np.linalg.det(T.rotation), 1.0)


def test_collinear_raises():
    X = np.zeros((5, 3))
    X[:, 0] = np.arange(5.0)
    with pytest.raises(DegenerateGeometryError):
        solve_rigid(X, X)
    with pytest.raises(DegenerateGeometryError):
        solve_rigid(X[:2], X[:2])


def test_det_positive_including_near_planar():
    r = np.random.default_rng(7)
    for i in range(1000):
        X = r.normal(size=(12, 3))
        if i % 2:
            X[:, 2] *= 1e-6
        Y = r.normal(size=(12, 3))
        assert np.linalg.det(solve_rigid(X, Y).rotation) > 0


@given(st.integers(0, 2**31 - 1))
def test_soft_procrustes_exact_on_concentrated_bijection(seed):
    r = np.random.default_rng(seed)
    X = r.normal(size=(25, 3))
    T = random_rigid(r, 180.0, 1.0)
    perm = r.permutation(25)
    Y = np.empty_like(X)
    Y[perm] = T.apply(X)
    S = np.full((25, 25), -30.0)
    S[np.arange(25), perm] = 0.0
    P = np.exp(S - S.max(1, keepdims=True))
    assert (P / P.sum(1, keepdims=True)).max(1).min() >= 0.999
    T_est = weighted_procrustes(X, Y, S)
    assert rre_deg(T_est.rotation, T.rotation) < 1e-6
    assert np.linalg.norm(T_est.translation - T.translation) < 1e-9


def test_warp_and_match_examples(rng):
    X = rng.normal(size=(20, 3))
    T = random_rigid(2)
    perm = rng.permutation(20)
    Y = T.apply(X)[perm]
    m = warp_and_match(X, Y, T)
    assert np.array_equal(perm[m.src_to_tgt], np.arange(20))
    assert m.source == "warp"
    gt, _ = gt_correspondences(X, Y, T, 1e-6)
    assert np.array_equal(m.src_to_tgt[gt.src], gt.tgt)

    single = warp_and_match(X, np.ones((1, 3)), RigidTransform.identity())
    assert np.array_equal(single.src_to_tgt, np.zeros(20))


def test_warp_and_match_oracle(rng):
    X, Y = rng.normal(size=(6, 3)), rng.normal(size=(7, 3))
    T = random_rigid(4)
    m = warp_and_match(X, Y, T)
    W = T.apply(X)
    for i in range(6):
        assert m.src_to_tgt[i] == np.argmin([np.linalg.norm(W[i] - y) for y in Y])
    for j in range(7):
        assert m.tgt_to_src[j] == np.argmin([np.linalg.norm(Y[j] - w) for w in W])


def test_score_argmax_flag():
    m = score_argmax_match(np.array([[0.1, 0.9], [0.7, 0.2]]))
    assert m.source == "score_argmax"
    assert m.src_to_tgt.tolist() == [1, 0] and m.tgt_to_src.tolist() == [1, 0]


def test_fuse_projection_halves(rng):
    d = 4
    hs, ht = ad.Tensor(rng.normal(size=(3, d))), ad.Tensor(rng.normal(size=(5, d)))
    idx = np.array([4, 0, 2])
    first = fuse_pair_features(hs, ht, idx, ad.Tensor(np.c_[np.eye(d), np.zeros((d, d))]), ad.Tensor(np.zeros(d)))
    second = fuse_pair_features(hs, ht, idx, ad.Tensor(np.c_[np.zeros((d, d)), np.eye(d)]), ad.Tensor(np.zeros(d)))
    assert np.array_equal(first.data, hs.data)
    assert np.array_equal(second.data, ht.data[idx])

import numpy as np
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from geomatch import autodiff as ad
from geomatch.fusion import dual_softmax, final_scores, matchability_matrix, matchability_scores
from geomatch.pipeline import ModelWeights


def T(x):
    return ad.Tensor(np.asarray(x, dtype=np.float64))


def test_zero_weights_half():
    w = ModelWeights.from_arrays({k: np.zeros_like(v) for k, v in ModelWeights.init(16, 0).arrays().items()}, 16,
                                 np.float64)
    r = np.random.default_rng(0)
    tau = matchability_scores(T(r.normal(size=(5, 16))), T(r.normal(size=(5, 16))), w, "h3x")
    assert np.array_equal(tau.data, np.full(5, 0.5))


def test_matchability_matrix_examples(rng):
    assert np.allclose(matchability_matrix(T([0.5]), T([0.4, 0.8])).data, [[0.2, 0.4]])
    assert np.array_equal(matchability_matrix(T(np.ones(3)), T(np.ones(2))).data, np.ones((3, 2)))
    a, b = rng.uniform(size=3), rng.uniform(size=2)
    M = matchability_matrix(T(a), T(b)).data
    for i in range(3):
        for j in range(2):
            assert M[i, j] == a[i] * b[j]


def test_final_scores_examples(rng):
    assert np.isclose(final_scores(T([[2.3]]), T([[0.6]])).data[0, 0], 0.6)
    assert np.allclose(final_scores(T(np.full((2, 2), 1.7)), T(np.ones((2, 2)))).data, 0.25)
    S_hat, S_m = rng.normal(size=(4, 5)), rng.uniform(size=(4, 5))
    out = final_scores(T(S_hat), T(S_m)).data
    for i in range(4):
        for j in range(5):
            row = np.exp(S_hat[i, j]) / np.exp(S_hat[i]).sum()
            col = np.exp(S_hat[i, j]) / np.exp(S_hat[:, j]).sum()
            assert np.isclose(out[i, j], S_m[i, j] * row * col, rtol=1e-12)


@given(arrays(np.float64, (4, 6), elements=st.floats(-30, 30)),
       arrays(np.float64, 4, elements=st.floats(1e-3, 1 - 1e-3)),
       arrays(np.float64, 6, elements=st.floats(1e-3, 1 - 1e-3)))
def test_score_law(S_hat, tx, ty):
    S = final_scores(T(S_hat), matchability_matrix(T(tx), T(ty))).data
    assert np.all(S < 1) and np.all(S >= 0)
    assert S.sum(1).max() <= 1 + 1e-6 and S.sum(0).max() <= 1 + 1e-6


@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)), st.floats(-10, 10), st.integers(0, 2))
def test_row_shift_leaves_row_softmax(S_hat, c, row):
    shifted = S_hat.copy()
    shifted[row] += c
    a = ad.softmax(T(S_hat), axis=1).data[row]
    b = ad.softmax(T(shifted), axis=1).data[row]
    assert np.allclose(a, b, atol=1e-12)


@given(st.integers(0, 10_000), st.integers(0, 2), st.floats(0.01, 0.5))
def test_monotone_in_tau(seed, row, bump):
    r = np.random.default_rng(seed)
    S_hat, tx, ty = r.normal(size=(3, 4)), r.uniform(0.1, 0.5, 3), r.uniform(size=4)
    before = final_scores(T(S_hat), matchability_matrix(T(tx), T(ty))).data
    tx[row] += bump
    after = final_scores(T(S_hat), matchability_matrix(T(tx), T(ty))).data
    assert np.all(after[row] >= before[row])


def test_dual_softmax_no_matchability(rng):
    S_hat = rng.normal(size=(3, 3))
    assert np.array_equal(final_scores(T(S_hat)).data, dual_softmax(T(S_hat)).data)

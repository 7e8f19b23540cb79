import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from geomatch import autodiff as ad


def weighted_sum(out, seed=99):
    # random projection to a scalar so every output entry matters
    w = np.random.default_rng(seed).normal(size=out.shape)
    return ad.sum_reduce(ad.mul(out, ad.Tensor(w)))


def away_from_kinks(x, margin=1e-3):
    x = x.copy()
    x[np.abs(x) < margin] += 2 * margin
    return x


def distinct(x, margin=1e-3):
    # spread values so max_reduce has no near-ties
    flat = x.reshape(-1)
    order = np.argsort(flat)
    flat[order] = np.sort(flat) + margin * np.arange(flat.size)
    return x


OPS = {
    "add": (lambda a, b: ad.add(a, b), [(3, 4), (4,)]),
    "sub": (lambda a, b: ad.sub(a, b), [(3, 4), (3, 1)]),
    "mul": (lambda a, b: ad.mul(a, b), [(3, 4), (1, 4)]),
    "elementwise_mul": (lambda a, b: ad.elementwise_mul(a, b), [(2, 5), (2, 5)]),
    "neg": (lambda a: ad.neg(a), [(3, 2)]),
    "scale": (lambda a: ad.scale(a, -2.5), [(3, 2)]),
    "relu": (lambda a: ad.relu(a), [(4, 3)]),
    "sigmoid": (lambda a: ad.sigmoid(a), [(4, 3)]),
    "exp": (lambda a: ad.exp(a), [(3, 3)]),
    "log": (lambda a: ad.log(ad.add(ad.mul(a, a), 0.5)), [(3, 3)]),
    "reshape": (lambda a: ad.reshape(a, (6, 2)), [(3, 4)]),
    "transpose": (lambda a: ad.transpose(a), [(3, 4)]),
    "concat": (lambda a, b: ad.concat([a, b], axis=1), [(3, 2), (3, 4)]),
    "take": (lambda a: ad.take(a, np.array([[0, 2], [2, 2], [1, 0]])), [(3, 4)]),
    "matmul": (lambda a, b: ad.matmul(a, b), [(3, 4), (4, 2)]),
    "linear": (lambda x, W, b: ad.linear(x, W, b), [(5, 4), (3, 4), (3,)]),
    "linear_3d": (lambda x, W, b: ad.linear(x, W, b), [(2, 3, 4), (5, 4), (5,)]),
    "sum_reduce": (lambda a: ad.sum_reduce(a, axis=0), [(3, 4)]),
    "mean_reduce": (lambda a: ad.mean_reduce(a, axis=1, keepdims=True), [(3, 4)]),
    "max_reduce": (lambda a: ad.max_reduce(a, axis=1), [(3, 4, 2)]),
    "softmax_row": (lambda a: ad.softmax(a, axis=1), [(3, 4)]),
    "softmax_col": (lambda a: ad.softmax(a, axis=0), [(3, 4)]),
    "group_norm": (lambda a: ad.group_norm(a, groups=8), [(6, 16)]),
    "group_norm_3d": (lambda a: ad.group_norm(a, groups=8), [(4, 3, 16)]),
    "instance_norm": (lambda a: ad.instance_norm(a), [(7, 5)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_grad_check_every_op(name):
    fn, shapes = OPS[name]
    for instance in range(10):
        r = np.random.default_rng(instance)
        inputs = []
        for shape in shapes:
            x = r.normal(size=shape)
            if name == "relu":
                x = away_from_kinks(x)
            if name == "max_reduce":
                x = distinct(x)
            inputs.append(ad.Tensor(x))
        err = ad.grad_check(lambda *ts: weighted_sum(fn(*ts), instance), inputs)
        assert err < 1e-4, (name, instance, err)


def test_softmax_constant_row():
    out = ad.softmax(ad.Tensor(np.full((1, 4), 3.7)), axis=1)
    assert np.allclose(out.data, 0.25)


@given(arrays(np.float64, (3, 5), elements=st.floats(-700, 700)))
def test_softmax_rows_sum_to_one(x):
    out = ad.softmax(ad.Tensor(x), axis=1)
    assert np.abs(out.data.sum(axis=1) - 1).max() <= 1e-6


def test_linear_map_gradient():
    x = np.array([1.0, 2.0, 3.0])
    W = ad.Tensor(np.ones((2, 3)), requires_grad=True)
    loss = ad.sum_reduce(ad.matmul(W, ad.Tensor(x.reshape(3, 1))))
    ad.backward(loss)
    assert np.array_equal(W.grad, np.ones((2, 1)) @ x.reshape(1, 3))


def test_sigmoid_gradient_at_zero():
    x = ad.Tensor(np.zeros(1), requires_grad=True)
    ad.backward(ad.sum_reduce(ad.sigmoid(x)))
    assert x.grad[0] == 0.25


def test_mlp_matches_finite_differences():
    r = np.random.default_rng(0)
    params = [ad.Tensor(r.normal(size=s)) for s in [(6, 4), (6,), (5, 6), (5,), (1, 5), (1,)]]
    x = ad.Tensor(r.normal(size=(8, 4)))

    def loss(W1, b1, W2, b2, W3, b3):
        h = ad.sigmoid(ad.linear(x, W1, b1))
        h = ad.sigmoid(ad.linear(h, W2, b2))
        return ad.mean_reduce(ad.linear(h, W3, b3))

    assert ad.grad_check(loss, params) < 1e-6


def test_grad_check_examples():
    # identity: exact at the origin, only difference-quotient rounding elsewhere
    assert ad.grad_check(lambda t: ad.sum_reduce(t), ad.Tensor(np.zeros(2))) == 0.0
    assert ad.grad_check(lambda t: ad.sum_reduce(t), ad.Tensor(np.array([0.3, -1.0]))) < 1e-9
    assert ad.grad_check(lambda t: ad.sum_reduce(ad.exp(t)), ad.Tensor(np.array([1.0]))) < 1e-8
    with pytest.raises(ValueError):
        ad.grad_check(lambda t: ad.sum_reduce(t), ad.Tensor(np.ones(2, np.float32)))


def test_backward_errors_and_determinism():
    t = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        ad.backward(ad.exp(t))
    r = np.random.default_rng(0)
    W = ad.Tensor(r.normal(size=(4, 3)), requires_grad=True)
    x = ad.Tensor(r.normal(size=(5, 3)))

    def run():
        loss = ad.mean_reduce(ad.softmax(ad.linear(x, W), axis=0))
        loss = ad.add(loss, ad.sum_reduce(ad.group_norm(ad.linear(x, W), groups=2)))
        return ad.backward(loss, {"W": W})["W"].copy()

    assert np.array_equal(run(), run())


def test_backward_zero_fills_unreached_params():
    a = ad.Tensor(np.ones(2), requires_grad=True)
    b = ad.Tensor(np.ones(2), requires_grad=True)
    grads = ad.backward(ad.sum_reduce(a), {"a": a, "b": b})
    assert np.array_equal(grads["b"], np.zeros(2))


def test_errors():
    with pytest.raises(ValueError):
        ad.add(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((3, 2))))
    with pytest.raises(ValueError):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))
    with pytest.raises(ad.NumericError):
        ad.exp(ad.Tensor(np.array([1000.0])))
    with pytest.raises(ad.NumericError):
        ad.log(ad.Tensor(np.array([-1.0])))


def test_constants_keep_dtype():
    t = ad.Tensor(np.ones(3, np.float32))
    assert ad.add(t, 1.0).dtype == np.float32
    assert ad.mul(2.0, t).dtype == np.float32


def test_max_reduce_routes_to_first_argmax():
    t = ad.Tensor(np.array([[1.0, 3.0, 3.0]]), requires_grad=True)
    ad.backward(ad.sum_reduce(ad.max_reduce(t, axis=1)))
    assert t.grad.tolist() == [[0.0, 1.0, 0.0]]

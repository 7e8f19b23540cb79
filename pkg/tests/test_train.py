import numpy as np
import pytest

from geomatch import autodiff as ad
from geomatch.core import CorrespondenceSet, SynthParams
from geomatch.train import (
    TrainConfig,
    make_training_pair,
    matching_loss,
    synthetic_stream,
    train_loop,
)


def _gt(n):
    return CorrespondenceSet(np.arange(n), np.arange(n), np.ones(n))


def test_loss_minimum():
    S = ad.Tensor(np.eye(3))
    tau = ad.Tensor(np.array([1.0, 1.0, 0.0]))
    flags = np.array([True, True, False])
    loss = matching_loss(S, _gt(3), tau, tau, flags, flags)
    assert loss.data < 1e-8


def test_loss_epsilon_term():
    # a gt score at the floor: -log(0 + 1e-9) = 20.72, -log(2 * 1e-9) = 20.03
    S = ad.Tensor(np.zeros((1, 1)))
    assert np.isclose(float(matching_loss(S, _gt(1)).data), -np.log(1e-9))
    assert np.isclose(-np.log(1e-9), 20.7, atol=0.05)


def test_loss_needs_gt():
    with pytest.raises(ValueError):
        matching_loss(ad.Tensor(np.eye(2)), CorrespondenceSet.empty())


def _small(steps=3, **kw):
    params = SynthParams(num_points=40, seed=0)
    return train_loop(TrainConfig(steps=steps, precision="f64", **kw), synthetic_stream(params), d=16, k_graph=6)


def test_lr_zero_leaves_weights():
    from geomatch.pipeline import ModelWeights

    w0 = ModelWeights.init(16, 0, np.float64)
    w, _ = train_loop(TrainConfig(steps=2, lr=0.0, precision="f64"), synthetic_stream(SynthParams(num_points=40)),
                      d=16, k_graph=6, weights=w0)
    assert all(np.array_equal(w.arrays()[k], w0.arrays()[k]) for k in w0)


def test_deterministic_f64():
    a, la = _small()
    b, lb = _small()
    assert np.array_equal(la, lb)
    assert all(np.array_equal(a.arrays()[k], b.arrays()[k]) for k in a)


def test_batch_and_callbacks():
    seen, ckpts = [], []
    params = SynthParams(num_points=40, seed=0)
    train_loop(TrainConfig(steps=4, batch=2, decay_every=2, precision="f64"), synthetic_stream(params), d=16,
               k_graph=6, on_step=lambda s, l, lr: seen.append((s, lr)),
               checkpoint=lambda s, w: ckpts.append(s), checkpoint_every=2)
    assert [s for s, _ in seen] == [0, 1, 2, 3]
    assert np.isclose(seen[2][1], 1e-3 * 0.95)
    assert ckpts == [2, 4]


def test_non_finite_reports_step():
    from geomatch.pipeline import ModelWeights

    w = ModelWeights.init(16, 0, np.float64)
    w["log_sigma"].data[:] = 1e3  # sigma = exp(1000) overflows
    with pytest.raises(ad.NumericError, match="step 1"):
        train_loop(TrainConfig(steps=1, precision="f64"), synthetic_stream(SynthParams(num_points=40)), d=16,
                   k_graph=6, weights=w)


def test_config_validation():
    for bad in (dict(lr=-1), dict(steps=0), dict(batch=0), dict(precision="f16")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_training_pair_flags():
    from geomatch.core import synth_pair

    X, Y, T = synth_pair(SynthParams(num_points=60, seed=1))
    tp = make_training_pair(X, Y, T)
    assert tp.flags_x.sum() == len(tp.gt)
    assert 0 < tp.flags_y.mean() < 1

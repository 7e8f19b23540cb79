"""Stand-in training objective, Adam, and the toy training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError
from .core import SynthParams, gt_correspondences, synth_pair
from .pipeline import AblationConfig, ModelWeights, forward, prepare_pair

log = logging.getLogger(__name__)

NLL_EPS = 1e-9
BCE_WEIGHT = 0.5


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-3
    seed: int = 0
    batch: int = 1
    precision: str = "f32"
    gt_warp: bool = True
    decay: float = 0.95
    decay_every: int = 100

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.batch < 1:
            raise ValueError("batch must be at least 1")
        if self.precision not in ad.DTYPES:
            raise ValueError(f"precision must be one of {sorted(ad.DTYPES)}")


@dataclass
class TrainingPair:
    """A pair with cached descriptors and its supervision."""

    inputs: object
    T_gt: object
    gt: object
    flags_x: np.ndarray
    flags_y: np.ndarray


def make_training_pair(X, Y, T_gt, beta=0.05, k_local=8):
    inputs = prepare_pair(X, Y, k_local)
    gt, flags_x = gt_correspondences(inputs.X, inputs.Y, T_gt, beta)
    _, flags_y = gt_correspondences(inputs.Y, inputs.X, T_gt.inverse(), beta)
    return TrainingPair(inputs, T_gt, gt, flags_x, flags_y)


def _bce(tau, labels, eps):
    y = ad.Tensor(labels.astype(tau.dtype))
    pos = ad.mul(y, ad.log(ad.add(tau, eps)))
    neg = ad.mul(ad.sub(1.0, y), ad.log(ad.add(ad.sub(1.0, tau), eps)))
    return ad.neg(ad.mean_reduce(ad.add(pos, neg)))


def matching_loss(S, gt, tau_x=None, tau_y=None, flags_x=None, flags_y=None, eps=NLL_EPS, lam=BCE_WEIGHT):
    """Negative log score of ground-truth pairs plus ``lam`` times matchability BCE.

    The BCE term is dropped when the matcher produced no matchability.
    """
    if len(gt) == 0:
        raise ValueError("matching_loss needs at least one ground-truth pair")
    N = S.shape[1]
    picked = ad.take(ad.reshape(S, (-1,)), gt.src * N + gt.tgt)
    loss = ad.neg(ad.mean_reduce(ad.log(ad.add(picked, eps))))
    if tau_x is not None and tau_y is not None:
        tau = ad.concat([tau_x, tau_y], axis=0)
        labels = np.concatenate([np.asarray(flags_x), np.asarray(flags_y)])
        loss = ad.add(loss, ad.scale(_bce(tau, labels, eps), lam))
    return loss


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1 - b1 ** self.t
        corr2 = 1 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            update = self.lr * (self.m[k] / corr1) / (np.sqrt(self.v[k] / corr2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)


def pair_loss(weights, pair, ablation=AblationConfig(), k_graph=12, gt_warp=True):
    out = forward(weights, pair.inputs, ablation, k_graph, T_gt=pair.T_gt, gt_warp=gt_warp)
    return matching_loss(out.scores, pair.gt, out.tau_x, out.tau_y, pair.flags_x, pair.flags_y)


def train_step(weights, pairs, cfg, optimizer, ablation=AblationConfig(), k_graph=12):
    """One Adam update on the mean loss over ``pairs``; returns the loss value."""
    if not isinstance(pairs, (list, tuple)):
        pairs = [pairs]
    grads = {k: np.zeros_like(p.data) for k, p in weights.items()}
    total = 0.0
    for pair in pairs:
        try:
            loss = pair_loss(weights, pair, ablation, k_graph, cfg.gt_warp)
        except NumericError as exc:
            raise NumericError(f"non-finite loss at optimizer step {optimizer.t + 1}: {exc}") from exc
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss {value} at optimizer step {optimizer.t + 1}")
        total += value
        for k, g in ad.backward(loss, weights.params).items():
            grads[k] += g / len(pairs)
    optimizer.step(grads)
    return total / len(pairs)


def synthetic_stream(params: SynthParams, beta=0.05, k_local=8):
    """Endless training pairs; pair ``n`` uses seed ``params.seed + n``."""
    n = 0
    while True:
        p = SynthParams(**{**params.__dict__, "seed": params.seed + n})
        X, Y, T = synth_pair(p)
        yield make_training_pair(X, Y, T, beta, k_local)
        n += 1


def train_loop(
    cfg: TrainConfig,
    pairs: Iterable[TrainingPair],
    d=64,
    k_graph=12,
    ablation=AblationConfig(),
    weights: Optional[ModelWeights] = None,
    on_step: Optional[Callable[[int, float, float], None]] = None,
    checkpoint: Optional[Callable[[int, ModelWeights], None]] = None,
    checkpoint_every=500,
):
    """Train for ``cfg.steps`` Adam steps with a step-wise exponential lr decay.

    ``pairs`` is consumed ``cfg.batch`` items per step. Returns the trained
    weights and the per-step loss curve.
    """
    dtype = ad.DTYPES[cfg.precision]
    if weights is None:
        weights = ModelWeights.init(d, cfg.seed, dtype)
    else:
        weights = weights.astype(dtype)
    opt = Adam(weights.params, cfg.lr)
    stream = iter(pairs)
    losses = []
    for step in range(cfg.steps):
        opt.lr = cfg.lr * cfg.decay ** (step // cfg.decay_every)
        batch = [next(stream) for _ in range(cfg.batch)]
        loss = train_step(weights, batch, cfg, opt, ablation, k_graph)
        losses.append(loss)
        if on_step is not None:
            on_step(step, loss, opt.lr)
        if step % 100 == 0:
            log.debug("step %d loss %.5f lr %.2e", step, loss, opt.lr)
        if checkpoint is not None and (step + 1) % checkpoint_every == 0:
            checkpoint(step + 1, weights)
    return weights, np.asarray(losses)

"""Scikit-learn style front end for the matcher."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .core import EvalConfig, check_cloud
from .pipeline import AblationConfig, ModelWeights, forward, prepare_pair
from .registration import (
    MatchConfig,
    compute_metrics,
    estimate_pose,
    mutual_top1,
    ransac_pose,
    top_k_select,
)
from .train import TrainConfig, TrainingPair, make_training_pair, train_loop


def check_pair(X, Y):
    """Validate a source/target pair of (M, 3) and (N, 3) finite arrays."""
    xs = check_cloud(getattr(X, "points", X), "X")
    ys = check_cloud(getattr(Y, "points", Y), "Y")
    return xs, ys


class Matcher(BaseEstimator):
    """Learned soft matcher between two point clouds.

    ``fit`` takes an iterable of ``(X, Y, T_gt)`` triples (cycled if shorter
    than the step budget); ``predict_scores`` returns the final (M, N) score
    matrix, ``predict`` the selected correspondences and ``register`` a pose.
    """

    def __init__(
        self,
        d=64,
        k_graph=12,
        k_local=8,
        gcnn=True,
        bi_match=True,
        global_consistency=True,
        reposition=True,
        steps=2000,
        lr=1e-3,
        batch=1,
        precision="f32",
        gt_warp=True,
        beta=0.05,
        match_mode="mutual_top1",
        top_k=256,
        ransac_iters=500,
        ransac_thresh=0.05,
        seed=0,
    ):
        self.d = d
        self.k_graph = k_graph
        self.k_local = k_local
        self.gcnn = gcnn
        self.bi_match = bi_match
        self.global_consistency = global_consistency
        self.reposition = reposition
        self.steps = steps
        self.lr = lr
        self.batch = batch
        self.precision = precision
        self.gt_warp = gt_warp
        self.beta = beta
        self.match_mode = match_mode
        self.top_k = top_k
        self.ransac_iters = ransac_iters
        self.ransac_thresh = ransac_thresh
        self.seed = seed

    @property
    def ablation(self):
        return AblationConfig(self.gcnn, self.bi_match, self.global_consistency, self.reposition)

    @property
    def match_config(self):
        return MatchConfig(self.match_mode, self.top_k, self.ransac_iters, self.ransac_thresh)

    def _train_config(self):
        return TrainConfig(
            steps=self.steps, lr=self.lr, seed=self.seed, batch=self.batch,
            precision=self.precision, gt_warp=self.gt_warp,
        )

    def _as_training_pair(self, item):
        if isinstance(item, TrainingPair):
            return item
        X, Y, T = item
        xs, ys = check_pair(X, Y)
        return make_training_pair(xs, ys, T, self.beta, self.k_local)

    def initialize(self):
        """Set freshly initialised (untrained) weights."""
        self.weights_ = ModelWeights.init(self.d, self.seed, ad.DTYPES[self.precision])
        self.loss_curve_ = np.zeros(0)
        return self

    def fit(self, pairs, y=None, on_step=None):
        if callable(getattr(pairs, "__next__", None)):
            stream = (self._as_training_pair(p) for p in pairs)
        else:
            prepared = [self._as_training_pair(p) for p in pairs]
            if not prepared:
                raise ValueError("fit needs at least one training pair")

            def cycle():
                while True:
                    yield from prepared

            stream = cycle()
        self.weights_, self.loss_curve_ = train_loop(
            self._train_config(), stream, self.d, self.k_graph, self.ablation, on_step=on_step
        )
        return self

    def forward(self, X, Y):
        check_is_fitted(self, "weights_")
        xs, ys = check_pair(X, Y)
        return forward(self.weights_, prepare_pair(xs, ys, self.k_local), self.ablation, self.k_graph)

    def predict_scores(self, X, Y):
        return self.forward(X, Y).scores.data.astype(np.float64)

    def select(self, S):
        if self.match_mode == "top_k":
            return top_k_select(S, min(self.top_k, S.size))
        return mutual_top1(S)

    def predict(self, X, Y):
        return self.select(self.predict_scores(X, Y))

    def register(self, X, Y, ransac=False):
        xs, ys = check_pair(X, Y)
        corr = self.predict(xs, ys)
        if ransac:
            return ransac_pose(corr, xs, ys, self.match_config, self.seed).transform
        return estimate_pose(corr, xs, ys)

    def score(self, pairs, y=None, eval_cfg=EvalConfig()):
        """Mean inlier ratio of the selected correspondences over ``(X, Y, T_gt)`` triples."""
        irs = []
        for X, Y, T in pairs:
            corr = self.predict(X, Y)
            irs.append(compute_metrics(T, T, corr, getattr(X, "points", X), getattr(Y, "points", Y), eval_cfg).ir)
        return float(np.mean(irs))

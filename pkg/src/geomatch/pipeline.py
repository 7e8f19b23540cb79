"""Parameter layout and the end-to-end matcher forward pass."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .consistency import confidence_scores, encode_confidence, fosc_matrix
from .core import DegenerateGeometryError, PointCloud, RigidTransform
from .features import DESCRIPTOR_DIM, handcrafted_descriptor, project_features
from .fusion import final_scores, matchability_matrix, matchability_scores
from .graph_embed import edge_features, feature_neighbors, gcnn_embed, initial_scores
from .reposition import (
    BilateralMatch,
    fuse_pair_features,
    score_argmax_match,
    warp_and_match,
    weighted_procrustes,
)


@dataclass(frozen=True)
class AblationConfig:
    gcnn: bool = True
    bi_match: bool = True
    global_consistency: bool = True
    reposition: bool = True

    @property
    def uses_matchability(self):
        return self.bi_match or self.global_consistency


# rows (a)-(e) of the component ablation, vanilla first
ABLATIONS = {
    "a": AblationConfig(False, False, False, False),
    "b": AblationConfig(True, False, False, False),
    "c": AblationConfig(True, True, False, False),
    "d": AblationConfig(True, True, True, False),
    "e": AblationConfig(True, True, True, True),
}


def _linear_shapes(prefix, dims, in_dim):
    shapes = {}
    for i, out in enumerate(dims):
        shapes[f"{prefix}.{i}.weight"] = (out, in_dim)
        shapes[f"{prefix}.{i}.bias"] = (out,)
        in_dim = out
    return shapes


def param_shapes(d):
    """Name -> shape for every learnable parameter at width ``d``."""
    if d % 8:
        raise ValueError(f"d={d} must be divisible by 8")
    shapes = {"proj.weight": (d, DESCRIPTOR_DIM), "proj.bias": (d,)}
    shapes.update(_linear_shapes("h1", (d, d, 2 * d), 2 * d))
    shapes.update({"post_pool.weight": (d, 2 * d), "post_pool.bias": (d,)})
    for direction in ("fuse_xy", "fuse_yx"):
        shapes.update({f"{direction}.weight": (d, 2 * d), f"{direction}.bias": (d,)})
    shapes["log_sigma"] = (1,)
    shapes.update(_linear_shapes("h2", (d // 4, d // 2, d), 1))
    for head in ("h3x", "h3y"):
        shapes.update(_linear_shapes(head, (d // 4, d // 4, d // 2, 1), 2 * d))
    return shapes


class ModelWeights:
    """Named parameter tensors for one matcher of width ``d``."""

    def __init__(self, params, d):
        expected = param_shapes(d)
        for name, shape in expected.items():
            if name not in params:
                raise KeyError(f"missing parameter {name!r}")
            if tuple(params[name].shape) != shape:
                raise ValueError(f"parameter {name!r} has shape {tuple(params[name].shape)}, expected {shape}")
        extra = set(params) - set(expected)
        if extra:
            raise KeyError(f"unexpected parameters: {sorted(extra)}")
        self.d = d
        self.params = {name: params[name] for name in expected}

    @classmethod
    def init(cls, d, seed=0, dtype=np.float32):
        """Fan-in scaled uniform initialisation; ``log_sigma`` starts at 0."""
        rng = np.random.default_rng(seed)
        shapes = param_shapes(d)
        params = {}
        for name, shape in shapes.items():
            if name == "log_sigma":
                arr = np.zeros(shape)
            else:
                fan_in = shapes[name.rsplit(".", 1)[0] + ".weight"][1]
                bound = 1.0 / np.sqrt(fan_in)
                arr = rng.uniform(-bound, bound, size=shape)
            params[name] = ad.Tensor(arr.astype(dtype), requires_grad=True, name=name)
        return cls(params, d)

    @classmethod
    def from_arrays(cls, arrays, d, dtype=None):
        return cls(
            {k: ad.Tensor(np.asarray(v, dtype=dtype), requires_grad=True, name=k) for k, v in arrays.items()},
            d,
        )

    def arrays(self):
        return {k: t.data.copy() for k, t in self.params.items()}

    def astype(self, dtype):
        return ModelWeights.from_arrays({k: t.data.astype(dtype) for k, t in self.params.items()}, self.d)

    @property
    def dtype(self):
        return self.params["proj.weight"].dtype

    def __getitem__(self, name):
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def items(self):
        return self.params.items()


@dataclass
class PairInputs:
    X: np.ndarray
    Y: np.ndarray
    desc_x: np.ndarray
    desc_y: np.ndarray


def prepare_pair(X, Y, k_local=8):
    xs = X.points if isinstance(X, PointCloud) else np.asarray(X, dtype=np.float64)
    ys = Y.points if isinstance(Y, PointCloud) else np.asarray(Y, dtype=np.float64)
    return PairInputs(xs, ys, handcrafted_descriptor(xs, k_local), handcrafted_descriptor(ys, k_local))


@dataclass
class ForwardResult:
    scores: ad.Tensor
    s_hat: ad.Tensor
    tau_x: Optional[ad.Tensor] = None
    tau_y: Optional[ad.Tensor] = None
    match: Optional[BilateralMatch] = None
    transform: Optional[RigidTransform] = None
    alpha_x: Optional[ad.Tensor] = None
    alpha_y: Optional[ad.Tensor] = None

    @property
    def match_source(self):
        """Which rule produced the bilateral maps: warp, score_argmax, fallback or none."""
        return self.match.source if self.match is not None else "none"


def embed(w, desc, k_graph, use_gcnn=True, groups=8):
    F = project_features(desc, w["proj.weight"], w["proj.bias"])
    if not use_gcnn:
        return F
    nbrs = feature_neighbors(F, min(k_graph, F.shape[0] - 1))
    h_hat, _ = gcnn_embed(edge_features(F, nbrs), w, groups)
    return h_hat


def forward(w, pair, ablation=AblationConfig(), k_graph=12, T_gt=None, gt_warp=False, groups=8):
    """Run the matcher on one prepared pair.

    With ``gt_warp`` (training) the repositioning warp uses ``T_gt`` instead of
    the transform solved from the intermediate scores.
    """
    h_x = embed(w, pair.desc_x, k_graph, ablation.gcnn, groups)
    h_y = embed(w, pair.desc_y, k_graph, ablation.gcnn, groups)
    s_hat = initial_scores(h_x, h_y)
    result = ForwardResult(scores=None, s_hat=s_hat)
    if not ablation.uses_matchability:
        result.scores = final_scores(s_hat)
        return result

    if ablation.reposition:
        if gt_warp and T_gt is not None:
            T = T_gt
        else:
            try:
                T = weighted_procrustes(pair.X, pair.Y, s_hat)
            except DegenerateGeometryError:
                T = None
        if T is not None:
            match = warp_and_match(pair.X, pair.Y, T)
        else:
            m = score_argmax_match(s_hat)
            match = BilateralMatch(m.src_to_tgt, m.tgt_to_src, "fallback")
        result.transform = T
    else:
        match = score_argmax_match(s_hat)
    result.match = match

    M, N, d = h_x.shape[0], h_y.shape[0], h_x.shape[1]
    zeros_x = ad.Tensor(np.zeros((M, d), dtype=h_x.dtype))
    zeros_y = ad.Tensor(np.zeros((N, d), dtype=h_y.dtype))

    if ablation.global_consistency:
        result.alpha_x = confidence_scores(fosc_matrix(pair.X, pair.Y[match.src_to_tgt]), w["log_sigma"])
        result.alpha_y = confidence_scores(fosc_matrix(pair.Y, pair.X[match.tgt_to_src]), w["log_sigma"])
        v_x = encode_confidence(result.alpha_x, w)
        v_y = encode_confidence(result.alpha_y, w)
    else:
        v_x, v_y = zeros_x, zeros_y

    if ablation.bi_match:
        f_x = fuse_pair_features(h_x, h_y, match.src_to_tgt, w["fuse_xy.weight"], w["fuse_xy.bias"])
        f_y = fuse_pair_features(h_y, h_x, match.tgt_to_src, w["fuse_yx.weight"], w["fuse_yx.bias"])
    else:
        f_x, f_y = zeros_x, zeros_y

    result.tau_x = matchability_scores(v_x, f_x, w, "h3x")
    result.tau_y = matchability_scores(v_y, f_y, w, "h3y")
    result.scores = final_scores(s_hat, matchability_matrix(result.tau_x, result.tau_y))
    return result

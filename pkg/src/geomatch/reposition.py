"""Pre-alignment from the score matrix and bilateral 3-D matching."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .core import DegenerateGeometryError, PointCloud, RigidTransform, nearest


@dataclass(frozen=True)
class BilateralMatch:
    src_to_tgt: np.ndarray
    tgt_to_src: np.ndarray
    source: str = "warp"  # "warp" or "score_argmax"; which rule built the maps


def _points(cloud):
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)


def solve_rigid(src, dst, weights=None):
    """Weighted least-squares rigid motion taking ``src`` rows onto ``dst`` rows."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    n = src.shape[0]
    if n < 3 or dst.shape != src.shape:
        raise DegenerateGeometryError(f"need >= 3 paired points, got {n}")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64).reshape(n)
    if np.any(w < 0) or w.sum() <= 0:
        raise DegenerateGeometryError("weights must be non-negative with a positive sum")
    w = w / w.sum()
    src_mean = w @ src
    dst_mean = w @ dst
    sw = np.sqrt(w)[:, None]
    src_c = (src - src_mean) * sw
    dst_c = (dst - dst_mean) * sw
    sv = np.linalg.svd(src_c, compute_uv=False)
    if sv[0] == 0.0 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateGeometryError("source points are collinear or coincident")
    if np.linalg.norm(dst_c) <= 1e-12 * np.linalg.norm(src_c):
        # targets collapsed onto one point: no rotational evidence
        R = np.eye(3)
    else:
        U, _, Vt = np.linalg.svd(src_c.T @ dst_c)
        d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
        R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return RigidTransform(R, dst_mean - R @ src_mean)


def weighted_procrustes(X, Y, S):
    """Rigid transform from soft assignments in the score matrix ``S``.

    Each source point targets the row-softmax average of Y and is weighted by
    its row's peak probability.
    """
    xs, ys = _points(X), _points(Y)
    S = np.asarray(S.data if isinstance(S, ad.Tensor) else S, dtype=np.float64)
    if S.shape != (xs.shape[0], ys.shape[0]):
        raise ValueError(f"score matrix {S.shape} does not fit clouds {xs.shape[0]}x{ys.shape[0]}")
    if not np.all(np.isfinite(S)):
        raise ValueError("score matrix must be finite")
    P = np.exp(S - S.max(axis=1, keepdims=True))
    P /= P.sum(axis=1, keepdims=True)
    return solve_rigid(xs, P @ ys, P.max(axis=1))


def warp_and_match(X, Y, T):
    """Nearest neighbours between the warped source and the target, both ways."""
    warped = T.apply(_points(X))
    ys = _points(Y)
    return BilateralMatch(nearest(warped, ys), nearest(ys, warped), "warp")


def score_argmax_match(S):
    """Row-wise and column-wise argmax of ``S``; stands in for warping when repositioning is off."""
    S = np.asarray(S.data if isinstance(S, ad.Tensor) else S)
    return BilateralMatch(S.argmax(axis=1), S.argmax(axis=0), "score_argmax")


def fuse_pair_features(h_src, h_tgt, match_idx, weight, bias):
    """Project ``[h_src_i, h_tgt_match(i)]`` back to width d."""
    match_idx = np.asarray(match_idx, dtype=np.int64)
    if match_idx.shape != (h_src.shape[0],):
        raise ValueError(f"match index must have length {h_src.shape[0]}")
    paired = ad.concat([h_src, ad.take(h_tgt, match_idx)], axis=-1)
    return ad.linear(paired, weight, bias)

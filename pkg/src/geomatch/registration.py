"""From score matrices to correspondences, poses and metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .core import (
    CorrespondenceSet,
    DegenerateGeometryError,
    EvalConfig,
    PointCloud,
    RigidTransform,
    rotation_angle_deg,
)
from .reposition import solve_rigid

MATCH_MODES = ("mutual_top1", "top_k")


@dataclass(frozen=True)
class MatchConfig:
    mode: str = "mutual_top1"
    k: int = 256
    ransac_iters: int = 500
    ransac_thresh: float = 0.05

    def __post_init__(self):
        if self.mode not in MATCH_MODES:
            raise ValueError(f"mode must be one of {MATCH_MODES}")
        if self.k < 1:
            raise ValueError("k must be at least 1")


@dataclass
class MetricsReport:
    rre: float
    rte: float
    rr: bool
    ir: float
    fmr: bool
    overlap: float = float("nan")
    num_corr: int = 0
    runtime: float = float("nan")


@dataclass
class RansacResult:
    transform: Optional[RigidTransform]
    inliers: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))

    @property
    def success(self):
        return self.transform is not None


def _pts(cloud):
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)


def _as_array(S):
    S = np.asarray(getattr(S, "data", S), dtype=np.float64)
    if S.ndim != 2:
        raise ValueError("score matrix must be 2-D")
    return S


def _mutual_mask(S):
    rows = S.argmax(axis=1)
    cols = S.argmax(axis=0)
    i = np.arange(S.shape[0])
    return i, rows, cols[rows] == i


def mutual_top1(S):
    """Pairs that are the maximum of both their row and their column."""
    S = _as_array(S)
    i, rows, ok = _mutual_mask(S)
    src, tgt = i[ok], rows[ok]
    return CorrespondenceSet(src, tgt, S[src, tgt])


def top_k_select(S, k):
    """The ``k`` highest-scoring mutual pairs, ties going to the lower ``(i, j)``."""
    S = _as_array(S)
    if k <= 0:
        return CorrespondenceSet.empty()
    if k > S.size:
        raise ValueError(f"k={k} exceeds the {S.size} matrix entries")
    mutual = mutual_top1(S)
    order = np.lexsort((mutual.tgt, mutual.src, -mutual.weights))[:k]
    return CorrespondenceSet(mutual.src[order], mutual.tgt[order], mutual.weights[order])


def estimate_pose(corr, X, Y):
    """Weighted Procrustes over hard correspondences."""
    if len(corr) < 3:
        raise DegenerateGeometryError(f"need >= 3 correspondences, got {len(corr)}")
    xs, ys = _pts(X), _pts(Y)
    corr.check_bounds(xs.shape[0], ys.shape[0])
    return solve_rigid(xs[corr.src], ys[corr.tgt], corr.weights)


def ransac_pose(corr, X, Y, cfg=MatchConfig(), seed=0):
    """3-point RANSAC on correspondences, refined on the best inlier set."""
    if len(corr) < 3:
        raise DegenerateGeometryError(f"need >= 3 correspondences, got {len(corr)}")
    xs, ys = _pts(X), _pts(Y)
    corr.check_bounds(xs.shape[0], ys.shape[0])
    src, dst = xs[corr.src], ys[corr.tgt]
    weights = corr.weights if corr.weights is not None else np.ones(len(corr))
    rng = np.random.default_rng(seed)
    best = np.zeros(len(corr), bool)
    for _ in range(cfg.ransac_iters):
        pick = rng.choice(len(corr), size=3, replace=False)
        try:
            T = solve_rigid(src[pick], dst[pick])
        except DegenerateGeometryError:
            continue
        inl = np.linalg.norm(T.apply(src) - dst, axis=1) < cfg.ransac_thresh
        if inl.sum() > best.sum():
            best = inl
    if best.sum() < 3:
        return RansacResult(None, best)
    try:
        T = solve_rigid(src[best], dst[best], weights[best])
    except DegenerateGeometryError:
        return RansacResult(None, best)
    return RansacResult(T, best)


def sinkhorn_baseline(S_hat, iters=100, with_slack=False, slack=1.0):
    """Log-domain Sinkhorn normalisation of ``exp(S_hat)``.

    Without slack rows are scaled to sum 1 and columns to ``M / N``. With
    slack a dustbin row and column holding ``slack`` are appended and the
    real rows/columns get unit mass while the dustbins absorb the remainder.
    """
    S = _as_array(S_hat)
    if iters < 1:
        raise ValueError("iters must be >= 1")
    M, N = S.shape
    if with_slack:
        Z = np.full((M + 1, N + 1), float(slack))
        Z[:M, :N] = S
        log_mu = np.concatenate([np.zeros(M), [np.log(N)]])
        log_nu = np.concatenate([np.zeros(N), [np.log(M)]])
    else:
        Z = S.copy()
        log_mu = np.zeros(M)
        log_nu = np.full(N, np.log(M / N))
    u = np.zeros(Z.shape[0])
    v = np.zeros(Z.shape[1])
    for _ in range(iters):
        u = log_mu - logsumexp(Z + v[None, :], axis=1)
        v = log_nu - logsumexp(Z + u[:, None], axis=0)
    return np.exp(Z + u[:, None] + v[None, :])


def rre_deg(R_est, R_gt):
    return rotation_angle_deg(np.asarray(R_gt).T @ np.asarray(R_est))


def inlier_ratio(corr, X, Y, T_gt, tau):
    if len(corr) == 0:
        return 0.0
    xs, ys = _pts(X), _pts(Y)
    res = np.linalg.norm(T_gt.apply(xs[corr.src]) - ys[corr.tgt], axis=1)
    return float(np.mean(res < tau))


def compute_metrics(T_est, T_gt, corr, X, Y, cfg=EvalConfig()):
    rre = rre_deg(T_est.rotation, T_gt.rotation) if T_est is not None else 180.0
    rte = float(np.linalg.norm(T_est.translation - T_gt.translation)) if T_est is not None else float("inf")
    ir = inlier_ratio(corr, X, Y, T_gt, cfg.inlier_tau)
    return MetricsReport(
        rre=rre,
        rte=rte,
        rr=bool(rre < cfg.rre_thresh and rte < cfg.rte_thresh),
        ir=ir,
        fmr=bool(ir > cfg.fmr_eta),
        num_corr=len(corr),
    )


def feature_matching_recall(reports):
    reports = list(reports)
    return float(np.mean([r.fmr for r in reports])) if reports else 0.0


def registration_recall(reports):
    reports = list(reports)
    return float(np.mean([r.rr for r in reports])) if reports else 0.0

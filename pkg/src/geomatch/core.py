"""Geometric primitives, exact nearest-neighbour search and synthetic pairs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.utils import check_array


class DegenerateGeometryError(ValueError):
    """Raised when a pose cannot be solved from the given points."""


class GenerationError(ValueError):
    pass


SHAPES = ("sphere", "cube_grid", "gaussian_blobs")


def check_cloud(points, name="points", min_points=3):
    """Validate an (M, 3) array of finite coordinates and return it as float64."""
    points = check_array(points, dtype=np.float64, ensure_min_samples=1, input_name=name)
    if points.shape[1] != 3:
        raise ValueError(f"{name} must have 3 columns, got shape {points.shape}")
    if points.shape[0] < min_points:
        raise ValueError(f"{name} needs at least {min_points} points, got {points.shape[0]}")
    return points


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        pts = check_cloud(self.points, min_points=1).copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("transform entries must be finite")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation is not in SO(3)")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=np.float64)
        if T.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got {T.shape}")
        return cls(T[:3, :3], T[:3, 3])

    def as_matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self):
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def compose(self, other):
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class CorrespondenceSet:
    """Pairs ``(i, j)`` of source and target indices with optional weights."""

    src: np.ndarray
    tgt: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        src = np.asarray(self.src, dtype=np.int64).reshape(-1)
        tgt = np.asarray(self.tgt, dtype=np.int64).reshape(-1)
        if src.shape != tgt.shape:
            raise ValueError("src and tgt index arrays differ in length")
        if len(set(zip(src.tolist(), tgt.tolist()))) != src.size:
            raise ValueError("duplicate (i, j) pair in correspondence set")
        object.__setattr__(self, "src", src)
        object.__setattr__(self, "tgt", tgt)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
            if w.shape != src.shape:
                raise ValueError("weights length differs from pair count")
            object.__setattr__(self, "weights", w)

    def __len__(self):
        return int(self.src.size)

    @classmethod
    def empty(cls):
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))

    def pairs(self):
        return list(zip(self.src.tolist(), self.tgt.tolist()))

    def check_bounds(self, m, n):
        if len(self) and (self.src.min() < 0 or self.src.max() >= m or self.tgt.min() < 0 or self.tgt.max() >= n):
            raise IndexError("correspondence index out of range")


@dataclass(frozen=True)
class SynthParams:
    num_points: int = 256
    overlap_ratio: float = 0.7
    noise_sigma: float = 0.01
    rot_max: float = 45.0
    trans_max: float = 0.5
    seed: int = 0
    shape: str = "sphere"

    def __post_init__(self):
        if not 0.0 < self.overlap_ratio <= 1.0:
            raise ValueError("overlap_ratio must lie in (0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}; expected one of {SHAPES}")
        if self.num_points < 3:
            raise ValueError("num_points must be at least 3")


@dataclass(frozen=True)
class EvalConfig:
    beta: float = 0.05
    inlier_tau: float = 0.05
    fmr_eta: float = 0.6
    rre_thresh: float = 5.0
    rte_thresh: float = 0.1

    def __post_init__(self):
        for name in ("beta", "inlier_tau", "fmr_eta", "rre_thresh", "rte_thresh"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.fmr_eta < 1:
            raise ValueError("fmr_eta must lie in (0, 1)")


def knn(query_rows, base_rows, k, chunk=256):
    """Indices of the ``k`` nearest base rows for every query row.

    Ordering is by exact Euclidean distance, ties going to the lower base
    index. A fast Gram-matrix pass builds a shortlist which is then re-ranked
    with directly computed distances.
    """
    query = np.asarray(query_rows, dtype=np.float64)
    base = np.asarray(base_rows, dtype=np.float64)
    if query.ndim != 2 or base.ndim != 2 or query.shape[1] != base.shape[1]:
        raise ValueError("query and base must be 2-D with matching columns")
    L = base.shape[0]
    if k < 1 or k > L:
        raise ValueError(f"k={k} must lie in [1, {L}]")
    if not (np.all(np.isfinite(query)) and np.all(np.isfinite(base))):
        raise ValueError("knn inputs must be finite")
    base_sq = np.einsum("ij,ij->i", base, base)
    out = np.empty((query.shape[0], k), dtype=np.int64)
    for start in range(0, query.shape[0], chunk):
        q = query[start:start + chunk]
        q_sq = np.einsum("ij,ij->i", q, q)
        approx = q_sq[:, None] + base_sq[None, :] - 2.0 * q @ base.T
        # everything within rounding of the k-th value must reach the exact re-rank
        kth = np.partition(approx, k - 1, axis=1)[:, k - 1]
        tol = 1e-9 * (q_sq + base_sq.max()) + 1e-12
        shortlist = max(k, int((approx <= (kth + tol)[:, None]).sum(axis=1).max()))
        if shortlist < L:
            cand = np.argpartition(approx, shortlist - 1, axis=1)[:, :shortlist]
            cand.sort(axis=1)
        else:
            cand = np.broadcast_to(np.arange(L), (q.shape[0], L))
        diff = q[:, None, :] - base[cand]
        exact = np.einsum("kld,kld->kl", diff, diff)
        # stable sort on distance keeps the ascending-index order of equal entries
        order = np.argsort(exact, axis=1, kind="stable")[:, :k]
        out[start:start + chunk] = np.take_along_axis(cand, order, axis=1)
    return out


def nearest(query_rows, base_rows):
    return knn(query_rows, base_rows, 1)[:, 0]


def apply_transform(cloud, T):
    pts = cloud.points if isinstance(cloud, PointCloud) else cloud
    moved = T.apply(pts)
    return PointCloud(moved) if isinstance(cloud, PointCloud) else moved


def rotation_angle_deg(R):
    """Geodesic angle of a rotation, in degrees.

    The clamped cosine ``(tr R - 1) / 2`` is paired with the sine read off the
    skew part; arccos alone cannot resolve angles below about 1e-6 degrees.
    """
    R = np.asarray(R, dtype=np.float64)
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.degrees(np.arctan2(s, c)))


def axis_angle(axis, angle_rad):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    R = np.eye(3) + np.sin(angle_rad) * K + (1 - np.cos(angle_rad)) * (K @ K)
    # re-orthonormalise so the SO(3) check holds to machine precision
    U, _, Vt = np.linalg.svd(R)
    return U @ Vt


def _unit_vector(rng):
    v = rng.normal(size=3)
    while np.linalg.norm(v) < 1e-12:
        v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def random_rigid(seed, rot_max=45.0, trans_max=0.5):
    """Random transform with angle uniform in [0, rot_max] degrees about a uniform axis."""
    if not 0.0 <= rot_max <= 180.0:
        raise ValueError("rot_max must lie in [0, 180]")
    if trans_max < 0:
        raise ValueError("trans_max must be non-negative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    axis = _unit_vector(rng)
    angle = np.radians(rng.uniform(0.0, rot_max))
    direction = _unit_vector(rng)
    # uniform in the ball of radius trans_max
    radius = trans_max * rng.uniform() ** (1.0 / 3.0)
    return RigidTransform(axis_angle(axis, angle), direction * radius)


def sample_shape(shape, n, rng):
    """``n`` points of the named shape, centred and scaled to the unit ball."""
    if shape == "sphere":
        pts = rng.normal(size=(n, 3))
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    elif shape == "cube_grid":
        g = int(np.ceil(n ** (1.0 / 3.0)))
        while g ** 3 < n:
            g += 1
        axis = np.linspace(-0.5, 0.5, g)
        grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), -1).reshape(-1, 3)
        pts = grid[np.sort(rng.choice(grid.shape[0], size=n, replace=False))]
    elif shape == "gaussian_blobs":
        n_blobs = 5
        centers = rng.uniform(-1.0, 1.0, size=(n_blobs, 3))
        counts = rng.multinomial(n - n_blobs, np.full(n_blobs, 1.0 / n_blobs)) + 1
        parts = []
        for c, cnt in zip(centers, counts):
            Q = axis_angle(_unit_vector(rng), rng.uniform(0, np.pi))
            scales = rng.uniform(0.08, 0.35, size=3)
            parts.append(c + (rng.normal(size=(cnt, 3)) * scales) @ Q.T)
        pts = np.concatenate(parts)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    pts = pts - pts.mean(axis=0)
    return pts / np.linalg.norm(pts, axis=1).max()


def synth_pair(p: SynthParams):
    """Partially overlapping pair ``(X, Y, T_gt)`` with ``Y ≈ T_gt(X)`` on the overlap.

    A full cloud is sliced along a random direction: X keeps the low side and
    Y the high side, sized so that the shared slab is ``overlap_ratio`` of
    each view. Y is moved by ``T_gt``, perturbed with isotropic noise, and
    both views are shuffled.
    """
    rng = np.random.default_rng(p.seed)
    n = p.num_points
    total = int(round(n * (2.0 - p.overlap_ratio)))
    total = min(max(total, n), 2 * n)
    n_overlap = 2 * n - total
    if n_overlap < 3:
        raise GenerationError(f"overlap_ratio={p.overlap_ratio} leaves {n_overlap} shared points")
    full = sample_shape(p.shape, total, rng)
    T_gt = random_rigid(rng, p.rot_max, p.trans_max)
    direction = _unit_vector(rng)
    order = np.argsort(full @ direction, kind="stable")
    x_idx = order[:n]
    y_idx = order[total - n:]
    X = full[x_idx]
    Y = T_gt.apply(full[y_idx])
    if p.noise_sigma > 0:
        Y = Y + rng.normal(scale=p.noise_sigma, size=Y.shape)
    X = X[rng.permutation(n)]
    Y = Y[rng.permutation(n)]
    return PointCloud(X), PointCloud(Y), T_gt


def gt_correspondences(X, Y, T_gt, beta):
    """Ground-truth pairs: nearest target of each warped source point if closer than ``beta``.

    Returns ``(corr, inlier_flags)`` where the flags mark sources with a partner.
    """
    xs = X.points if isinstance(X, PointCloud) else np.asarray(X, dtype=np.float64)
    ys = Y.points if isinstance(Y, PointCloud) else np.asarray(Y, dtype=np.float64)
    warped = T_gt.apply(xs)
    j = nearest(warped, ys)
    dist = np.linalg.norm(warped - ys[j], axis=1)
    flags = dist < beta
    src = np.flatnonzero(flags)
    return CorrespondenceSet(src, j[flags], np.ones(src.size)), flags

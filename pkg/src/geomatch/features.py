"""Per-point input features built from local geometry."""

import numpy as np

from . import autodiff as ad
from .core import PointCloud, knn

DESCRIPTOR_DIM = 10


def handcrafted_descriptor(cloud, k_local=8):
    """Ten local-shape statistics per point.

    Columns: the three eigenvalues of the neighbourhood covariance (descending),
    absolute cosines between the local normal and the cloud's principal axes,
    and mean / std / min / max of the distances to the ``k_local`` neighbours.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if k_local < 4:
        raise ValueError("k_local must be at least 4")
    M = pts.shape[0]
    k = min(k_local, M - 1)
    idx = knn(pts, pts, k + 1)
    # drop the query itself wherever it shows up, else the farthest entry
    self_pos = idx == np.arange(M)[:, None]
    keep = ~self_pos
    keep[~self_pos.any(axis=1), -1] = False
    nbrs = idx[keep].reshape(M, k)

    hood = np.concatenate([pts[:, None, :], pts[nbrs]], axis=1)
    centred = hood - hood.mean(axis=1, keepdims=True)
    cov = np.einsum("mki,mkj->mij", centred, centred) / hood.shape[1]
    evals, evecs = np.linalg.eigh(cov)
    evals = np.clip(evals[:, ::-1], 0.0, None)
    normals = evecs[:, :, 0]

    glob = pts - pts.mean(axis=0)
    _, gvecs = np.linalg.eigh(glob.T @ glob / M)
    axes = gvecs[:, ::-1]
    cosines = np.abs(normals @ axes)

    dist = np.linalg.norm(pts[nbrs] - pts[:, None, :], axis=2)
    stats = np.stack([dist.mean(1), dist.std(1), dist.min(1), dist.max(1)], axis=1)
    return np.concatenate([evals, cosines, stats], axis=1)


def project_features(desc, weight, bias):
    """Lift descriptors to the model width: linear, instance norm, relu."""
    if not isinstance(desc, ad.Tensor):
        desc = ad.Tensor(desc, dtype=weight.dtype)
    return ad.relu(ad.instance_norm(ad.linear(desc, weight, bias)))

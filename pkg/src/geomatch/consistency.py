"""Distance-preservation confidence for putative correspondences."""

import numpy as np

from . import autodiff as ad
from .core import PointCloud

H2_LAYERS = 3


def pairwise_distances(points):
    diff = points[:, None, :] - points[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def fosc_matrix(X, matched_Y):
    """``|d(x_i, x_j) - d(y_i, y_j)|`` for row-aligned sources and matched targets."""
    xs = X.points if isinstance(X, PointCloud) else np.asarray(X, dtype=np.float64)
    ys = np.asarray(matched_Y, dtype=np.float64)
    if xs.shape != ys.shape:
        raise ValueError(f"matched targets {ys.shape} not row-aligned with sources {xs.shape}")
    return np.abs(pairwise_distances(xs) - pairwise_distances(ys))


def confidence_scores(G, log_sigma):
    """Row mean of ``exp(-sigma * G)`` with ``sigma = exp(log_sigma)``, diagonal included.

    ``log_sigma`` may be a Tensor, in which case the result stays on the tape.
    """
    if not isinstance(log_sigma, ad.Tensor):
        log_sigma = ad.Tensor(np.asarray(log_sigma, dtype=np.float64).reshape(1))
    G = ad.Tensor(np.asarray(G), dtype=log_sigma.dtype)
    sigma = ad.exp(log_sigma)
    return ad.mean_reduce(ad.exp(ad.neg(ad.mul(G, sigma))), axis=1)


def encode_confidence(alpha, w):
    """Lift each scalar confidence to width d (linear, instance norm, relu ×3)."""
    h = ad.reshape(alpha, (-1, 1))
    for layer in range(H2_LAYERS):
        h = ad.linear(h, w[f"h2.{layer}.weight"], w[f"h2.{layer}.bias"])
        h = ad.relu(ad.instance_norm(h))
    return h

"""Local graph embedding over feature-space neighbourhoods."""

import numpy as np

from . import autodiff as ad
from .core import knn

H1_LAYERS = 3


def feature_neighbors(features, k):
    """``k`` nearest rows in feature space, excluding the row itself."""
    F = features.data if isinstance(features, ad.Tensor) else np.asarray(features)
    M = F.shape[0]
    if k > M - 1:
        raise ValueError(f"graph needs k <= {M - 1}, got {k}")
    idx = knn(F, F, k + 1)
    self_pos = idx == np.arange(M)[:, None]
    keep = ~self_pos
    keep[~self_pos.any(axis=1), -1] = False
    return idx[keep].reshape(M, k)


def edge_features(F, nbr_idx):
    """``[f_i, f_i - f_j]`` for each point ``i`` and neighbour ``j``; shape (M, k, 2d)."""
    nbr_idx = np.asarray(nbr_idx, dtype=np.int64)
    M = F.shape[0]
    if nbr_idx.ndim != 2 or nbr_idx.shape[0] != M:
        raise ValueError(f"neighbour index must be ({M}, k), got {nbr_idx.shape}")
    centre = ad.take(F, np.repeat(np.arange(M)[:, None], nbr_idx.shape[1], axis=1))
    return ad.concat([centre, ad.sub(centre, ad.take(F, nbr_idx))], axis=-1)


def gcnn_embed(delta_f, w, groups=8):
    """Shared MLP over edges, max-pool over neighbours, project back to width d.

    Returns ``(h_hat, pooled)`` with shapes (M, d) and (M, 2d).
    """
    h = delta_f
    for layer in range(H1_LAYERS):
        h = ad.linear(h, w[f"h1.{layer}.weight"], w[f"h1.{layer}.bias"])
        h = ad.relu(ad.group_norm(h, groups))
    pooled = ad.max_reduce(h, axis=1)
    h_hat = ad.linear(pooled, w["post_pool.weight"], w["post_pool.bias"])
    return h_hat, pooled


def initial_scores(h_x, h_y):
    """Inner-product score matrix between the two embeddings."""
    if h_x.shape[1] != h_y.shape[1]:
        raise ValueError(f"embedding widths differ: {h_x.shape[1]} vs {h_y.shape[1]}")
    return ad.matmul(h_x, ad.transpose(h_y))

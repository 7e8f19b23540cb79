"""Matchability head and the final score matrix."""

from . import autodiff as ad

H3_LAYERS = 4


def matchability_scores(v_hat, h_fused, w, prefix="h3x"):
    """Per-point probability of having a partner, from ``[v_hat, h_fused]``."""
    if v_hat.shape != h_fused.shape:
        raise ValueError(f"branch shapes differ: {v_hat.shape} vs {h_fused.shape}")
    h = ad.concat([v_hat, h_fused], axis=-1)
    for layer in range(H3_LAYERS):
        h = ad.linear(h, w[f"{prefix}.{layer}.weight"], w[f"{prefix}.{layer}.bias"])
        if layer < H3_LAYERS - 1:
            h = ad.relu(h)
    return ad.sigmoid(ad.reshape(h, (-1,)))


def matchability_matrix(tau_x, tau_y):
    """Outer product ``tau_x[i] * tau_y[j]``."""
    return ad.matmul(ad.reshape(tau_x, (-1, 1)), ad.reshape(tau_y, (1, -1)))


def dual_softmax(S_hat):
    return ad.mul(ad.softmax(S_hat, axis=1), ad.softmax(S_hat, axis=0))


def final_scores(S_hat, S_m=None):
    """Dual softmax of ``S_hat`` modulated by the matchability matrix ``S_m``."""
    ds = dual_softmax(S_hat)
    if S_m is None:
        return ds
    if S_m.shape != S_hat.shape:
        raise ValueError(f"matchability {S_m.shape} vs scores {S_hat.shape}")
    return ad.mul(S_m, ds)

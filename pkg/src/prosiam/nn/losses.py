"""Loss functions returning the loss and its input gradients."""

from __future__ import annotations

import numpy as np


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean -log softmax(logits)[label] over the batch, and d loss / d logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    B, K = logits.shape
    if labels.shape != (B,):
        raise ValueError("one label per row expected")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= K:
        raise ValueError(f"labels must lie in [0, {K})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z - logsum[:, None]
    loss = -logp[np.arange(B), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(B), labels] -= 1.0
    return float(loss), grad / B


def contrastive_loss(z_i: np.ndarray, z_j: np.ndarray, y, margin: float):
    """Contrastive loss on unsquared Euclidean distances, averaged over pairs.

    Genuine pairs (y = 0) cost d/2; impostor pairs (y = 1) cost
    max(0, margin - d)/2. Accepts single vectors or (B, D) batches and
    returns ``(loss, d_loss/d_z_i, d_loss/d_z_j)``.
    """
    if margin <= 0:
        raise ValueError("margin must be positive")
    z_i = np.asarray(z_i)
    z_j = np.asarray(z_j)
    if z_i.shape != z_j.shape:
        raise ValueError(f"embedding shapes differ: {z_i.shape} vs {z_j.shape}")
    single = z_i.ndim == 1
    if single:
        z_i, z_j = z_i[None], z_j[None]
    y = np.broadcast_to(np.asarray(y, dtype=np.float64), (z_i.shape[0],))
    diff = z_i - z_j
    d = np.sqrt((diff * diff).sum(axis=1))
    B = d.size
    per = np.where(y == 0, 0.5 * d, 0.5 * np.maximum(0.0, margin - d))
    # d(per)/dd: +1/2 genuine, -1/2 impostor inside the margin, 0 beyond it
    dd = np.where(y == 0, 0.5, np.where(d < margin, -0.5, 0.0))
    safe = np.where(d > 0, d, 1.0)
    coef = np.where(d > 0, dd / safe, 0.0) / B
    g = (coef[:, None] * diff).astype(z_i.dtype, copy=False)
    if single:
        return float(per.mean()), g[0], -g[0]
    return float(per.mean()), g, -g

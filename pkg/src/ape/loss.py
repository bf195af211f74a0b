"""Distance-matching objectives.

``loss_dist`` is a stress loss: the mean squared difference between predicted
embedding distances and target distances between normalized physical
coordinates. ``loss_total`` adds a penalty on the distance between the two
embeddings of each positive pair.
"""
from __future__ import annotations

import torch

__all__ = ["pairwise_distances", "loss_dist", "loss_equiv", "loss_total"]


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def pairwise_distances(a, b) -> torch.Tensor:
    """Euclidean distances between rows of ``a`` (N, 3) and rows of ``b`` (N, 3).

    Coincident rows give exactly 0 with a zero gradient instead of NaN.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or a.shape != b.shape:
        raise ValueError(f"expected two (N, d) arrays of equal shape, got {tuple(a.shape)} and {tuple(b.shape)}")
    sq = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    zero = sq == 0  # NaN stays NaN so divergence is not masked
    # sqrt'(0) is infinite; route zeros through a dummy value so the gradient there is 0
    safe = torch.where(zero, torch.ones_like(sq), sq)
    return torch.where(zero, torch.zeros_like(sq), safe.sqrt())


def loss_dist(d_pred, d_true) -> torch.Tensor:
    d_pred, d_true = _as_tensor(d_pred), _as_tensor(d_true)
    if d_pred.shape != d_true.shape or d_pred.ndim != 2 or d_pred.shape[0] != d_pred.shape[1]:
        raise ValueError(f"expected two equal square matrices, got {tuple(d_pred.shape)} and {tuple(d_true.shape)}")
    return ((d_pred - d_true.to(d_pred.dtype)) ** 2).mean()


def loss_equiv(d_pred) -> torch.Tensor:
    """Mean squared distance between the two embeddings of each positive pair."""
    return (torch.diagonal(_as_tensor(d_pred)) ** 2).mean()


def loss_total(d_pred, d_true, lam: float) -> torch.Tensor:
    """``loss_dist + lam * loss_equiv``; expects ``d_pred[i, i] = |a_i - a_i^+|``."""
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    total = loss_dist(d_pred, d_true)
    if lam:
        total = total + lam * loss_equiv(d_pred)
    return total

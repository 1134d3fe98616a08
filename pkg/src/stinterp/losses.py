"""Training objectives: pixel-wise similarity plus deformation smoothness."""
from __future__ import annotations

import numpy as np

from .data import STPatch
from .tensor import Tensor, as_tensor


def _as_pred_target(pred, target, dtype):
    p = pred if isinstance(pred, Tensor) else as_tensor(np.asarray(pred, dtype=dtype))
    if isinstance(target, STPatch):
        target = target.genes
    t = target if isinstance(target, Tensor) else as_tensor(np.asarray(target, dtype=dtype))
    if p.size != t.size:
        raise ValueError(f"prediction/target size mismatch: {p.shape} vs {t.shape}")
    return p, t.reshape(p.shape)


def loss_sim(preds, targets):
    """Sum over positions of the mean absolute error per slice.

    The per-slice term is averaged over all gene-map entries so the loss
    magnitude does not scale with patch resolution.
    """
    preds = list(preds)
    targets = list(targets)
    if len(preds) != len(targets):
        raise ValueError(f"{len(preds)} predictions vs {len(targets)} targets")
    if not preds:
        raise ValueError("empty prediction list")
    dtype = preds[0].dtype if isinstance(preds[0], Tensor) else np.float64
    total = None
    for pred, target in zip(preds, targets):
        p, t = _as_pred_target(pred, target, dtype)
        term = (p - t).abs().mean()
        total = term if total is None else total + term
    return total


def loss_smooth(flow01, flow10):
    """Mean absolute forward differences of both deformation features."""
    total = None
    for f in (flow01, flow10):
        dy = (f[:, :, 1:, :] - f[:, :, :-1, :]).abs().mean()
        dx = (f[:, :, :, 1:] - f[:, :, :, :-1]).abs().mean()
        term = dy + dx
        total = term if total is None else total + term
    return total


def total_loss(l_sim, l_smo, sim_weight=1.0, smooth_weight=1.0):
    return sim_weight * l_sim + smooth_weight * l_smo

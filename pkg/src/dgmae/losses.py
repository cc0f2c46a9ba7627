"""Scaled cosine error and the two reconstruction objectives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorad as ad
from .model import MaskPlan
from .tensorad import Tensor

EPS = 1e-12


@dataclass(frozen=True)
class LossConfig:
    gamma1: float = 3.0
    gamma2: float = 3.0
    lam: float = 0.5
    eps: float = EPS

    def __post_init__(self):
        if self.gamma1 <= 1 or self.gamma2 <= 1:
            raise ValueError("gamma1 and gamma2 must exceed 1")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")


def sce(pred, target, rows, gamma: float, eps: float = EPS) -> Tensor:
    """Mean over ``rows`` of ``(1 - cos(pred_i, target_i)) ** gamma``.

    Rows with zero norm have cosine 0. ``target`` may itself be a tensor on the
    tape; gradients then flow into it as well.
    """
    pred, target = ad.as_tensor(pred), ad.as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    rows = np.asarray(rows)
    if rows.dtype == bool:
        rows = np.flatnonzero(rows)
    if rows.size == 0:
        raise ValueError("SCE needs at least one row")
    p = ad.row_normalize_l2(ad.gather_rows(pred, rows), eps)
    t = ad.row_normalize_l2(ad.gather_rows(target, rows), eps)
    cos = ad.row_dot(p, t)
    return ad.mean(ad.power(ad.sub(1.0, cos), gamma))


def feature_loss(z_hat, X, plan: MaskPlan, gamma1: float) -> Tensor:
    """Reconstruction error on masked nodes against the original features."""
    if plan.n_masked == 0:
        raise ValueError("feature loss needs at least one masked node")
    X = np.asarray(X, dtype=np.float64)
    Xn = X / np.maximum(np.linalg.norm(X, axis=1, keepdims=True), EPS)
    return sce(z_hat, Xn, plan.masked, gamma1)


def discrepancy_loss(z_disc, x_disc, plan: MaskPlan, gamma2: float) -> Tensor:
    """Discrepancy reconstruction error averaged over the unmasked nodes."""
    if plan.n_unmasked == 0:
        raise ValueError("discrepancy loss needs at least one unmasked node")
    return sce(z_disc, np.asarray(x_disc, dtype=np.float64), ~plan.masked, gamma2)


def total_loss(loss_f, loss_d, lam: float) -> Tensor:
    return ad.add(ad.scale(loss_f, 1.0 - lam), ad.scale(loss_d, lam))


def pull_push_identity_check(z, x_i, neighbors, tol: float = 1e-9) -> tuple[float, float]:
    """Both sides of the pull/push rewrite of the discrepancy inner product.

    For unit vectors ``x``, ``<z, x> = (|z|^2 + 1 - |z - x|^2) / 2``, hence::

        <z, x_i - sum_j x_j> = -|z - x_i|^2 / 2 + sum_j |z - x_j|^2 / 2
                               + (1 - k) (|z|^2 + 1) / 2

    with ``k`` neighbors. Returns ``(lhs, rhs)``; the last term is
    :func:`pull_push_constant`.
    """
    z = np.asarray(z, dtype=np.float64)
    x_i = np.asarray(x_i, dtype=np.float64)
    nb = np.asarray(neighbors, dtype=np.float64).reshape(-1, z.size)
    for v in (x_i, *nb):
        if abs(np.linalg.norm(v) - 1.0) > tol:
            raise ValueError("feature vectors must be L2-normalized")
    lhs = float(z @ (x_i - nb.sum(axis=0)))
    pull = -0.5 * float(np.sum((z - x_i) ** 2))
    push = 0.5 * float(np.sum((z[None, :] - nb) ** 2))
    rhs = pull + push + pull_push_constant(z, nb.shape[0])
    return lhs, rhs


def pull_push_constant(z, k: int) -> float:
    z = np.asarray(z, dtype=np.float64)
    return 0.5 * (1 - k) * (float(z @ z) + 1.0)

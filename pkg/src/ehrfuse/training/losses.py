"""Weighted multi-label BCE, MLM cross-entropy and positive weights."""

from __future__ import annotations

import logging
import warnings

import numpy as np
import torch
import torch.nn.functional as F

from ..augmentation import IGNORE
from ..errors import DimensionMismatch, NoPositives

log = logging.getLogger(__name__)


def _as_tensor(x, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if like is None else x.to(like.dtype)
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype)


def weighted_bce_loss(z, y, omega, rho) -> torch.Tensor:
    """Mean over samples of ``-(1/D) sum_d w_d [rho_d y_d log s(z_d) + (1-y_d) log(1-s(z_d))]``.

    ``z``, ``y`` and ``omega`` are ``(B, D)`` (or ``(D,)``); ``rho`` is ``(D,)``.
    Uses ``log s(z) = -softplus(-z)`` and ``log(1 - s(z)) = -softplus(z)``.
    """
    z = _as_tensor(z)
    y, omega, rho = (_as_tensor(t, z) for t in (y, omega, rho))
    if z.dim() == 1:
        z, y, omega = z[None], y[None], omega[None]
    if y.shape != z.shape or omega.shape != z.shape:
        raise DimensionMismatch(f"z{tuple(z.shape)} y{tuple(y.shape)} omega{tuple(omega.shape)}")
    if rho.shape != z.shape[-1:]:
        raise DimensionMismatch(f"rho{tuple(rho.shape)} vs D={z.shape[-1]}")
    pos = -F.softplus(-z)
    neg = -F.softplus(z)
    per_sample = -(omega * (rho * y * pos + (1 - y) * neg)).mean(dim=-1)
    return per_sample.mean()


def mlm_loss(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean cross-entropy over positions whose label is not ``IGNORE``."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    sel = labels != IGNORE
    if not bool(sel.any()):
        warnings.warn("no positions selected for MLM loss", RuntimeWarning, stacklevel=2)
        return logits.sum() * 0.0
    return F.cross_entropy(logits[sel], labels[sel])


def positive_weights(labels, rho_max: float | None = None) -> np.ndarray:
    """Per-phenotype ``TN_d / TP_d`` over a training label matrix ``(N, D)``.

    A phenotype without positives raises :class:`NoPositives` unless
    ``rho_max`` is given, in which case it gets ``rho_max``.
    """
    Y = np.asarray(labels)
    if Y.ndim != 2:
        raise DimensionMismatch("labels must be a 2-D matrix")
    tp = Y.sum(axis=0).astype(np.int64)
    tn = Y.shape[0] - tp
    rho = np.empty(Y.shape[1], dtype=np.float64)
    for d in range(Y.shape[1]):
        if tp[d] == 0:
            if rho_max is None:
                raise NoPositives(f"phenotype column {d} has no positive examples")
            warnings.warn(f"phenotype column {d} has no positives; rho capped at {rho_max}",
                          RuntimeWarning, stacklevel=2)
            rho[d] = rho_max
        else:
            rho[d] = tn[d] / tp[d]
            if rho_max is not None:
                rho[d] = min(rho[d], rho_max)
    return rho

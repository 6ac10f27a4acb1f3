"""Contrastive losses for Q/A-level and trial-level training.

All losses score cosine similarity between raw (unnormalized) embeddings, so
they are invariant under positive rescaling of any input row. Gradients are
computed analytically, including the normalization step, which keeps the
training loop free of any autodiff dependency.
"""

from __future__ import annotations

import logging

import numpy as np

from .errors import DegenerateBatch

logger = logging.getLogger(__name__)

_EPS = 1e-12


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DegenerateBatch(f"expected a 2-D batch, got shape {x.shape}")
    return x


def _row_normalize(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms < _EPS):
        raise DegenerateBatch("zero-norm embedding in batch")
    return x / norms[:, None], norms


def _denormalize_grad(
    grad_unit: np.ndarray, unit: np.ndarray, norms: np.ndarray
) -> np.ndarray:
    # d/dx of f(x/|x|): project out the radial component, then scale by 1/|x|
    radial = np.sum(grad_unit * unit, axis=1, keepdims=True)
    return (grad_unit - radial * unit) / norms[:, None]


def _infonce(
    anchors: np.ndarray,
    positives: np.ndarray,
    tau: float,
    compute_grad: bool,
) -> tuple[float, np.ndarray | None, np.ndarray | None]:
    """Anchor-vs-batch-positives InfoNCE; own positive in the numerator."""
    a = _as_batch(anchors)
    p = _as_batch(positives)
    if a.shape != p.shape:
        raise DegenerateBatch(
            f"anchor/positive shape mismatch: {a.shape} vs {p.shape}"
        )
    n = a.shape[0]
    if n < 2:
        raise DegenerateBatch(f"need at least 2 anchors, got {n}")

    a_unit, a_norms = _row_normalize(a)
    p_unit, p_norms = _row_normalize(p)
    logits = (a_unit @ p_unit.T) / tau
    row_max = logits.max(axis=1, keepdims=True)
    exp_shifted = np.exp(logits - row_max)
    lse = row_max[:, 0] + np.log(exp_shifted.sum(axis=1))
    loss = float(np.mean(lse - np.diag(logits)))

    if not compute_grad:
        return loss, None, None

    softmax = exp_shifted / exp_shifted.sum(axis=1, keepdims=True)
    grad_sim = (softmax - np.eye(n)) / (n * tau)
    grad_a = _denormalize_grad(grad_sim @ p_unit, a_unit, a_norms)
    grad_p = _denormalize_grad(grad_sim.T @ a_unit, p_unit, p_norms)
    return loss, grad_a, grad_p


def local_infonce(anchors, positives, tau: float) -> float:
    """Q/A-level InfoNCE over a batch of (anchor, mined positive) pairs.

    The denominator ranges over the batch's positive embeddings, the anchor's
    own positive included.
    """
    loss, _, _ = _infonce(anchors, positives, tau, compute_grad=False)
    return loss


def local_infonce_grad(anchors, positives, tau: float):
    """local_infonce plus gradients w.r.t. both raw input batches."""
    return _infonce(anchors, positives, tau, compute_grad=True)


def in_batch_loss(trials, positives, tau: float) -> float:
    """Trial-level InfoNCE with the batch's positives as candidates."""
    loss, _, _ = _infonce(trials, positives, tau, compute_grad=False)
    return loss


def in_batch_loss_grad(trials, positives, tau: float):
    return _infonce(trials, positives, tau, compute_grad=True)


def _pairwise_cosine(
    x_unit: np.ndarray, y_unit: np.ndarray
) -> np.ndarray:
    return np.sum(x_unit * y_unit, axis=1)


def _paired(
    trials: np.ndarray,
    positives: np.ndarray,
    negatives: np.ndarray,
    tau: float,
    compute_grad: bool,
):
    z = _as_batch(trials)
    zp = _as_batch(positives)
    zn = _as_batch(negatives)
    if not (z.shape == zp.shape == zn.shape):
        raise DegenerateBatch(
            f"shape mismatch: {z.shape} / {zp.shape} / {zn.shape}"
        )
    n = z.shape[0]
    if n < 1:
        raise DegenerateBatch("paired loss needs at least one anchor")

    z_unit, z_norms = _row_normalize(z)
    zp_unit, zp_norms = _row_normalize(zp)
    zn_unit, zn_norms = _row_normalize(zn)
    sim_pos = _pairwise_cosine(z_unit, zp_unit) / tau
    sim_neg = _pairwise_cosine(z_unit, zn_unit) / tau
    # -log( e^sp / (e^sp + e^sn) ) = log(1 + e^(sn - sp)), computed stably
    delta = sim_neg - sim_pos
    loss = float(np.mean(np.logaddexp(0.0, delta)))

    if not compute_grad:
        return loss, None, None, None

    w_neg = 1.0 / (1.0 + np.exp(-delta))  # softmax weight on the negative
    d_sim_pos = -w_neg / (n * tau)
    d_sim_neg = w_neg / (n * tau)
    # cosine(a, b): d/da = (b_hat - cos * a_hat) / |a|
    cos_pos = sim_pos * tau
    cos_neg = sim_neg * tau
    grad_z_unit = (
        d_sim_pos[:, None] * zp_unit
        + d_sim_neg[:, None] * zn_unit
        - (d_sim_pos * cos_pos + d_sim_neg * cos_neg)[:, None] * z_unit
    )
    grad_z = grad_z_unit / z_norms[:, None]
    grad_zp = (
        d_sim_pos[:, None] * (z_unit - cos_pos[:, None] * zp_unit)
    ) / zp_norms[:, None]
    grad_zn = (
        d_sim_neg[:, None] * (z_unit - cos_neg[:, None] * zn_unit)
    ) / zn_norms[:, None]
    return loss, grad_z, grad_zp, grad_zn


def paired_loss(trials, positives, negatives, tau: float) -> float:
    """Anchor against its positive and one explicit hard negative.

    Callers exclude anchors that have no hard negative before calling.
    """
    loss, _, _, _ = _paired(trials, positives, negatives, tau, False)
    return loss


def paired_loss_grad(trials, positives, negatives, tau: float):
    return _paired(trials, positives, negatives, tau, True)


def global_loss(
    trials,
    positives,
    tau: float,
    negatives=None,
    neg_mask=None,
) -> float:
    """Trial-level objective: paired term plus in-batch term.

    negatives holds one hard-negative row per anchor; neg_mask marks the
    anchors that actually have one. With no usable hard negatives the paired
    term contributes 0 (logged) and the result equals in_batch_loss alone.
    """
    loss, _, _, _ = _global(trials, positives, tau, negatives, neg_mask, False)
    return loss


def global_loss_grad(trials, positives, tau: float, negatives=None, neg_mask=None):
    return _global(trials, positives, tau, negatives, neg_mask, True)


def _global(trials, positives, tau, negatives, neg_mask, compute_grad):
    z = _as_batch(trials)
    zp = _as_batch(positives)
    in_loss, grad_z, grad_zp = _infonce(z, zp, tau, compute_grad)

    if negatives is None:
        mask = np.zeros(z.shape[0], dtype=bool)
        zn = None
    else:
        zn = _as_batch(negatives)
        if neg_mask is None:
            mask = np.ones(z.shape[0], dtype=bool)
        else:
            mask = np.asarray(neg_mask, dtype=bool)

    grad_zn = np.zeros_like(z) if compute_grad else None
    if not mask.any():
        logger.warning("no anchors with hard negatives; paired term is 0")
        return in_loss, grad_z, grad_zp, grad_zn

    idx = np.flatnonzero(mask)
    p_loss, g_z, g_zp, g_zn = _paired(
        z[idx], zp[idx], zn[idx], tau, compute_grad
    )
    if compute_grad:
        grad_z[idx] += g_z
        grad_zp[idx] += g_zp
        grad_zn[idx] += g_zn
    return in_loss + p_loss, grad_z, grad_zp, grad_zn

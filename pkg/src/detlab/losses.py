"""Fused loss primitives: softmax cross-entropy (optionally class-weighted),
sigmoid focal loss, smooth-L1 box regression, and binary cross-entropy with
logits. Each returns a scalar tensor >= 0 and registers a hand-derived
backward closure, so the finite-difference suite covers them like any other
primitive.

Targets, class weights, and sample weights are plain numpy arrays: they are
constants of the loss, never differentiated through.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, ContractError
from .ops import _out, _record
from .tensor import propagate


def softmax_cross_entropy(logits, labels, class_weights=None):
    """Mean softmax cross-entropy over the batch.

    ``class_weights`` (length n_classes, strictly positive) scales each
    sample's loss by the weight of its true class; the reduction stays
    sum(w_i * ce_i) / N, so all-ones weights reproduce the unweighted loss
    exactly (same code path, same arithmetic).
    """
    if logits.ndim != 2:
        raise ConfigurationError(f"softmax_cross_entropy expects [N, K] logits, got {tuple(logits.shape)}")
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ConfigurationError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ContractError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    if class_weights is None:
        w = np.ones(k, dtype=logits.dtype)
    else:
        w = np.asarray(class_weights, dtype=logits.dtype)
        if w.shape != (k,):
            raise ConfigurationError(f"class weight vector has length {w.shape[0]} but there are {k} classes")
        if np.any(w <= 0):
            raise ConfigurationError("class weights must be strictly positive")

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    logsumexp = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    ce = logsumexp - z[np.arange(n), labels]
    sample_w = w[labels]
    loss = np.asarray((sample_w * ce).sum() / n, dtype=logits.dtype)
    out = _out(loss, logits.requires_grad)

    def bwd(g, grads):
        p = np.exp(z - zmax)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        propagate(grads, logits, (g * sample_w[:, None] / n) * p)

    return _record(out, bwd, "softmax_cross_entropy", 5 * logits.size, [z], grad_inputs=[logits])


def binary_cross_entropy_with_logits(logits, targets, sample_weights=None, normalizer=None):
    """Weighted sigmoid cross-entropy summed over elements / normalizer."""
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ConfigurationError(f"targets shape {t.shape} does not match logits {tuple(logits.shape)}")
    if sample_weights is None:
        sw = np.ones_like(t)
    else:
        sw = np.asarray(sample_weights, dtype=logits.dtype)
        if sw.shape != logits.shape:
            raise ConfigurationError(f"sample_weights shape {sw.shape} does not match logits {tuple(logits.shape)}")
    norm = float(normalizer) if normalizer is not None else float(max(1, logits.size))
    if norm <= 0:
        raise ContractError("normalizer must be positive")

    z = logits.data
    ce = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    loss = np.asarray((sw * ce).sum() / norm, dtype=logits.dtype)
    out = _out(loss, logits.requires_grad)

    def bwd(g, grads):
        s = 1.0 / (1.0 + np.exp(-z))
        propagate(grads, logits, g * sw * (s - t) / norm)

    return _record(out, bwd, "bce_with_logits", 5 * logits.size, [z], grad_inputs=[logits])


def focal_loss(logits, targets, alpha=0.25, gamma=2.0, normalizer=None):
    """Sigmoid focal loss summed over elements / normalizer.

    ``alpha`` scales the positive-class terms; negative terms keep unit
    weight. With gamma=0 and alpha=1 the focusing and balancing factors are
    both identically 1, so the value equals plain sigmoid cross-entropy
    summed the same way.
    """
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ConfigurationError(f"targets shape {t.shape} does not match logits {tuple(logits.shape)}")
    norm = float(normalizer) if normalizer is not None else float(max(1, logits.shape[0]))
    if norm <= 0:
        raise ContractError("normalizer must be positive")
    gamma = float(gamma)
    alpha = float(alpha)

    z = logits.data
    ce = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    s = 1.0 / (1.0 + np.exp(-z))
    p_t = s * t + (1.0 - s) * (1.0 - t)
    alpha_t = alpha * t + (1.0 - t)
    one_minus = np.maximum(1.0 - p_t, 1e-12)
    focus = one_minus**gamma if gamma != 0.0 else np.ones_like(p_t)
    loss = np.asarray((alpha_t * focus * ce).sum() / norm, dtype=logits.dtype)
    out = _out(loss, logits.requires_grad)

    def bwd(g, grads):
        d_ce = s - t
        if gamma == 0.0:
            dz = alpha_t * d_ce
        else:
            d_pt = s * (1.0 - s) * (2.0 * t - 1.0)
            dz = alpha_t * (focus * d_ce - gamma * one_minus ** (gamma - 1.0) * d_pt * ce)
        propagate(grads, logits, g * dz / norm)

    return _record(out, bwd, "focal_loss", 10 * logits.size, [z], grad_inputs=[logits])


def smooth_l1(pred, target, beta=1.0 / 9.0, sample_weights=None, normalizer=None):
    """Huber-style box regression loss summed over elements / normalizer."""
    t = np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ConfigurationError(f"target shape {t.shape} does not match predictions {tuple(pred.shape)}")
    if beta <= 0:
        raise ContractError("smooth_l1 beta must be positive")
    if sample_weights is None:
        sw = np.ones_like(t)
    else:
        sw = np.asarray(sample_weights, dtype=pred.dtype)
        if sw.shape != pred.shape:
            raise ConfigurationError(f"sample_weights shape {sw.shape} does not match predictions {tuple(pred.shape)}")
    norm = float(normalizer) if normalizer is not None else float(max(1, pred.shape[0]))
    if norm <= 0:
        raise ContractError("normalizer must be positive")

    d = pred.data - t
    ad = np.abs(d)
    quad = ad < beta
    vals = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)
    loss = np.asarray((sw * vals).sum() / norm, dtype=pred.dtype)
    out = _out(loss, pred.requires_grad)

    def bwd(g, grads):
        dd = np.where(quad, d / beta, np.sign(d))
        propagate(grads, pred, g * sw * dd / norm)

    return _record(out, bwd, "smooth_l1", 4 * pred.size, [d], grad_inputs=[pred])

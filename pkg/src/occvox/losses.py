"""
Training losses over per-voxel class logits.

Logits are ``(M, ...)`` arrays (class axis first, any spatial shape) and
labels the matching ``(...)`` integer arrays.  Every loss returns
``(value, grad)`` with ``grad`` shaped like the logits.

The scene-class affinity terms follow the MonoScene formulation: for a
class ``c`` with softmax mass ``p`` and ground-truth indicator ``y`` over the
evaluated voxels,

    precision   = sum(p y) / sum(p)
    recall      = sum(p y) / sum(y)
    specificity = sum((1 - p)(1 - y)) / sum(1 - y)

and the class term is the sum of ``-log`` of each ratio whose denominator is
non-zero (precision also needs at least one positive voxel).  The semantic
loss averages class terms over classes present in the ground truth; the
geometric loss applies the same three ratios once to the occupied-vs-free
split (``p`` = 1 - free probability).
"""

from __future__ import annotations

import numpy as np
from scipy.special import log_softmax, softmax

from .errors import ShapeError, UndefinedLossError

IGNORE_LABEL = 255
FREE_CLASS = 0


def _flatten(logits, labels, ignore_label):
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.shape[1:] != labels.shape:
        raise ShapeError(f"logits {logits.shape} do not match labels {labels.shape}")
    M = logits.shape[0]
    x = logits.reshape(M, -1).T                      # (N, M)
    y = labels.reshape(-1).astype(np.int64)
    keep = y != ignore_label
    if np.any((y[keep] < 0) | (y[keep] >= M)):
        raise ShapeError("labels must lie in [0, M) or equal the ignore label")
    if not np.any(keep):
        raise UndefinedLossError("every voxel is ignored")
    return x, y, keep


def _unflatten(grad_rows, keep, logits_shape):
    full = np.zeros((keep.size, logits_shape[0]))
    full[keep] = grad_rows
    return full.T.reshape(logits_shape)


def class_frequency_weights(labels, num_classes: int, ignore_label: int = IGNORE_LABEL,
                            eps: float = 1.02) -> np.ndarray:
    """``w_c = 1 / log(eps + f_c)`` from empirical class frequencies ``f_c``."""
    y = np.asarray(labels).reshape(-1)
    y = y[y != ignore_label]
    if y.size == 0:
        raise UndefinedLossError("no labelled voxels to count")
    freq = np.bincount(y, minlength=num_classes)[:num_classes] / y.size
    return 1.0 / np.log(eps + freq)


def weighted_cross_entropy(logits, labels, weights=None, ignore_label: int = IGNORE_LABEL):
    """Mean over evaluated voxels of ``w[label] * -log softmax(logits)[label]``."""
    x, y, keep = _flatten(logits, labels, ignore_label)
    M = x.shape[1]
    w = np.ones(M) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (M,) or np.any(w < 0) or not np.all(np.isfinite(w)) or not np.any(w > 0):
        raise ValueError("weights must be M finite non-negative values, one positive")
    xk, yk = x[keep], y[keep]
    n = yk.size
    rows = np.arange(n)
    wy = w[yk]
    loss = float(np.sum(wy * -log_softmax(xk, axis=1)[rows, yk]) / n)
    g = softmax(xk, axis=1)
    g[rows, yk] -= 1.0
    g *= (wy / n)[:, None]
    return loss, _unflatten(g, keep, np.shape(logits))


def _affinity_terms(p, t):
    """Summed ``-log`` of precision/recall/specificity and its gradient in ``p``."""
    loss = 0.0
    grad = np.zeros_like(p)
    nom = np.sum(p * t)
    sp, st, sneg = np.sum(p), np.sum(t), np.sum(1.0 - t)
    if sp > 0 and st > 0:
        loss -= np.log(nom / sp)
        grad += -t / nom + 1.0 / sp
    if st > 0:
        loss -= np.log(nom / st)
        grad += -t / nom
    if sneg > 0:
        spec_num = np.sum((1.0 - p) * (1.0 - t))
        loss -= np.log(spec_num / sneg)
        grad += (1.0 - t) / spec_num
    return loss, grad


def _softmax_backward(probs, dprobs):
    return probs * (dprobs - np.sum(dprobs * probs, axis=1, keepdims=True))


def semantic_affinity_loss(logits, labels, ignore_label: int = IGNORE_LABEL):
    x, y, keep = _flatten(logits, labels, ignore_label)
    probs = softmax(x[keep], axis=1)
    yk = y[keep]
    dprobs = np.zeros_like(probs)
    total, count = 0.0, 0
    for c in range(probs.shape[1]):
        t = (yk == c).astype(np.float64)
        if not np.any(t):
            continue
        loss_c, grad_c = _affinity_terms(probs[:, c], t)
        total += loss_c
        dprobs[:, c] = grad_c
        count += 1
    # count >= 1 because at least one voxel is labelled
    g = _softmax_backward(probs, dprobs / count)
    return float(total / count), _unflatten(g, keep, np.shape(logits))


def geometric_affinity_loss(logits, labels, free_class: int = FREE_CLASS,
                            ignore_label: int = IGNORE_LABEL):
    x, y, keep = _flatten(logits, labels, ignore_label)
    probs = softmax(x[keep], axis=1)
    t = (y[keep] != free_class).astype(np.float64)
    occupied = 1.0 - probs[:, free_class]
    loss, grad_occ = _affinity_terms(occupied, t)
    dprobs = np.zeros_like(probs)
    dprobs[:, free_class] = -grad_occ
    g = _softmax_backward(probs, dprobs)
    return float(loss), _unflatten(g, keep, np.shape(logits))


def loss_terms(logits, labels, weights=None, free_class: int = FREE_CLASS,
               ignore_label: int = IGNORE_LABEL) -> dict:
    """The three per-head terms as ``{name: (value, grad)}``."""
    return {
        "sem": semantic_affinity_loss(logits, labels, ignore_label),
        "geo": geometric_affinity_loss(logits, labels, free_class, ignore_label),
        "ce": weighted_cross_entropy(logits, labels, weights, ignore_label),
    }


def total_loss(pred_t, pred_ti, gt, weights=None, free_class: int = FREE_CLASS,
               ignore_label: int = IGNORE_LABEL):
    """Unweighted sum of sem + geo + ce on both heads.

    Returns ``(value, grad_t, grad_ti, terms)`` where ``terms`` maps
    ``"t.sem"`` etc. to the individual scalar values.  The value is summed in
    the fixed order t.sem, t.geo, t.ce, ti.sem, ti.geo, ti.ce.
    """
    if np.shape(pred_t) != np.shape(pred_ti):
        raise ShapeError("both heads must emit the same shape")
    terms, grads = {}, {}
    for head, logits in (("t", pred_t), ("ti", pred_ti)):
        parts = loss_terms(logits, gt, weights, free_class, ignore_label)
        grads[head] = parts["sem"][1] + parts["geo"][1] + parts["ce"][1]
        for name in ("sem", "geo", "ce"):
            terms[f"{head}.{name}"] = parts[name][0]
    value = 0.0
    for key in ("t.sem", "t.geo", "t.ce", "ti.sem", "ti.geo", "ti.ce"):
        value += terms[key]
    return value, grads["t"], grads["ti"], terms

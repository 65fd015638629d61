"""
Finite-difference checks for the analytic gradients.

Each check perturbs every entry of every differentiable input with a
central difference and compares against the analytic gradient using the
elementwise test ``|analytic - numeric| <= atol + rtol * |numeric|``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fusion import DeformableAttentionParams, deformable_attention, deformable_attention_backward
from .losses import (class_frequency_weights, geometric_affinity_loss, semantic_affinity_loss,
                     weighted_cross_entropy)

RTOL = 1e-4
ATOL = 1e-7
STEP = 1e-6
SHIPPED_SEEDS = tuple(range(20))
ATTENTION_POINTS = (1, 2, 8)


@dataclass(frozen=True)
class GradCheck:
    name: str
    seed: int
    max_abs_err: float
    worst_ratio: float    # max of |err| / (atol + rtol |numeric|); <= 1 passes

    @property
    def ok(self) -> bool:
        return self.worst_ratio <= 1.0


def numeric_gradient(f, x: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (mutated in place)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def compare(name: str, seed: int, analytic, numeric, rtol=RTOL, atol=ATOL) -> GradCheck:
    err = np.abs(np.asarray(analytic) - np.asarray(numeric))
    ratio = err / (atol + rtol * np.abs(numeric))
    return GradCheck(name, seed, float(err.max(initial=0.0)), float(ratio.max(initial=0.0)))


def _attention_case(seed: int, n_points: int, dims=(3, 3, 3), c_query=3, c_value=3, c_out=2,
                    margin: float = 1e-3):
    """Random attention inputs whose sampling positions avoid cell boundaries.

    Trilinear interpolation has kinks at integer coordinates where central
    differences are meaningless, so offset biases are redrawn until every
    fractional coordinate is at least ``margin`` away from an integer.
    """
    rng = np.random.default_rng([seed, n_points])
    query = rng.normal(size=(c_query,) + dims)
    value = rng.normal(size=(c_value,) + dims)
    params = DeformableAttentionParams.random(c_query, c_value, c_out, n_points, rng,
                                              offset_scale=0.7)
    for _ in range(100):
        _, cache = deformable_attention(query, value, params, return_cache=True)
        frac = cache.positions - np.floor(cache.positions)
        if np.all((frac > margin) & (frac < 1 - margin)):
            break
        params.offset_bias = params.offset_bias + rng.uniform(-0.5, 0.5, size=params.offset_bias.shape)
    upstream = rng.normal(size=(c_out,) + dims)
    return query, value, params, upstream


def check_attention(seed: int, n_points: int) -> list:
    """One result per differentiable input of deformable attention."""
    query, value, params, upstream = _attention_case(seed, n_points)
    _, cache = deformable_attention(query, value, params, return_cache=True)
    grads = deformable_attention_backward(upstream, cache)

    def loss():
        return float(np.sum(upstream * deformable_attention(query, value, params)))

    results = []
    for name, arr in [("query", query), ("value", value)] + \
            [(f, getattr(params, f)) for f in DeformableAttentionParams.FIELDS]:
        num = numeric_gradient(loss, arr)
        results.append(compare(f"attention[Ns={n_points}].{name}", seed, grads[name], num))
    return results


def _loss_case(seed: int, num_classes=4, dims=(3, 3, 2)):
    rng = np.random.default_rng([seed, 101])
    logits = rng.normal(size=(num_classes,) + dims)
    labels = rng.integers(0, num_classes, size=dims)
    labels[0, 0, 0] = 0                       # free present
    labels[-1, -1, -1] = num_classes - 1      # an occupied class present
    labels.reshape(-1)[rng.integers(1, labels.size - 1)] = 255
    return logits, labels


def check_losses(seed: int) -> list:
    logits, labels = _loss_case(seed)
    weights = class_frequency_weights(labels, logits.shape[0])
    fns = {
        "loss.ce": lambda x: weighted_cross_entropy(x, labels, weights),
        "loss.sem": lambda x: semantic_affinity_loss(x, labels),
        "loss.geo": lambda x: geometric_affinity_loss(x, labels),
    }
    results = []
    for name, fn in fns.items():
        _, grad = fn(logits)
        num = numeric_gradient(lambda: fn(logits)[0], logits)
        results.append(compare(name, seed, grad, num))
    return results


def run_all(seeds=SHIPPED_SEEDS, points=ATTENTION_POINTS) -> list:
    results = []
    for seed in seeds:
        for ns in points:
            results += check_attention(seed, ns)
        results += check_losses(seed)
    return results

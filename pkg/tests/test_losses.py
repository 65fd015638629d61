import math

import numpy as np
import pytest

from occvox import gradcheck as gc
from occvox.errors import ShapeError, UndefinedLossError
from occvox.losses import (class_frequency_weights, geometric_affinity_loss, loss_terms,
                           semantic_affinity_loss, total_loss, weighted_cross_entropy)


def _case(seed=0, M=4, dims=(3, 3, 2)):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, M, size=dims)
    labels[0, 0, 0], labels[-1, -1, -1] = 0, M - 1
    return rng.normal(size=(M,) + dims), labels


@pytest.mark.parametrize("M", [2, 5, 20])
def test_uniform_logits_cross_entropy_is_log_m(M):
    labels = np.random.default_rng(M).integers(0, M, size=(4, 3, 2))
    loss, _ = weighted_cross_entropy(np.zeros((M, 4, 3, 2)), labels)
    assert abs(loss - math.log(M)) <= 1e-12


def _peaked(labels, M, scale):
    return scale * np.moveaxis(np.eye(M)[labels], -1, 0)


@pytest.mark.parametrize("fn", [weighted_cross_entropy, semantic_affinity_loss,
                                geometric_affinity_loss])
def test_peaked_predictions_drive_loss_to_zero(fn):
    _, labels = _case(1)
    losses = [fn(_peaked(labels, 4, s), labels)[0] for s in (1.0, 5.0, 20.0, 40.0)]
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 1e-8
    assert all(v >= 0 for v in losses)


@pytest.mark.parametrize("fn", [semantic_affinity_loss, geometric_affinity_loss])
def test_inverted_two_class_prediction_costs_more(fn):
    labels = np.array([[[0, 1], [1, 0]]])
    matched = _peaked(labels, 2, 3.0)
    inverted = _peaked(1 - labels, 2, 3.0)
    assert fn(inverted, labels)[0] > fn(matched, labels)[0]


def test_ignored_voxels_do_not_contribute():
    logits, labels = _case(2)
    masked = labels.copy()
    masked[1, 1, 1] = 255
    changed = logits.copy()
    changed[:, 1, 1, 1] = 100.0
    for fn in (weighted_cross_entropy, semantic_affinity_loss, geometric_affinity_loss):
        a, ga = fn(logits, masked)
        b, gb = fn(changed, masked)
        assert a == b
        np.testing.assert_array_equal(ga[:, 1, 1, 1], 0.0)


def test_all_ignored_is_undefined():
    with pytest.raises(UndefinedLossError):
        weighted_cross_entropy(np.zeros((3, 2, 2, 2)), np.full((2, 2, 2), 255))


def test_shape_and_label_errors():
    with pytest.raises(ShapeError):
        weighted_cross_entropy(np.zeros((3, 2, 2, 2)), np.zeros((2, 2, 3), dtype=int))
    with pytest.raises(ShapeError):
        weighted_cross_entropy(np.zeros((3, 1, 1, 1)), np.array([[[3]]]))


def test_class_weights():
    labels = np.array([0] * 90 + [1] * 9 + [2] + [255] * 5)
    w = class_frequency_weights(labels, 4)
    freq = np.array([0.9, 0.09, 0.01, 0.0])
    np.testing.assert_allclose(w, 1 / np.log(1.02 + freq), rtol=1e-14)
    assert np.all(np.isfinite(w)) and np.all(w > 0)
    assert w[0] < w[1] < w[2] < w[3]


def test_weighted_cross_entropy_oracle():
    logits, labels = _case(3)
    w = np.array([0.5, 1.0, 2.0, 3.0])
    loss, _ = weighted_cross_entropy(logits, labels, w)
    x = logits.reshape(4, -1).T
    y = labels.reshape(-1)
    want = np.mean([w[c] * -(row[c] - math.log(sum(math.exp(v) for v in row))) for row, c in zip(x, y)])
    assert loss == pytest.approx(want, rel=1e-13)


@pytest.mark.parametrize("seed", range(5))
def test_loss_gradients_finite_differences(seed):
    for r in gc.check_losses(seed):
        assert r.ok, r


def test_total_loss_additivity_and_symmetry():
    logits, labels = _case(4)
    other, _ = _case(5)
    value, g_t, g_ti, terms = total_loss(logits, other, labels)
    order = ("t.sem", "t.geo", "t.ce", "ti.sem", "ti.geo", "ti.ce")
    assert tuple(terms) == order
    acc = 0.0
    for key in order:
        acc += terms[key]
    assert value == acc
    single = loss_terms(logits, labels)
    assert terms["t.sem"] == single["sem"][0]
    assert terms["t.ce"] == single["ce"][0]
    twice, _, _, _ = total_loss(logits, logits, labels)
    head = sum(single[k][0] for k in ("sem", "geo", "ce"))
    assert twice == pytest.approx(2 * head, rel=1e-15)


def test_total_loss_gradient_finite_differences():
    logits, labels = _case(6)
    other, _ = _case(7)
    _, g_t, g_ti, _ = total_loss(logits, other, labels)
    num_t = gc.numeric_gradient(lambda: total_loss(logits, other, labels)[0], logits)
    num_ti = gc.numeric_gradient(lambda: total_loss(logits, other, labels)[0], other)
    assert gc.compare("total.t", 6, g_t, num_t).ok
    assert gc.compare("total.ti", 6, g_ti, num_ti).ok


def test_total_loss_head_shape_mismatch():
    logits, labels = _case(8)
    with pytest.raises(ShapeError):
        total_loss(logits, logits[:3], labels)


def test_semantic_loss_skips_classes_absent_from_ground_truth():
    logits, labels = _case(9, M=5)
    labels[labels == 2] = 1
    base, grad = semantic_affinity_loss(logits, labels)
    assert np.isfinite(base)
    assert np.all(np.isfinite(grad))

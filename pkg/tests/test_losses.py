import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xdistill import autograd as ag
from xdistill.autograd import Tensor
from xdistill.losses import (LossWeights, distillation_loss, multiview_distillation_loss, occupancy_loss,
                             temporal_loss, total_loss)
from xdistill.occupancy import OccupancyQuerySet

from helpers import check_leaf_grads


def naive_distill(s, t):
    total = 0.0
    for a, b in zip(s, t):
        a = a / math.sqrt(sum(x * x for x in a))
        b = b / math.sqrt(sum(x * x for x in b))
        total += sum((x - y) ** 2 for x, y in zip(a, b))
    return total / len(s)


def query_set(labels, intensity):
    labels = np.asarray(labels)
    q = len(labels)
    return OccupancyQuerySet(np.zeros((q, 3)), labels.astype(np.int64), np.asarray(intensity, float),
                             np.zeros(q, np.int64), np.where(labels == 1, 1, 0).astype(np.int64), 0)


def test_identical_rows_give_zero():
    x = np.random.default_rng(0).standard_normal((10, 16))
    assert distillation_loss(x, x * 3.0).item() == pytest.approx(0.0, abs=1e-15)


def test_antipodal_pair_gives_four():
    a = np.array([[1.0, 0, 0]])
    assert distillation_loss(a, -a).item() == pytest.approx(4.0)


def test_random_matches_naive_oracle():
    rng = np.random.default_rng(1)
    s, t = rng.standard_normal((64, 16)), rng.standard_normal((64, 16))
    assert abs(distillation_loss(s, t).item() - naive_distill(s, t)) < 1e-12


def test_equals_mean_two_minus_two_cos():
    rng = np.random.default_rng(2)
    s, t = rng.standard_normal((100, 16)), rng.standard_normal((100, 16))
    cos = np.sum(s * t, 1) / np.linalg.norm(s, axis=1) / np.linalg.norm(t, axis=1)
    assert abs(distillation_loss(s, t).item() - np.mean(2 - 2 * cos)) < 1e-10
    v = distillation_loss(s, t).item()
    assert 0 <= v <= 4


def test_literal_distance_mode():
    rng = np.random.default_rng(3)
    s, t = rng.standard_normal((20, 16)), rng.standard_normal((20, 16))
    cos = np.sum(s * t, 1) / np.linalg.norm(s, axis=1) / np.linalg.norm(t, axis=1)
    assert distillation_loss(s, t, "l2").item() == pytest.approx(np.mean(np.sqrt(2 - 2 * cos)), abs=1e-9)
    with pytest.raises(ValueError):
        distillation_loss(s, t, "l1")


def test_empty_pairing_is_zero_and_shape_checked():
    assert distillation_loss(np.zeros((0, 16)), np.zeros((0, 16))).item() == 0.0
    with pytest.raises(ag.ShapeError):
        distillation_loss(np.ones((3, 16)), np.ones((4, 16)))


def test_per_view_averaging():
    rng = np.random.default_rng(4)
    s, t = rng.standard_normal((30, 8)), rng.standard_normal((30, 8))
    vid = np.r_[np.zeros(10, int), np.ones(20, int)]
    expected = 0.5 * (naive_distill(s[:10], t[:10]) + naive_distill(s[10:], t[10:]))
    assert multiview_distillation_loss(s, t, vid).item() == pytest.approx(expected, abs=1e-12)
    assert multiview_distillation_loss(s, t, vid, per_view=False).item() == pytest.approx(naive_distill(s, t))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 30), st.integers(0, 2**31 - 1))
def test_row_scaling_invariance(n, seed):
    rng = np.random.default_rng(seed)
    s, t = rng.standard_normal((n, 16)), rng.standard_normal((n, 16))
    scaled = s * rng.uniform(0.1, 10, (n, 1))
    assert abs(distillation_loss(s, t).item() - distillation_loss(scaled, t).item()) < 1e-12


def test_occupancy_confident_and_exact():
    labels = np.array([1, 0, 0, 1, 0, 0])
    inten = np.array([0.3, 0, 0, 0.7, 0, 0])
    qs = query_set(labels, inten)
    logits = np.where(labels == 1, 50.0, -50.0)
    bce, mse = occupancy_loss((logits, inten), qs)
    assert bce.item() < 1e-20 and mse.item() == 0.0


def test_occupancy_zero_logits_is_ln2():
    qs = query_set([1, 0, 0], [0.5, 0, 0])
    bce, _ = occupancy_loss((np.zeros(3), np.zeros(3)), qs)
    assert bce.item() == pytest.approx(math.log(2), abs=1e-15)


def test_occupancy_matches_scalar_loop():
    rng = np.random.default_rng(5)
    labels = rng.integers(0, 2, 40)
    target = np.where(labels == 1, rng.uniform(0, 1, 40), 0.0)
    qs = query_set(labels, target)
    logits, pred = rng.standard_normal(40) * 3, rng.uniform(0, 1, 40)
    bce, mse = occupancy_loss(np.c_[logits, pred], qs)
    ref_bce = sum(math.log1p(math.exp(-z)) if y else math.log1p(math.exp(z)) for z, y in zip(logits, labels)) / 40
    occ = [i for i in range(40) if labels[i] == 1]
    ref_mse = sum((pred[i] - target[i]) ** 2 for i in occ) / len(occ)
    assert abs(bce.item() - ref_bce) < 1e-12 and abs(mse.item() - ref_mse) < 1e-12


def test_occupancy_length_mismatch():
    with pytest.raises(ag.ShapeError):
        occupancy_loss((np.zeros(2), np.zeros(2)), query_set([1, 0, 0], [0, 0, 0]))


def test_temporal_examples():
    x = np.random.default_rng(6).standard_normal((5, 32))
    assert temporal_loss(x, x).item() == pytest.approx(0.0, abs=1e-15)
    assert temporal_loss(np.eye(4)[:2], np.eye(4)[2:]).item() == pytest.approx(2.0)
    assert temporal_loss(np.zeros((0, 32)), np.zeros((0, 32))).item() == 0.0


def test_temporal_matches_naive():
    rng = np.random.default_rng(7)
    a, b = rng.standard_normal((25, 32)), rng.standard_normal((25, 32))
    assert abs(temporal_loss(a, b).item() - naive_distill(a, b)) < 1e-12


def test_total_combination():
    br = total_loss(1.5, 0.4, 0.2, 0.8, LossWeights(w_occ=0.05, lam=1.0, w_temp=0.1))
    assert br.total == pytest.approx(1.5 + 0.05 * (0.4 + 0.2) + 0.1 * 0.8)
    assert total_loss(1.5, 0.4, 0.2, 0.8, LossWeights(0.0, 1.0, 0.0)).total == 1.5
    assert total_loss(0.0, 0.0, 0.0, 0.0).total == 0.0
    assert LossWeights() == LossWeights(w_occ=0.05, lam=1.0, w_temp=0.0)
    with pytest.raises(ValueError):
        LossWeights(w_occ=-0.1)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=4, max_size=4), st.integers(0, 3), st.floats(0, 5))
def test_total_monotone_in_each_component(parts, which, bump):
    w = LossWeights(0.05, 1.0, 0.1)
    raised = list(parts)
    raised[which] += bump
    assert total_loss(*raised, weights=w).total >= total_loss(*parts, weights=w).total


def test_total_gradients_reach_every_term():
    leaves = {k: ag.param(np.asarray(v)) for k, v in dict(d=1.0, b=2.0, i=3.0, t=4.0).items()}
    br = total_loss(leaves["d"], leaves["b"], leaves["i"], leaves["t"], LossWeights(0.05, 0.5, 0.2))
    ag.backward(br.total_tensor)
    grads = [float(leaves[k].grad) for k in "dbit"]
    assert grads == pytest.approx([1.0, 0.05, 0.025, 0.2])


def _loss_case(rng, which):
    if which == "distill":
        t = rng.standard_normal((9, 6))
        return (lambda v: distillation_loss(v["s"], t)), {"s": rng.standard_normal((9, 6))}
    if which == "distill_l2":
        t = rng.standard_normal((9, 6))
        return (lambda v: distillation_loss(v["s"], t, "l2")), {"s": rng.standard_normal((9, 6))}
    if which == "multiview":
        t = rng.standard_normal((9, 6))
        vid = np.r_[np.zeros(4, int), np.ones(5, int)]
        return (lambda v: multiview_distillation_loss(v["s"], t, vid)), {"s": rng.standard_normal((9, 6))}
    if which == "temporal":
        return (lambda v: temporal_loss(v["a"], v["b"])), {"a": rng.standard_normal((7, 5)),
                                                            "b": rng.standard_normal((7, 5))}
    labels = rng.integers(0, 2, 12)
    labels[0] = 1
    qs = query_set(labels, np.where(labels == 1, rng.uniform(0, 1, 12), 0.0))

    def run(v):
        bce, mse = occupancy_loss(v["o"], qs)
        return ag.add(bce, mse)
    return run, {"o": rng.standard_normal((12, 2))}


@pytest.mark.parametrize("which", ["distill", "distill_l2", "multiview", "temporal", "occupancy"])
def test_loss_gradients_match_finite_differences(which):
    worst = 0.0
    for seed in range(20):
        build, leaves = _loss_case(np.random.default_rng(seed), which)
        worst = max(worst, check_leaf_grads(build, leaves))
    assert worst < 1e-4

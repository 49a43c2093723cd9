import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from bayes_sl.errors import DataError, DimensionError, UsageError
from bayes_sl.metrics import ConfusionAccumulator, calibration, miou, mode_coverage, top_k_percent

from oracles import ece_loops, miou_loops, top_k_loops


def test_top_k_examples():
    assert top_k_percent(np.full((3, 7), 0.4), 0.3).value == pytest.approx(0.4)
    assert top_k_percent(np.arange(1, 101), 0.05).value == 98.0
    scores = np.random.default_rng(0).normal(size=(4, 9))
    assert top_k_percent(scores, 1.0).value == pytest.approx(scores.mean())
    assert top_k_percent(np.arange(1, 101), 0.05, higher_is_better=False).value == 3.0


def test_top_k_rejects_bad_input():
    with pytest.raises(UsageError):
        top_k_percent(np.zeros((2, 0)), 0.1)
    with pytest.raises(UsageError):
        top_k_percent(np.ones(3), 0.0)
    with pytest.raises(UsageError):
        top_k_percent(np.ones(3), 1.5)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 30)), elements=st.floats(-1e3, 1e3)),
       st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_top_k_monotone_and_above_mean(scores, k1, k2):
    lo, hi = sorted((k1, k2))
    assert top_k_percent(scores, lo).value >= top_k_percent(scores, hi).value - 1e-9
    assert top_k_percent(scores, lo).value >= scores.mean() - 1e-9


def test_miou_examples():
    gt = np.array([[0, 1], [1, 0]])
    assert miou(gt, gt, 2) == 1.0
    assert miou(np.zeros(4, int), np.ones(4, int), 2) == 0.0
    pred = np.array([0, 0, 1, 1, 0, 0, 1, 1])
    truth = np.array([0, 1, 0, 1, 0, 1, 0, 1])  # half of the positions flipped
    assert miou(pred, truth, 2) == pytest.approx(1 / 3)


def test_miou_ignore_label_and_errors():
    assert miou(np.array([0, 1, 1]), np.array([0, 255, 255]), 2, ignore_label=255) == 1.0
    with pytest.raises(DataError):
        miou(np.array([0, 3]), np.array([0, 1]), 2)
    with pytest.raises(DimensionError):
        miou(np.zeros(3, int), np.zeros(4, int), 2)


@given(st.integers(2, 5), st.integers(0, 2**31))
@settings(max_examples=30)
def test_miou_invariant_under_relabeling(c, seed):
    rng = np.random.default_rng(seed)
    pred, gt = rng.integers(0, c, size=(2, 40))
    perm = rng.permutation(c)
    assert miou(perm[pred], perm[gt], c) == pytest.approx(miou(pred, gt, c), abs=1e-12)


def test_confusion_merge_equals_joint_update():
    rng = np.random.default_rng(1)
    pred, gt = rng.integers(0, 4, size=(2, 2, 50))
    merged = ConfusionAccumulator(4).update(pred[0], gt[0]).merge(ConfusionAccumulator(4).update(pred[1], gt[1]))
    joint = ConfusionAccumulator(4).update(pred, gt)
    np.testing.assert_array_equal(merged.tp, joint.tp)
    assert merged.miou() == joint.miou()
    assert np.all(merged.fp >= 0) and np.all(merged.fn >= 0)


def test_calibration_oracle_predictor():
    labels = np.random.default_rng(0).integers(0, 3, size=200)
    probs = np.eye(3)[labels].T
    table = calibration(probs, labels, 10)
    assert table.frequency[-1] == 1.0
    assert table.ece == pytest.approx(0.0, abs=1e-12)
    assert table.total == 600


def test_calibration_constant_half():
    labels = np.arange(1000) % 2
    table = calibration(np.full((2, 1000), 0.5), labels, 10)
    assert table.count[5] == 2000
    assert table.frequency[5] == pytest.approx(0.5)


def test_calibration_self_consistent_sampling():
    rng = np.random.default_rng(0)
    probs = rng.dirichlet(np.ones(4), size=10**4).T
    labels = np.array([rng.choice(4, p=p) for p in probs.T])
    table = calibration(probs, labels, 10)
    used = table.count > 0
    sd = np.sqrt(table.confidence[used] * (1 - table.confidence[used]) / table.count[used])
    assert np.all(np.abs(table.confidence[used] - table.frequency[used]) <= 3 * sd + 1e-12)


@given(st.integers(2, 5), st.integers(1, 40), st.integers(2, 12), st.integers(0, 2**31))
@settings(max_examples=30)
def test_calibration_conserves_counts_and_bins_hold_their_means(c, n, bins, seed):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(c), size=n).T
    table = calibration(probs, rng.integers(0, c, size=n), bins)
    assert table.total == c * n
    used = table.count > 0
    lo, hi = table.edges[:-1][used], table.edges[1:][used]
    assert np.all(table.confidence[used] >= lo - 1e-12) and np.all(table.confidence[used] <= hi + 1e-12)


def test_calibration_errors():
    with pytest.raises(UsageError):
        calibration(np.ones((2, 3)) / 2, np.zeros(3, int), 1)
    with pytest.raises(DimensionError):
        calibration(np.ones((2, 3)) / 2, np.zeros(4, int))


def test_mode_coverage_examples():
    assert list(mode_coverage(np.full(6, 0.3), [0.3, -0.3], 0.15)) == [6, 0]
    alternating = np.array([0.3, -0.3] * 5)
    assert list(mode_coverage(alternating, [-0.3, 0.3], 0.15)) == [5, 5]
    spread = np.array([-1.0, 0.1, 2.0])
    assert mode_coverage(spread, [0.0, 1.0], math.inf).min() == 3
    with pytest.raises(UsageError):
        mode_coverage([], [0.0], 1.0)


# brute-force equivalence on random small instances

@pytest.mark.parametrize("seed", range(50))
def test_metrics_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    scores = rng.normal(size=(int(rng.integers(1, 5)), int(rng.integers(1, 25))))
    k = float(rng.uniform(0.01, 1.0))
    assert abs(top_k_percent(scores, k).value - top_k_loops(scores, k)) < 1e-10

    c = int(rng.integers(2, 5))
    pred, gt = rng.integers(0, c, size=(2, int(rng.integers(1, 30))))
    assert abs(miou(pred, gt, c) - miou_loops(pred, gt, c)) < 1e-10

    n = int(rng.integers(1, 30))
    probs = rng.dirichlet(np.ones(c), size=n).T
    labels = rng.integers(0, c, size=n)
    bins = int(rng.integers(2, 12))
    assert abs(calibration(probs, labels, bins).ece - ece_loops(probs, labels, bins)) < 1e-10

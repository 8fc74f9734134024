"""Evaluation metrics against the pairwise-comparison oracle and closed forms."""

import math

import numpy as np
import pytest

from segmia.metrics import (
    Curve,
    ScoredExample,
    auc,
    f_score,
    mann_whitney_auc,
    max_f,
    pr_curve,
    random_guess_f,
    roc_curve,
    write_curve_csv,
)


def examples_from(members, others):
    return [ScoredExample(s, True) for s in members] + [ScoredExample(s, False) for s in others]


def test_perfect_separation():
    ex = examples_from([0.9, 0.8], [0.2, 0.1])
    assert auc(roc_curve(ex)) == 1.0
    assert mann_whitney_auc(ex) == 1.0
    assert max_f(pr_curve(ex)) == 1.0


def test_all_tied_scores():
    ex = examples_from([0.5, 0.5], [0.5, 0.5, 0.5])
    assert abs(auc(roc_curve(ex)) - 0.5) < 1e-12
    assert abs(mann_whitney_auc(ex) - 0.5) < 1e-12


def test_worked_example_three_quarters():
    ex = examples_from([0.9, 0.4], [0.6, 0.1])
    assert abs(auc(roc_curve(ex)) - 0.75) < 1e-12
    assert abs(mann_whitney_auc(ex) - 0.75) < 1e-12


def test_roc_endpoints_and_monotonicity():
    rng = np.random.default_rng(0)
    ex = examples_from(rng.normal(1, 1, 30), rng.normal(0, 1, 40))
    curve = roc_curve(ex)
    assert (curve.xs[0], curve.ys[0]) == (0.0, 0.0)
    assert (curve.xs[-1], curve.ys[-1]) == (1.0, 1.0)
    assert curve.thresholds[0] == math.inf
    assert all(a <= b for a, b in zip(curve.xs, curve.xs[1:]))
    assert all(a <= b for a, b in zip(curve.ys, curve.ys[1:]))


def test_trapezoid_auc_equals_pairwise_oracle_with_ties():
    rng = np.random.default_rng(1)
    for trial in range(50):
        # draw from a small discrete grid so ties are common
        m = rng.choice(np.linspace(0, 1, 7), size=rng.integers(2, 25))
        n = rng.choice(np.linspace(0, 1, 7), size=rng.integers(2, 25))
        ex = examples_from(m, n)
        assert abs(auc(roc_curve(ex)) - mann_whitney_auc(ex)) < 1e-9, f"trial {trial}"


def test_auc_is_invariant_under_monotone_transforms():
    rng = np.random.default_rng(2)
    m = rng.normal(0.7, 0.5, 40)
    n = rng.normal(0.0, 0.5, 60)
    base = auc(roc_curve(examples_from(m, n)))
    warped = auc(roc_curve(examples_from(np.tanh(m) * 3 + 1, np.tanh(n) * 3 + 1)))
    assert abs(base - warped) < 1e-12


def test_random_scores_are_near_half():
    rng = np.random.default_rng(3)
    ex = examples_from(rng.random(200), rng.random(200))
    assert 0.4 <= auc(roc_curve(ex)) <= 0.6


def test_pr_curve_recall_is_non_decreasing():
    rng = np.random.default_rng(4)
    ex = examples_from(rng.random(25), rng.random(30))
    curve = pr_curve(ex)
    assert all(a <= b for a, b in zip(curve.xs, curve.xs[1:]))
    assert curve.xs[-1] == 1.0


def test_pr_all_tied_scores_closed_form():
    m, n = 4, 8
    ex = examples_from([0.3] * m, [0.3] * n)
    curve = pr_curve(ex)
    assert len(curve.xs) == 1
    assert abs(max_f(curve) - 2 * m / (2 * m + n)) < 1e-12


def test_random_guess_f_closed_forms():
    # precision M/(M+N), recall 1/2
    assert abs(random_guess_f(10, 10) - 0.5) < 1e-12
    assert abs(random_guess_f(10, 30) - 1 / 3) < 1e-12
    got = random_guess_f(7, 5)
    p = 7 / 12
    assert abs(got - 2 * p * 0.5 / (p + 0.5)) < 1e-12
    with pytest.raises(ValueError):
        random_guess_f(0, 5)


def test_f_score_zero_division():
    assert f_score(0.0, 0.0) == 0.0


def test_needs_both_classes():
    with pytest.raises(ValueError):
        roc_curve(examples_from([0.5], []))
    with pytest.raises(ValueError):
        mann_whitney_auc(examples_from([], [0.5]))


def test_curve_csv_format(tmp_path):
    curve = Curve(xs=[0.0, 0.5, 1.0], ys=[0.0, 0.75, 1.0], thresholds=[math.inf, 0.625, 0.125])
    path = tmp_path / "roc.csv"
    write_curve_csv(path, curve)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "threshold,x,y"
    assert lines[1] == "inf,0,0"
    assert lines[2] == "0.625,0.5,0.75"
    assert len(lines) == 4

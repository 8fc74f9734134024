"""Patch selection, attacker training, scoring, and baselines."""

import dataclasses

import numpy as np
import pytest

from conftest import make_posterior
from segmia.errors import AllPatchesRejectedError, ShapeError
from segmia.attack import (
    AttackTrainConfig,
    PatchSelector,
    baseline_mean_confidence,
    baseline_mean_loss,
    baseline_pixel_attacker,
    infer_membership,
    load_attacker,
    mean_true_confidence,
    pixel_attacker_config,
    pixel_score_map,
    save_attacker,
    score_patch,
    select_patches,
    sliding_rects,
    train_patch_attacker,
)
from segmia.metrics import ScoredExample, auc, roc_curve
from segmia.representation import PatchRect, crop, one_hot_labels


def map_pair(seed, h=16, w=16, c=3, sharp=None):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, c, (h, w))
    p = make_posterior(rng, h, w, c, sharp_true=sharp, labels=labels)
    return p, one_hot_labels(labels, c)


def test_sliding_grid_exact_tiling():
    rects = sliding_rects(64, 64, 16, 16, 16)
    assert len(rects) == 16
    assert rects[0] == PatchRect(0, 0, 16, 16)
    assert rects[-1] == PatchRect(48, 48, 16, 16)


def test_sliding_grid_clamps_final_row_and_column():
    rects = sliding_rects(64, 64, 16, 16, 12)
    tops = sorted({r.top for r in rects})
    assert tops == [0, 12, 24, 36, 48]  # 48 is the clamped final offset
    covered = np.zeros((64, 64), dtype=bool)
    for r in rects:
        covered[r.top : r.top + 16, r.left : r.left + 16] = True
    assert covered.all()


def test_sliding_rejects_oversized_patch():
    with pytest.raises(ShapeError):
        sliding_rects(8, 8, 16, 16, 4)


def test_random_selector_is_deterministic_and_in_bounds():
    p, t = map_pair(0)
    sel = PatchSelector(kind="random", count=10, seed=5)
    a = select_patches(sel, p, t, 4, 4)
    b = select_patches(sel, p, t, 4, 4)
    assert a == b
    assert len(a) == 10
    for r in a:
        r.check_within(16, 16)
    c = select_patches(dataclasses.replace(sel, seed=6), p, t, 4, 4)
    assert a != c


def test_rejection_with_tau_one_equals_random():
    p, t = map_pair(1)
    random_sel = PatchSelector(kind="random", count=8, seed=9)
    reject_sel = PatchSelector(kind="rejection", count=8, tau=1.0, seed=9)
    assert select_patches(reject_sel, p, t, 4, 4) == select_patches(random_sel, p, t, 4, 4)


def test_rejection_discards_confident_windows():
    # top half saturated (rejected), bottom half diffuse (accepted)
    sharp_p, sharp_t = map_pair(2, h=8, sharp=0.97)
    soft_p, soft_t = map_pair(22, h=8)
    p = np.concatenate([sharp_p, soft_p], axis=0)
    t = np.concatenate([sharp_t, soft_t], axis=0)
    sel = PatchSelector(kind="rejection", count=12, tau=0.8, seed=3)
    rects = select_patches(sel, p, t, 4, 4)
    assert len(rects) == 12
    for r in rects:
        assert mean_true_confidence(p, t, r) <= 0.8
    assert all(r.top >= 4 for r in rects)  # nothing fully inside the saturated band


def test_rejection_all_rejected_raises_structured_error():
    _, t = map_pair(3)
    sel = PatchSelector(kind="rejection", count=4, tau=0.99, seed=0)
    with pytest.raises(AllPatchesRejectedError) as info:
        select_patches(sel, t, t, 4, 4)  # exact one-hot: confidence is 1 everywhere
    assert info.value.attempts == 80


def test_mean_true_confidence_closed_form_and_loop():
    c = 4
    p = np.full((8, 8, c), 1.0 / c, dtype=np.float32)
    t = one_hot_labels(np.zeros((8, 8), dtype=int), c)
    assert abs(mean_true_confidence(p, t, PatchRect(0, 0, 8, 8)) - 1.0 / c) < 1e-7
    p2, t2 = map_pair(4)
    rect = PatchRect(3, 5, 6, 4)
    got = mean_true_confidence(p2, t2, rect)
    pc, tc = crop(p2, rect), crop(t2, rect)
    want = np.mean([pc[i, j] @ tc[i, j] for i in range(6) for j in range(4)])
    assert abs(got - want) < 1e-7


def train_toy_attacker(representation="slm", patch=6, epochs=20, seed=11):
    members = [map_pair(100 + i, sharp=0.95)[0:2] for i in range(6)]
    others = [map_pair(200 + i)[0:2] for i in range(6)]
    config = AttackTrainConfig(
        representation=representation,
        patch_height=patch,
        patch_width=patch,
        epochs=epochs,
        learning_rate=0.05,
        patches_per_image=4,
    )
    return train_patch_attacker(members, others, 3, config, seed=seed)


def test_attacker_learns_separable_toy_signal():
    attacker = train_toy_attacker()
    sel = PatchSelector(kind="random", count=8, seed=1)
    examples = []
    for i in range(8):
        p, t = map_pair(300 + i, sharp=0.95)
        examples.append(ScoredExample(infer_membership(attacker, p, t, sel).score, True))
        p, t = map_pair(400 + i)
        examples.append(ScoredExample(infer_membership(attacker, p, t, sel).score, False))
    assert auc(roc_curve(examples)) >= 0.9
    assert attacker.loss_trajectory[-1] < attacker.loss_trajectory[0]


def test_attacker_with_identical_pools_finds_nothing():
    shared = [map_pair(500 + i) for i in range(6)]
    config = AttackTrainConfig(patch_height=6, patch_width=6, epochs=5, learning_rate=0.1)
    attacker = train_patch_attacker(shared, shared, 3, config, seed=2)
    sel = PatchSelector(kind="random", count=8, seed=4)
    examples = []
    for i in range(10):
        p, t = map_pair(600 + i)
        examples.append(ScoredExample(infer_membership(attacker, p, t, sel).score, i % 2 == 0))
    assert 0.25 <= auc(roc_curve(examples)) <= 0.75


def test_verdict_score_is_exact_mean_of_patch_scores():
    attacker = train_toy_attacker(epochs=2)
    p, t = map_pair(7)
    sel = PatchSelector(kind="sliding", step=5)
    verdict = infer_membership(attacker, p, t, sel)
    assert verdict.score == float(np.mean(verdict.patch_scores))
    assert len(verdict.patch_scores) == len(verdict.rects)
    assert not verdict.fallback


def test_single_patch_matches_score_patch():
    attacker = train_toy_attacker(epochs=2)
    p, t = map_pair(8)
    sel = PatchSelector(kind="random", count=1, seed=3)
    verdict = infer_membership(attacker, p, t, sel)
    rect = verdict.rects[0]
    direct = score_patch(attacker, crop(p, rect), crop(t, rect))
    assert abs(verdict.score - direct) < 1e-6


def test_fallback_to_random_when_all_rejected():
    attacker = train_toy_attacker(epochs=1)
    _, t = map_pair(9)
    sel = PatchSelector(kind="rejection", count=5, tau=0.5, seed=8)
    verdict = infer_membership(attacker, t, t, sel)
    assert verdict.fallback
    assert len(verdict.rects) == 5
    random_rects = select_patches(
        dataclasses.replace(sel, kind="random"), t, t, attacker.patch_height, attacker.patch_width
    )
    assert verdict.rects == random_rects


def test_score_patch_validates_patch_shape():
    attacker = train_toy_attacker(epochs=1)
    p, t = map_pair(10)
    with pytest.raises(ShapeError):
        score_patch(attacker, p, t)  # full map, not a patch


def test_untrained_attacker_still_scores_in_unit_interval():
    members = [map_pair(20)]
    config = AttackTrainConfig(patch_height=4, patch_width=4, epochs=0)
    attacker = train_patch_attacker(members, members, 3, config, seed=0)
    p, t = map_pair(21)
    verdict = infer_membership(attacker, p, t, PatchSelector(kind="random", count=3, seed=0))
    assert all(0.0 < s < 1.0 for s in verdict.patch_scores)
    assert attacker.loss_trajectory == []


def test_pixel_score_map_matches_per_pixel_patch_scores():
    members = [map_pair(30 + i, h=8, w=8, sharp=0.9) for i in range(3)]
    others = [map_pair(40 + i, h=8, w=8) for i in range(3)]
    attacker = train_patch_attacker(
        members, others, 3, pixel_attacker_config(epochs=2, patches_per_image=8), seed=5
    )
    p, t = map_pair(50, h=6, w=5)
    dense = pixel_score_map(attacker, p, t)
    assert dense.shape == (6, 5)
    for i in range(6):
        for j in range(5):
            rect = PatchRect(i, j, 1, 1)
            want = score_patch(attacker, crop(p, rect), crop(t, rect))
            assert abs(dense[i, j] - want) < 1e-6
    assert abs(baseline_pixel_attacker(attacker, p, t) - dense.mean()) < 1e-12


def test_pixel_scoring_requires_unit_patch():
    attacker = train_toy_attacker(epochs=1)
    p, t = map_pair(51)
    with pytest.raises(ShapeError):
        pixel_score_map(attacker, p, t)


def test_baseline_orientation_prefers_members():
    member_p, member_t = map_pair(60, sharp=0.97)
    other_p, other_t = map_pair(61)
    assert baseline_mean_confidence(member_p) > baseline_mean_confidence(other_p)
    assert baseline_mean_loss(member_p, member_t) > baseline_mean_loss(other_p, other_t)


def test_attacker_save_load_round_trip(tmp_path):
    attacker = train_toy_attacker(epochs=2)
    save_attacker(tmp_path / "atk", attacker)
    back = load_attacker(tmp_path / "atk")
    p, t = map_pair(70)
    sel = PatchSelector(kind="sliding", step=10)
    assert infer_membership(back, p, t, sel).score == infer_membership(attacker, p, t, sel).score
    assert back.representation == attacker.representation
    assert np.allclose(back.loss_trajectory, attacker.loss_trajectory)


def test_selector_validation():
    with pytest.raises(ValueError):
        PatchSelector(kind="spiral")
    with pytest.raises(ValueError):
        PatchSelector(kind="sliding", step=0)
    with pytest.raises(ValueError):
        PatchSelector(kind="rejection", tau=0.0)
    with pytest.raises(ValueError):
        PatchSelector(kind="random", count=0)


def test_train_config_validation():
    with pytest.raises(ValueError):
        AttackTrainConfig(representation="raw")
    with pytest.raises(ValueError):
        AttackTrainConfig(patch_height=0)

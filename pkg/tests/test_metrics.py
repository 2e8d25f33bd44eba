"""Segment matching, PQ family, mIoU, border-IoU, oracle equivalence."""

import numpy as np
import pytest

from lidarpan import ValidationError
from lidarpan.metrics import (
    border_band,
    border_iou,
    match_segments,
    merge_matches,
    miou,
    panoptic_scores,
    pq_oracle,
)
from lidarpan.pcl_io import ClassDef, ClassMap, LabelSet


def toy_map():
    return ClassMap(classes=[
        ClassDef("void", [0], 0, ignore=True),
        ClassDef("car", [10], 1, thing=True),
        ClassDef("person", [30], 2, thing=True),
        ClassDef("road", [40], 3),
        ClassDef("grass", [70], 4),
    ])


def labels(sem, inst=None):
    sem = np.asarray(sem)
    inst = np.zeros_like(sem) if inst is None else np.asarray(inst)
    return LabelSet(sem, inst)


def random_panoptic_pair(rng, n=200, n_inst=4):
    cmap = toy_map()
    gt_sem = rng.integers(0, 5, n)
    gt_inst = np.where(np.isin(gt_sem, [1, 2]), rng.integers(0, n_inst + 1, n), 0)
    pred_sem = gt_sem.copy()
    pred_inst = gt_inst.copy()
    flip = rng.uniform(size=n) < 0.25
    pred_sem[flip] = rng.integers(0, 5, int(flip.sum()))
    pred_inst[flip] = rng.integers(0, n_inst + 1, int(flip.sum()))
    pred_inst[~np.isin(pred_sem, [1, 2])] = 0
    return labels(pred_sem, pred_inst), labels(gt_sem, gt_inst), cmap


def test_identical_inputs_all_tp_iou_one():
    rng = np.random.default_rng(0)
    pred, gt, cmap = random_panoptic_pair(rng)
    m = match_segments(gt, gt, cmap)
    assert not m.fp and not m.fn
    for cls, tps in m.tp.items():
        for _, _, iou in tps:
            assert iou == 1.0
    rep = panoptic_scores(m, cmap)
    assert rep.pq == pytest.approx(1.0)
    assert rep.sq == pytest.approx(1.0)
    assert rep.rq == pytest.approx(1.0)


def test_hand_case_80_of_100():
    # GT: one car instance of 100 elements; prediction overlaps 80, size 100
    gt_sem = np.full(120, 1)
    gt_inst = np.zeros(120, dtype=np.int64)
    gt_inst[:100] = 7
    gt_sem[100:] = 3
    pred_sem = np.full(120, 1)
    pred_inst = np.zeros(120, dtype=np.int64)
    pred_inst[:80] = 9
    pred_inst[100:120] = 9
    pred_sem[80:100] = 3
    cmap = toy_map()
    m = match_segments(labels(pred_sem, pred_inst), labels(gt_sem, gt_inst), cmap)
    (pk, gk, iou), = m.tp[1]
    assert iou == pytest.approx(80 / 120)
    rep = panoptic_scores(m, cmap)
    assert rep.per_class[1]["pq"] == pytest.approx(0.6667, abs=1e-4)
    assert rep.per_class[1]["sq"] == pytest.approx(0.6667, abs=1e-4)
    assert rep.per_class[1]["rq"] == pytest.approx(1.0)


def test_below_threshold_is_fp_plus_fn():
    # overlap 40 of 100, both size 100 -> IoU 0.25: no match
    gt_sem = np.full(160, 1)
    gt_inst = np.zeros(160, dtype=np.int64)
    gt_inst[:100] = 1
    pred_inst = np.zeros(160, dtype=np.int64)
    pred_inst[60:160] = 2
    cmap = toy_map()
    m = match_segments(labels(gt_sem.copy(), pred_inst), labels(gt_sem, gt_inst), cmap)
    assert m.tp.get(1, []) == []
    assert len(m.fp[1]) == 1 and len(m.fn[1]) == 1
    rep = panoptic_scores(m, cmap)
    assert rep.per_class[1]["pq"] == 0.0
    assert rep.per_class[1]["rq"] == 0.0
    assert rep.per_class[1]["sq"] == 0.0


def test_fp_only_class_scores_zero():
    pred = labels([1, 1, 3, 3], [5, 5, 0, 0])
    gt = labels([3, 3, 3, 3])
    rep = panoptic_scores(match_segments(pred, gt, toy_map()), toy_map())
    assert rep.per_class[1] == {"pq": 0.0, "sq": 0.0, "rq": 0.0, "iou": 0.0,
                                "tp": 0, "fp": 1, "fn": 0}


def test_pq_equals_sq_times_rq():
    rng = np.random.default_rng(7)
    for _ in range(20):
        pred, gt, cmap = random_panoptic_pair(rng)
        rep = panoptic_scores(match_segments(pred, gt, cmap), cmap)
        for cls, row in rep.per_class.items():
            assert abs(row["pq"] - row["sq"] * row["rq"]) < 1e-9
            for key in ("pq", "sq", "rq", "iou"):
                assert 0.0 <= row[key] <= 1.0


def test_instance_id_permutation_invariance():
    rng = np.random.default_rng(3)
    pred, gt, cmap = random_panoptic_pair(rng)
    perm = rng.permutation(64) + 1
    pred2 = labels(pred.semantic, np.where(pred.instance > 0,
                                           perm[pred.instance % 64], 0))
    r1 = panoptic_scores(match_segments(pred, gt, cmap), cmap)
    r2 = panoptic_scores(match_segments(pred2, gt, cmap), cmap)
    assert r1.pq == pytest.approx(r2.pq)
    assert r1.tp == r2.tp and r1.fp == r2.fp and r1.fn == r2.fn


def test_shrinking_tp_below_threshold_decreases_pq():
    cmap = toy_map()
    gt_sem = np.full(100, 1)
    gt_inst = np.full(100, 1)
    scores = []
    for kept in (100, 80, 60, 49):
        pred_inst = np.zeros(100, dtype=np.int64)
        pred_inst[:kept] = 1
        pred_sem = np.where(pred_inst > 0, 1, 3)
        rep = panoptic_scores(match_segments(labels(pred_sem, pred_inst),
                                             labels(gt_sem, gt_inst), cmap), cmap)
        scores.append(rep.per_class[1]["pq"])
    assert all(a >= b for a, b in zip(scores, scores[1:]))
    assert scores[-1] == 0.0  # 49/100 -> IoU below 0.5


def test_ignore_gt_removed_and_pred_ignore_no_fp():
    cmap = toy_map()
    gt = labels([0, 0, 3, 3, 1, 1], [0, 0, 0, 0, 2, 2])
    pred = labels([1, 1, 3, 0, 1, 1], [4, 4, 0, 0, 2, 2])
    m = match_segments(pred, gt, cmap)
    # pred car instance 4 lives entirely on ignored gt -> removed, no FP
    assert 1 in m.tp and len(m.tp[1]) == 1
    assert m.fp.get(1, []) == []
    # pred ignore over road gt: no FP segment for the void pool
    assert all(cls != 0 for cls in m.fp)


def test_unsegmented_thing_pixels_form_no_segment():
    cmap = toy_map()
    gt = labels([1, 1, 1, 1], [0, 0, 0, 0])   # filtered tiny instance: id 0
    pred = labels([1, 1, 1, 1], [3, 3, 3, 3])
    m = match_segments(pred, gt, cmap)
    assert m.fn.get(1, []) == []               # no gt segment to miss
    assert len(m.fp.get(1, [])) == 1           # prediction stays unmatched


def test_length_mismatch():
    with pytest.raises(ValidationError):
        match_segments(labels([1, 1]), labels([1]), toy_map())


def test_miou_identity_and_disjoint():
    per, mean = miou([1, 2, 3], [1, 2, 3], ignore_id=0)
    assert mean == pytest.approx(1.0)
    per, mean = miou([1, 1, 1], [2, 2, 2], ignore_id=0)
    assert mean == 0.0


def test_miou_hand_case():
    # class 1: pred covers 50 of 75 gt, predicts 50 total -> IoU 50/75
    gt = np.array([1] * 75 + [2] * 25)
    pred = np.array([1] * 50 + [2] * 25 + [2] * 25)
    per, mean = miou(pred, gt, ignore_id=0)
    assert per[1] == pytest.approx(50 / 75, abs=1e-4)
    assert per[1] == pytest.approx(0.6667, abs=1e-4)


def test_border_band_and_iou_identity():
    gt_sem = np.zeros((12, 12), dtype=np.int64)
    gt_sem[4:8, 4:8] = 1
    gt_inst = (gt_sem == 1).astype(np.int64)
    per = border_iou((gt_sem, gt_inst), (gt_sem, gt_inst), ignore_id=9, width=2)
    assert all(v == pytest.approx(1.0) for v in per.values())


def brute_force_band(code, width):
    h, w = code.shape
    band = np.zeros((h, w), dtype=bool)
    for r in range(h):
        for c in range(w):
            for rr in range(max(0, r - width), min(h, r + width + 1)):
                for cc in range(max(0, c - width), min(w, c + width + 1)):
                    if code[rr, cc] != code[r, c]:
                        band[r, c] = True
    return band


def test_border_band_matches_brute_force():
    rng = np.random.default_rng(5)
    sem = (rng.uniform(size=(10, 14)) < 0.3).astype(np.int64)
    inst = np.zeros_like(sem)
    band = border_band(sem, inst, 2)
    assert np.array_equal(band, brute_force_band(sem * (1 << 17), 2))


def test_border_iou_dilated_prediction():
    gt_sem = np.zeros((16, 16), dtype=np.int64)
    gt_sem[3:13, 3:13] = 1
    gt_inst = (gt_sem == 1).astype(np.int64)
    pred_sem = np.zeros((16, 16), dtype=np.int64)
    pred_sem[2:14, 2:14] = 1   # dilated by one pixel
    pred_inst = (pred_sem == 1).astype(np.int64)
    per = border_iou((pred_sem, pred_inst), (gt_sem, gt_inst), ignore_id=9, width=2)
    band = brute_force_band(gt_sem * (1 << 17) + gt_inst, 2)
    inter = int(((pred_sem == 1) & (gt_sem == 1) & band).sum())
    union = int((((pred_sem == 1) | (gt_sem == 1)) & band).sum())
    assert per[1] == pytest.approx(inter / union)


def test_border_iou_class_subset_and_absent():
    gt_sem = np.zeros((8, 8), dtype=np.int64)
    gt_sem[2:6, 2:6] = 1
    inst = np.zeros_like(gt_sem)
    per = border_iou((gt_sem, inst), (gt_sem, inst), ignore_id=9, width=1,
                     class_subset=[1])
    assert set(per) == {1}


def test_oracle_identity_and_empty_prediction():
    rng = np.random.default_rng(1)
    pred, gt, cmap = random_panoptic_pair(rng)
    rep = pq_oracle(gt, gt, cmap)
    assert rep.pq == pytest.approx(1.0)
    empty = labels(np.full(len(gt.semantic), 3), np.zeros(len(gt.semantic)))
    rep2 = pq_oracle(empty, gt, cmap)
    assert rep2.tp == 0
    assert rep2.fn > 0


@pytest.mark.parametrize("seed", range(8))
def test_oracle_agrees_with_fast_path(seed):
    rng = np.random.default_rng(seed + 100)
    pred, gt, cmap = random_panoptic_pair(rng, n=int(rng.integers(20, 400)))
    fast = panoptic_scores(match_segments(pred, gt, cmap), cmap)
    slow = pq_oracle(pred, gt, cmap)
    assert fast.as_dict() == slow.as_dict()


def test_merge_matches_accumulates():
    rng = np.random.default_rng(9)
    pairs = [random_panoptic_pair(rng) for _ in range(3)]
    cmap = pairs[0][2]
    merged = merge_matches([match_segments(p, g, cmap) for p, g, _ in pairs])
    rep = panoptic_scores(merged, cmap)
    total_tp = sum(panoptic_scores(match_segments(p, g, cmap), cmap).tp
                   for p, g, _ in pairs)
    assert rep.tp == total_tp

from fractions import Fraction

import numpy as np
import pytest

import oracles
from stereoguide.boxes import Box3D
from stereoguide.data_io import (Category, GroundTruthObject, PredictionRecord, bev_to_camera_box,
                                 serialize_labels, serialize_predictions)
from stereoguide.evaluator import (Criterion, Difficulty, EvalConfig, average_precision, compute_ap,
                                   difficulty_bucket, evaluate, load_folders, match_frame)

BEV = EvalConfig(0.7, Criterion.AP_BEV)


def gt_at(x, y, category=Category.CAR, height=50.0, occ=0, trunc=0.0, dims=(1.5, 1.6, 3.9)):
    loc, _, yaw = bev_to_camera_box(Box3D(x, y, dims[0] / 2, dims[2], dims[1], dims[0]))
    return GroundTruthObject(category, trunc, occ, 0.0, (0.0, 100.0, 50.0, 100.0 + height), dims, loc, yaw)


def pred_at(x, y, score, frame, category=Category.CAR, bbox2d=(0.0, 0.0, 0.0, 0.0)):
    return PredictionRecord(Box3D(x, y, 0.75, 3.9, 1.6, 1.5), score, category, frame, bbox2d)


def toy_set():
    """Five frames, three cars; ranked predictions are TP, FP, TP."""
    gts = {"f0": [gt_at(10, 0)], "f1": [gt_at(20, 3)], "f2": [gt_at(15, -4)], "f3": [], "f4": []}
    preds = [pred_at(10, 0, 0.9, "f0"), pred_at(30, 5, 0.8, "f3"), pred_at(20.1, 3, 0.7, "f1")]
    return preds, gts


def test_toy_ap_matches_hand_computation():
    preds, gts = toy_set()
    ap = compute_ap(preds, gts, BEV)
    assert ap == float(Fraction(13, 24))
    assert ap == pytest.approx(oracles.ap40_staircase([1, 0, 1], 3), abs=1e-15)


def test_toy_ap_ignores_dontcare_hits_and_other_classes():
    preds, gts = toy_set()
    gts["f4"] = [GroundTruthObject(Category.DONTCARE, -1, -1, -10, (0, 0, 200, 200), (-1, -1, -1),
                                   (-1000, -1000, -1000), -10)]
    extra = [pred_at(5, 5, 0.95, "f4", bbox2d=(10, 10, 50, 50)),
             pred_at(10, 0, 0.99, "f0", category=Category.PEDESTRIAN)]
    assert compute_ap(preds + extra, gts, BEV) == float(Fraction(13, 24))


def test_trivial_cases():
    preds, gts = toy_set()
    assert compute_ap([], gts, BEV) == 0.0
    perfect = [pred_at(g.to_box3d().x, g.to_box3d().y, 0.9 - 0.1 * i, f)
               for i, (f, objs) in enumerate(gts.items()) for g in objs]
    assert compute_ap(perfect, gts, BEV) == 1.0


def test_average_precision_rule():
    # two of four objects found at ranks 1 and 3
    ap = average_precision([0.9, 0.8, 0.7], [1, 0, 1], 4)
    assert ap == float(Fraction(5, 12))
    assert ap == pytest.approx(oracles.ap40_staircase([1, 0, 1], 4), abs=1e-14)
    assert average_precision([], [], 0) == 0.0


def test_difficulty_buckets():
    assert difficulty_bucket(gt_at(0, 0, height=50, occ=0, trunc=0.0)) is Difficulty.EASY
    assert difficulty_bucket(gt_at(0, 0, height=30, occ=1, trunc=0.2)) is Difficulty.MODERATE
    assert difficulty_bucket(gt_at(0, 0, height=30, occ=2, trunc=0.4)) is Difficulty.HARD
    assert difficulty_bucket(gt_at(0, 0, height=10)) is None


def test_objects_outside_the_bucket_are_neither_missed_nor_penalized():
    gts = [gt_at(10, 0), gt_at(20, 0, height=30, occ=1)]
    preds = [pred_at(10, 0, 0.9, "a"), pred_at(20, 0, 0.8, "a")]
    flags, n = match_frame(preds, gts, BEV, Difficulty.EASY)
    assert n == 1 and flags.tolist() == [1, -1]
    flags, n = match_frame(preds, gts, BEV, Difficulty.MODERATE)
    assert n == 2 and flags.tolist() == [1, 1]


def test_each_ground_truth_matches_once():
    flags, n = match_frame([pred_at(10, 0, 0.9, "a"), pred_at(10.05, 0, 0.8, "a")], [gt_at(10, 0)], BEV)
    assert flags.tolist() == [1, 0] and n == 1


def test_evaluate_reports_every_bucket_and_criterion():
    preds, gts = toy_set()
    out = evaluate(preds, gts)
    assert set(out) == {(c.value, d.value) for c in Criterion for d in Difficulty}
    assert out[("AP_BEV", "Easy")] == float(Fraction(13, 24))


def test_config_validation():
    with pytest.raises(ValueError):
        EvalConfig(iou_threshold=0.0)
    assert EvalConfig.for_category(Category.PEDESTRIAN).iou_threshold == 0.5


def test_load_folders(tmp_path):
    preds, gts = toy_set()
    (tmp_path / "pred").mkdir()
    (tmp_path / "label").mkdir()
    for frame, objs in gts.items():
        (tmp_path / "label" / f"{frame}.txt").write_text(serialize_labels(objs))
        (tmp_path / "pred" / f"{frame}.txt").write_text(serialize_predictions([p for p in preds if p.frame_id == frame]))
    p2, g2 = load_folders(tmp_path / "pred", tmp_path / "label")
    assert compute_ap(p2, g2, BEV) == pytest.approx(float(Fraction(13, 24)), abs=1e-6)


# fuzzed properties -------------------------------------------------------------------

def random_case(rng):
    gts, preds = {}, []
    for f in range(rng.integers(1, 4)):
        frame = f"f{f}"
        cars = [(rng.uniform(5, 40), rng.uniform(-15, 15)) for _ in range(rng.integers(0, 4))]
        gts[frame] = [gt_at(x, y) for x, y in cars]
        for x, y in cars:
            for _ in range(rng.integers(0, 3)):
                preds.append(pred_at(x + rng.normal(0, 0.6), y + rng.normal(0, 0.3), rng.uniform(0.01, 1), frame))
        for _ in range(rng.integers(0, 3)):
            preds.append(pred_at(rng.uniform(5, 40), rng.uniform(-15, 15), rng.uniform(0.01, 1), frame))
    return preds, gts


def rescaled(preds, fn):
    return [PredictionRecord(p.box, fn(p.score), p.category, p.frame_id) for p in preds]


def test_fuzzed_evaluator_properties():
    rng = np.random.default_rng(11)
    low, high = EvalConfig(0.5, Criterion.AP_BEV), EvalConfig(0.7, Criterion.AP_BEV)
    for _ in range(1000):
        preds, gts = random_case(rng)
        ap = compute_ap(preds, gts, low)
        assert 0.0 <= ap <= 1.0
        assert compute_ap(rescaled(preds, lambda s: s / 2), gts, low) == ap
        assert compute_ap(rescaled(preds, lambda s: s ** 3), gts, low) == ap
        frame = next(iter(gts))
        lowest = min([p.score for p in preds], default=1.0) / 2
        assert compute_ap(preds + [pred_at(500, 500, lowest, frame)], gts, low) <= ap
        assert compute_ap(preds, gts, high) <= ap

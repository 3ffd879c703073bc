import math

import pytest
from hypothesis import given, settings, strategies as st

from pmmw_detr.evaluation import (Detection, EvalConfig, EvalInputError, GtBox, ap_interpolated, ar_at,
                                  greedy_match, pr_curve, read_report, report, write_pr_csv, write_report)
from pmmw_detr.rng import SeededRng

from oracles import random_scenario, reference_report


@pytest.mark.parametrize("seed", range(60))
def test_report_matches_reference(seed):
    dets, gts = random_scenario(seed)
    got = report(dets, gts).metrics
    want = reference_report(dets, gts)
    assert set(got) == set(want)
    for k in want:
        assert abs(got[k] - want[k]) <= 1e-9, k


# ---------------------------------------------------------------------------
# hand cases

def test_hand_curve_ap():
    assert ap_interpolated([(0.5, 1.0), (1.0, 0.5)]) == 0.75
    assert ap_interpolated([(0.5, 1.0), (1.0, 1.0)]) == 1.0
    assert ap_interpolated([]) == 0.0


def test_pr_curve_example():
    assert pr_curve([True, False, True], [0.9, 0.8, 0.7], 2) == [(0.5, 1.0), (0.5, 0.5), (1.0, 2 / 3)]


def test_101_point_interpolation():
    assert ap_interpolated([(0.5, 1.0), (1.0, 0.5)], "101_point") == pytest.approx((51 * 1.0 + 50 * 0.5) / 101)


def test_map_is_mean_of_class_aps():
    box = (10.0, 10.0, 50.0, 50.0)
    gts = [GtBox(0, 0, box), GtBox(0, 1, box), GtBox(0, 1, (60.0, 60.0, 100.0, 100.0))]
    dets = [Detection(0, 0, box, 0.9), Detection(0, 1, (70.0, 0.0, 90.0, 20.0), 0.95), Detection(0, 1, box, 0.8)]
    rep = report(dets, gts)
    # class 0: AP 1; class 1: FP then TP at recall 1/2 -> 0.5 * 0.5
    assert rep.class_ap[(0, 0.5)] == 1.0
    assert rep.class_ap[(1, 0.5)] == 0.25
    assert math.isnan(rep.class_ap[(2, 0.5)])
    assert rep["mAP50"] == (1.0 + 0.25) / 2


def test_perfect_and_empty_detections():
    dets, gts = random_scenario(3)
    echoed = [Detection(g.image_id, g.class_id, g.box, 1.0) for g in gts]
    rep = report(echoed, gts)
    assert rep.metrics and all(v == 1.0 for v in rep.metrics.values())
    empty = report([], gts)
    assert all(v == 0.0 for v in empty.metrics.values())


def test_greedy_match_prefers_highest_iou():
    gts = [GtBox(0, 0, (0.0, 0.0, 10.0, 10.0)), GtBox(0, 0, (1.0, 0.0, 11.0, 10.0))]
    d = Detection(0, 0, (1.0, 0.0, 11.0, 10.0), 0.5)
    flags, _ = greedy_match([d, Detection(0, 0, (1.0, 0.0, 11.0, 10.0), 0.4)], gts, 0.5)
    assert flags == [True, True]


def test_ar_example():
    gts = [GtBox(0, 0, (0.0, 0.0, 10.0, 10.0)), GtBox(0, 0, (20.0, 20.0, 30.0, 30.0))]
    dets = [Detection(0, 0, (0.0, 0.0, 10.0, 10.0), 0.9)]
    assert ar_at(dets, gts, (0.5, 0.75)) == 0.5


def test_detection_cap():
    gts = [GtBox(0, 0, (0.0, 0.0, 10.0, 10.0))]
    junk = [Detection(0, 0, (50.0, 50.0, 60.0, 60.0), 0.9) for _ in range(3)]
    hit = Detection(0, 0, (0.0, 0.0, 10.0, 10.0), 0.1)
    assert report(junk + [hit], gts, EvalConfig(max_detections=3))["mAR100"] == 0.0
    assert report(junk + [hit], gts, EvalConfig(max_detections=4))["mAR100"] == 1.0


def test_input_validation():
    with pytest.raises(EvalInputError):
        Detection(0, 0, (5.0, 0.0, 1.0, 1.0), 0.5)
    with pytest.raises(EvalInputError):
        Detection(0, 0, (0.0, 0.0, 1.0, 1.0), math.nan)
    with pytest.raises(EvalInputError):
        report([Detection(0, 7, (0.0, 0.0, 1.0, 1.0), 0.5)], [])
    with pytest.raises(ValueError):
        EvalConfig(iou_thresholds=(0.7, 0.5))


def test_report_files_round_trip(tmp_path):
    dets, gts = random_scenario(5)
    rep = report(dets, gts)
    write_report(rep, tmp_path / "r.txt")
    back = read_report(tmp_path / "r.txt")
    for k, v in rep.metrics.items():
        assert abs(back[k] - v) < 1e-11
    write_pr_csv(rep, tmp_path / "pr.csv")
    assert (tmp_path / "pr.csv").read_text().startswith("class,threshold,rank,recall,precision\n")


# ---------------------------------------------------------------------------
# properties

@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32))
def test_metrics_bounded_and_order_free(seed):
    dets, gts = random_scenario(seed)
    rep = report(dets, gts).metrics
    assert all(0.0 <= v <= 1.0 for v in rep.values())
    shuffled = [dets[i] for i in SeededRng(seed).permutation(len(dets))]
    assert report(shuffled, gts).metrics == pytest.approx(rep, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32))
def test_adding_a_true_positive_never_lowers_recall(seed):
    dets, gts = random_scenario(seed)
    if not gts:
        return
    g = gts[0]
    more = dets + [Detection(g.image_id, g.class_id, g.box, 2.0)]
    assert report(more, gts)["mAR100"] >= report(dets, gts)["mAR100"] - 1e-12

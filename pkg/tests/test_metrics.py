import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcap.errors import FormatError, ReportUndefinedError
from dcap.metrics import (BoxXYXY, EvalReport, PredictionRecord, aggregate_runs, average_precision,
                          evaluate, iou, iou_matrix, match_detections, read_predictions,
                          write_predictions)

from oracles import all_points_ap, ap101, brute_evaluate, raster_iou_fraction


def det(cls, score, *box):
    return PredictionRecord(BoxXYXY(*map(float, box)), score, cls)


int_box = st.tuples(st.integers(0, 20), st.integers(0, 20), st.integers(1, 12), st.integers(1, 12)).map(
    lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))


# -- iou ------------------------------------------------------------------------------

def test_iou_examples():
    assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-15)
    assert raster_iou_fraction((0, 0, 2, 2), (1, 1, 3, 3)) == (1, 7)
    assert iou((1, 1, 1, 1), (1, 1, 1, 1)) == 0.0


@settings(max_examples=200, deadline=None)
@given(a=int_box, b=int_box)
def test_iou_matches_raster_counting(a, b):
    inter, union = raster_iou_fraction(a, b)
    assert abs(iou(a, b) - inter / union) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(a=int_box, b=int_box, dx=st.integers(-50, 50), dy=st.integers(-50, 50), s=st.integers(1, 9))
def test_iou_symmetry_and_invariances(a, b, dx, dy, s):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == iou(b, a)
    assert iou(a, a) == 1.0
    shift = lambda box: (box[0] + dx, box[1] + dy, box[2] + dx, box[3] + dy)  # noqa: E731
    scale = lambda box: tuple(s * c for c in box)  # noqa: E731
    assert iou(shift(a), shift(b)) == pytest.approx(v, abs=1e-12)
    assert iou(scale(a), scale(b)) == pytest.approx(v, abs=1e-12)


def test_iou_matrix_agrees_with_scalar():
    rng = np.random.default_rng(0)
    a = rng.integers(0, 10, size=(5, 2))
    a = np.hstack([a, a + rng.integers(1, 6, size=(5, 2))]).astype(float)
    b = a[::-1] + 0.5
    m = iou_matrix(a, b)
    for i in range(5):
        for j in range(5):
            assert m[i, j] == pytest.approx(iou(a[i], b[j]), abs=1e-15)


def test_box_properties():
    b = BoxXYXY(1, 2, 4, 8)
    assert (b.width, b.height, b.area) == (3, 6, 18)
    assert b.is_valid() and not BoxXYXY(3, 0, 1, 1).is_valid()


# -- matching -------------------------------------------------------------------------

def test_match_single_hit():
    m = match_detections([det(0, 0.9, 0, 0, 4, 4)], [(0, (0, 0, 4, 4))])
    assert (m.tp, m.fp, m.fn) == (1, 0, 0)
    assert m.det_iou == [1.0]


def test_match_duplicate_loses_to_higher_score():
    dets = [det(0, 0.9, 0, 0, 4, 4), det(0, 0.8, 0, 0, 4, 4)]
    m = match_detections(dets, [(0, (0, 0, 4, 4))])
    assert m.det_tp == [True, False]
    assert (m.tp, m.fp, m.fn) == (1, 1, 0)


def test_match_wrong_class():
    m = match_detections([det(1, 0.9, 0, 0, 4, 4)], [(0, (0, 0, 4, 4))])
    assert (m.tp, m.fp, m.fn) == (0, 1, 1)


def test_match_prefers_highest_iou_gt():
    gts = [(0, (0, 0, 4, 4)), (0, (1, 0, 5, 4))]
    m = match_detections([det(0, 0.9, 1, 0, 5, 4)], gts)
    assert m.gt_matched == [False, True]


def test_match_threshold_is_inclusive():
    # iou exactly 0.5: (0,0,2,1) vs (0,0,1,1)
    m = match_detections([det(0, 0.9, 0, 0, 2, 1)], [(0, (0, 0, 1, 1))], 0.5)
    assert m.tp == 1


# -- average precision ----------------------------------------------------------------

def test_ap_examples():
    assert average_precision([True], 1) == 1.0
    assert average_precision([], 3) == 0.0
    assert math.isnan(average_precision([True], 0))


def test_ap_tp_fp_tp_against_all_points_oracle():
    flags = [True, False, True]
    exact = all_points_ap(flags, 2)
    assert exact == pytest.approx(0.5 * 1.0 + 0.5 * (2 / 3))
    assert abs(average_precision(flags, 2) - exact) <= 1 / 101
    assert average_precision(flags, 2) == pytest.approx(ap101(flags, 2), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(flags=st.lists(st.booleans(), min_size=0, max_size=30), extra=st.integers(0, 5))
def test_ap_within_discretization_of_all_points(flags, extra):
    n_gt = sum(flags) + extra
    if n_gt == 0:
        return
    ap = average_precision(flags, n_gt)
    assert ap == pytest.approx(ap101(flags, n_gt), abs=1e-12)
    assert abs(ap - all_points_ap(flags, n_gt)) <= 1 / 101 + 1e-12
    assert 0.0 <= ap <= 1.0


# -- evaluate -------------------------------------------------------------------------

def random_scene(rng: random.Random, n_images, max_boxes=10, classes=2, ties=False):
    dets, gts = [], []
    for _ in range(n_images):
        g = []
        for _ in range(rng.randint(0, max_boxes)):
            x, y = rng.randint(0, 50), rng.randint(0, 50)
            g.append((rng.randrange(classes), (x, y, x + rng.randint(2, 14), y + rng.randint(2, 14))))
        d = []
        for c, b in g:
            if rng.random() < 0.8:
                j = [v + rng.randint(-3, 3) for v in b]
                j[2], j[3] = max(j[2], j[0] + 1), max(j[3], j[1] + 1)
                d.append(det(c if rng.random() < 0.9 else 1 - c, rng.choice([0.5, 0.7]) if ties else rng.random(), *j))
        for _ in range(rng.randint(0, 3)):
            x, y = rng.randint(0, 50), rng.randint(0, 50)
            d.append(det(rng.randrange(classes), rng.random(), x, y, x + rng.randint(2, 10), y + rng.randint(2, 10)))
        rng.shuffle(d)
        dets.append(d)
        gts.append(g)
    if not any(gts):
        gts[0].append((0, (0, 0, 5, 5)))
    return dets, gts


@pytest.mark.parametrize("seed", range(20))
def test_evaluate_matches_brute_force(seed):
    rng = random.Random(seed)
    dets, gts = random_scene(rng, rng.randint(1, 20), ties=seed % 4 == 0)
    got = evaluate(dets, gts)
    ref = brute_evaluate(dets, gts)
    for k, v in ref.items():
        assert getattr(got, k) == pytest.approx(v, abs=1e-6), k
    assert got.map50_95 <= got.map50 + 1e-12
    for k in ("precision", "recall", "map50", "map50_95", "mean_iou"):
        assert 0.0 <= getattr(got, k) <= 1.0


def test_evaluate_perfect_and_empty():
    gts = [[(0, (0, 0, 4, 4)), (1, (5, 5, 9, 9))], [(0, (1, 1, 6, 6))]]
    dets = [[det(c, 0.9, *b) for c, b in g] for g in gts]
    r = evaluate(dets, gts)
    assert (r.precision, r.recall, r.map50, r.map50_95, r.mean_iou) == (1.0, 1.0, 1.0, 1.0, 1.0)
    r = evaluate([[], []], gts)
    assert (r.precision, r.recall, r.map50, r.map50_95, r.mean_iou) == (0.0, 0.0, 0.0, 0.0, 0.0)


def test_evaluate_without_ground_truth_is_undefined():
    with pytest.raises(ReportUndefinedError):
        evaluate([[det(0, 0.5, 0, 0, 1, 1)]], [[]])


def test_evaluate_ignores_absent_classes_in_mean():
    gts = [[(0, (0, 0, 4, 4))]]
    r = evaluate([[det(0, 0.9, 0, 0, 4, 4), det(1, 0.95, 10, 10, 12, 12)]], gts)
    assert r.map50 == 1.0
    assert set(r.per_class) == {0}


@pytest.mark.parametrize("seed", range(5))
def test_evaluate_invariant_to_image_order(seed):
    rng = random.Random(100 + seed)
    dets, gts = random_scene(rng, 8)
    order = list(range(8))
    rng.shuffle(order)
    a = evaluate(dets, gts)
    b = evaluate([dets[i] for i in order], [gts[i] for i in order])
    assert a.as_row() == pytest.approx(b.as_row(), abs=1e-12)


def test_equal_scores_break_ties_by_input_order():
    gts = [[(0, (0, 0, 4, 4))]]
    good, bad = det(0, 0.5, 0, 0, 4, 4), det(0, 0.5, 20, 20, 24, 24)
    assert evaluate([[good, bad]], gts).map50 == 1.0
    assert evaluate([[bad, good]], gts).map50 == pytest.approx(ap101([False, True], 1))


def test_report_csv_and_table():
    r = EvalReport(0.5, 0.25, 0.75, 0.5, 0.625)
    assert r.to_csv() == "precision,recall,map50,map50_95,mean_iou\n0.500000,0.250000,0.750000,0.500000,0.625000\n"
    assert "75.00" in r.to_table()


# -- aggregation ----------------------------------------------------------------------

def test_aggregate_two_runs():
    agg = aggregate_runs([EvalReport(0.6, 0.6, 0.60, 0.3, 0.5), EvalReport(0.64, 0.6, 0.64, 0.3, 0.5)])
    mean, std = agg["map50"]
    assert mean == pytest.approx(0.62)
    assert std == pytest.approx(0.02828427, abs=1e-8)
    assert agg["recall"] == (0.6, 0.0)


def test_aggregate_five_runs_against_summation():
    vals = [0.61, 0.58, 0.66, 0.7, 0.55]
    agg = aggregate_runs([EvalReport(v, v, v, v, v) for v in vals])
    m = sum(vals) / 5
    s = math.sqrt(sum((v - m) ** 2 for v in vals) / 4)
    assert agg["precision"] == pytest.approx((m, s), abs=1e-12)


def test_aggregate_needs_two():
    with pytest.raises(ValueError):
        aggregate_runs([EvalReport(1, 1, 1, 1, 1)])


# -- prediction files -----------------------------------------------------------------

def test_prediction_file_round_trip(tmp_path):
    dets = [det(1, 0.123456, 1.5, 2.25, 10.0, 12.125), det(0, 1.0, 0, 0, 64, 64)]
    write_predictions(tmp_path / "p.txt", dets)
    assert read_predictions(tmp_path / "p.txt") == dets


def test_prediction_file_errors(tmp_path):
    p = tmp_path / "p.txt"
    p.write_text("0 0.5 1 1 2 2\n0 0.5 1 1 2\n")
    with pytest.raises(FormatError) as info:
        read_predictions(p)
    assert info.value.line == 2
    p.write_text("0 nan 1 1 2 2\n")
    with pytest.raises(FormatError):
        read_predictions(p)

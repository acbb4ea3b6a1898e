import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seaice.metrics import (
    ConfusionMatrix,
    confusion_matrix,
    f1_family,
    iou_family,
    mean_reports,
    merge,
    metrics_report,
    row_normalize,
)

from oracles import brute_scores

WORKED = ConfusionMatrix([[50, 10], [5, 35]])


def test_diagonal_confusion():
    labels = np.array([0] * 60 + [1] * 40).reshape(10, 10)
    cm = confusion_matrix(labels, labels, np.ones((10, 10), bool))
    assert cm.to_list() == [[60, 0], [0, 40]]


def test_all_invalid_gives_zero_matrix(rng):
    p = rng.integers(0, 2, (8, 8))
    assert confusion_matrix(p, p, np.zeros((8, 8), bool)).to_list() == [[0, 0], [0, 0]]


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError, match="shape"):
        confusion_matrix(np.zeros((3, 3)), np.zeros((3, 4)), np.ones((3, 3), bool))


def test_ignore_label_pixels_may_hold_255_when_invalid():
    labels = np.array([[0, 255], [1, 1]])
    valid = labels != 255
    pred = np.array([[0, 1], [1, 0]])
    assert confusion_matrix(pred, labels, valid).to_list() == [[1, 0], [1, 1]]


def test_worked_example_f1():
    f = f1_family(WORKED)
    assert f["f1"][0] == pytest.approx(0.8696, abs=1e-4)
    assert f["f1"][1] == pytest.approx(0.8235, abs=1e-4)
    assert f["weighted_f1"] == pytest.approx(0.8511, abs=1e-4)
    ref = brute_scores(WORKED.to_list())
    assert f["weighted_f1"] == pytest.approx(ref["weighted_f1"], abs=1e-12)


def test_worked_example_iou():
    i = iou_family(WORKED)
    assert i["iou"][0] == pytest.approx(0.7692, abs=1e-4)
    assert i["iou"][1] == pytest.approx(0.7000, abs=1e-4)
    assert i["micro_iou"] == pytest.approx(0.7391, abs=1e-4)
    assert i["macro_iou"] == pytest.approx(0.7346, abs=1e-4)
    assert i["weighted_iou"] == pytest.approx(0.7415, abs=1e-4)


def test_worked_example_rows():
    rates = row_normalize(WORKED).rates
    np.testing.assert_allclose(rates[1], [0.125, 0.875])
    np.testing.assert_allclose(row_normalize(ConfusionMatrix([[60, 0], [0, 40]])).rates, np.eye(2))


def test_perfect_matrix_scores_one():
    rep = metrics_report(ConfusionMatrix([[60, 0], [0, 40]]))
    assert rep.f1 == [1.0, 1.0] and rep.iou == [1.0, 1.0]
    assert rep.weighted_f1 == rep.micro_iou == rep.macro_iou == rep.weighted_iou == 1.0


def test_empty_matrix_rejected():
    with pytest.raises(ValueError):
        f1_family(ConfusionMatrix.zeros())
    with pytest.raises(ValueError):
        iou_family(ConfusionMatrix.zeros())


def test_absent_class_is_flagged_not_nan():
    # no ice anywhere, in labels or predictions
    rep = metrics_report(ConfusionMatrix([[10, 0], [0, 0]]))
    assert rep.f1[1] == 0.0 and rep.iou[1] == 0.0
    assert "f1[ice]" in rep.undefined and "iou[ice]" in rep.undefined
    rows = row_normalize(ConfusionMatrix([[10, 0], [0, 0]]))
    assert rows.defined.tolist() == [True, False]
    assert np.isnan(rows.rates[1]).all()


def test_merge_identity_and_commutativity(rng):
    a = ConfusionMatrix(rng.integers(0, 50, (2, 2)))
    b = ConfusionMatrix(rng.integers(0, 50, (2, 2)))
    c = ConfusionMatrix(rng.integers(0, 50, (2, 2)))
    assert merge(a, ConfusionMatrix.zeros()) == a
    assert merge(a, b) == merge(b, a)
    assert merge(merge(a, b), c) == merge(a, merge(b, c))


@pytest.mark.parametrize("seed", range(5))
def test_tiling_partition_invariance(seed):
    rng = np.random.default_rng(seed)
    h, w = 37, 53
    p, lab = rng.integers(0, 2, (2, h, w))
    v = rng.random((h, w)) < 0.8
    whole = confusion_matrix(p, lab, v)
    rows = np.sort(rng.choice(np.arange(1, h), 3, replace=False))
    cols = np.sort(rng.choice(np.arange(1, w), 2, replace=False))
    total = ConfusionMatrix.zeros()
    for rs in np.split(np.arange(h), rows):
        for cs in np.split(np.arange(w), cols):
            sl = np.ix_(rs, cs)
            total = total + confusion_matrix(p[sl], lab[sl], v[sl])
    assert total == whole


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 10_000), min_size=4, max_size=4).filter(lambda c: sum(c) > 0))
def test_scores_in_unit_interval_and_match_oracle(c):
    cm = ConfusionMatrix(np.array(c).reshape(2, 2))
    rep = metrics_report(cm)
    ref = brute_scores(cm.to_list())
    for key in ("weighted_f1", "macro_f1", "micro_iou", "macro_iou", "weighted_iou"):
        assert 0.0 <= getattr(rep, key) <= 1.0
        assert getattr(rep, key) == pytest.approx(ref[key], abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 500), st.integers(0, 500), st.integers(0, 500), st.integers(0, 500))
def test_equal_supports_weighted_equals_macro(n, a, b, c):
    # both rows sum to n
    a, c = min(a, n), min(c, n)
    cm = ConfusionMatrix([[n - a, a], [c, n - c]])
    rep = metrics_report(cm)
    assert rep.weighted_f1 == pytest.approx(rep.macro_f1, abs=1e-12)
    assert rep.weighted_iou == pytest.approx(rep.macro_iou, abs=1e-12)


def test_pixel_permutation_invariance(rng):
    p, lab = rng.integers(0, 2, (2, 40, 40))
    v = rng.random((40, 40)) < 0.7
    perm = rng.permutation(1600)
    shuffled = [x.ravel()[perm].reshape(40, 40) for x in (p, lab, v)]
    assert confusion_matrix(p, lab, v) == confusion_matrix(*shuffled)


def test_mean_reports_of_one_is_identity():
    rep = metrics_report(WORKED)
    avg = mean_reports([rep])
    assert avg["weighted_f1"] == rep.weighted_f1 and avg["iou"] == rep.iou


def test_mean_reports_arithmetic():
    r1 = metrics_report(WORKED)
    r2 = metrics_report(ConfusionMatrix([[60, 0], [0, 40]]))
    avg = mean_reports([r1, r2])
    assert avg["weighted_iou"] == pytest.approx((r1.weighted_iou + 1.0) / 2)
    assert avg["runs"] == 2


def test_error_count_equals_off_diagonal(rng):
    from seaice.scene_inference import error_map

    for _ in range(20):
        p, lab = rng.integers(0, 2, (2, 24, 24))
        v = rng.random((24, 24)) < 0.75
        cm = confusion_matrix(p, lab, v).counts
        err = error_map(p, lab, v).counts
        assert err["error"] == cm[0, 1] + cm[1, 0]
        assert err["correct"] == cm[0, 0] + cm[1, 1]
        assert sum(err.values()) == 24 * 24


def test_sklearn_agrees_on_random_fixtures(rng):
    sk = pytest.importorskip("sklearn.metrics")
    for _ in range(25):
        p, lab = rng.integers(0, 2, (2, 32, 32))
        v = rng.random((32, 32)) < 0.8
        rep = metrics_report(confusion_matrix(p, lab, v))
        y, yhat = lab[v], p[v]
        assert rep.weighted_f1 == pytest.approx(sk.f1_score(y, yhat, average="weighted", labels=[0, 1]), abs=1e-12)
        assert rep.micro_iou == pytest.approx(sk.jaccard_score(y, yhat, average="micro", labels=[0, 1]), abs=1e-12)
        assert rep.macro_iou == pytest.approx(sk.jaccard_score(y, yhat, average="macro", labels=[0, 1]), abs=1e-12)
        assert rep.weighted_iou == pytest.approx(
            sk.jaccard_score(y, yhat, average="weighted", labels=[0, 1]), abs=1e-12
        )


def test_brute_rows_match():
    ref = brute_scores([[3, 1], [0, 0]])["rows"]
    rows = row_normalize(ConfusionMatrix([[3, 1], [0, 0]]))
    assert rows.rates[0].tolist() == ref[0]
    assert all(math.isnan(x) for x in ref[1])

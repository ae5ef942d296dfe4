import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from coseg.metrics import (calinski_harabasz, cluster_indices, confusion_matrix, davies_bouldin,
                           miou_accuracy, psnr)


def test_perfect_prediction(rng):
    gt = rng.integers(0, 4, size=(6, 6))
    r = miou_accuracy(gt, gt)
    assert r["mIoU"] == 1.0 and r["Acc"] == 1.0


def test_hand_confusion_matrix():
    r = miou_accuracy(np.array([[0, 1], [1, 1]]), np.array([[0, 0], [1, 1]]), 2)
    assert r["Acc"] == 0.75
    assert r["per_class_IoU"] == [0.5, 2 / 3]
    assert r["mIoU"] == pytest.approx(7 / 12, abs=1e-15)
    assert r["confusion"].tolist() == [[1, 1], [0, 2]]


def test_ignore_index_excluded():
    pred = np.array([[0, 1], [1, 1]])
    gt = np.array([[0, -1], [1, 1]])
    r = miou_accuracy(pred, gt, 2)
    assert r["Acc"] == 1.0 and r["confusion"].sum() == 3


def test_absent_class_excluded():
    r = miou_accuracy(np.array([0, 0, 2]), np.array([0, 0, 2]), 3)
    assert np.isnan(r["per_class_IoU"][1]) and r["mIoU"] == 1.0


def test_void_prediction_is_a_miss():
    r = miou_accuracy(np.array([0, -1]), np.array([0, 0]), 1)
    assert r["Acc"] == 0.5 and r["mIoU"] == 0.5


def test_empty_input_errors():
    with pytest.raises(ValueError):
        miou_accuracy([], [])
    with pytest.raises(ValueError, match="no evaluated"):
        miou_accuracy(np.array([0]), np.array([-1]), 2)


@given(st.integers(0, 100_000))
def test_matches_brute_force_tally(seed):
    rng = np.random.default_rng(seed)
    C = int(rng.integers(2, 6))
    preds = [rng.integers(-1, C, size=(5, 7)) for _ in range(3)]
    gts = [rng.integers(-1, C, size=(5, 7)) for _ in range(3)]
    cm = np.zeros((C, C), dtype=int)
    missed = np.zeros(C, dtype=int)
    for p, g in zip(preds, gts):
        a, b = oracles.confusion_loop(p, g, C)
        cm += a
        missed += b
        c2, m2 = confusion_matrix(p, g, C)
        assert np.array_equal(c2, a) and np.array_equal(m2, b)
    r = miou_accuracy(preds, gts, C)
    assert np.array_equal(r["confusion"], cm)
    total = cm.sum() + missed.sum()
    assert r["Acc"] == np.trace(cm) / total
    ious = []
    for c in range(C):
        tp = cm[c, c]
        denom = cm[:, c].sum() + cm[c].sum() - tp + missed[c]
        if denom:
            ious.append(tp / denom)
    assert r["mIoU"] == pytest.approx(np.mean(ious), rel=1e-15)


def test_cluster_indices_well_separated():
    rng = np.random.default_rng(0)
    X = np.concatenate([rng.normal(0, 0.1, (10, 2)), rng.normal(0, 0.1, (10, 2)) + [50, 0]])
    y = np.repeat([0, 1], 10)
    r = cluster_indices(X, y)
    assert r["DB"] < 0.01 and r["CH"] > 1e4
    assert abs(r["CH"] - oracles.ch_loop(X, y)) <= 1e-10 * r["CH"]
    assert abs(r["DB"] - oracles.db_loop(X, y)) <= 1e-10 * r["DB"]


@given(st.integers(0, 100_000))
def test_cluster_indices_match_loops(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 5))
    y = np.concatenate([np.arange(k), rng.integers(0, k, size=30)])
    X = rng.normal(size=(len(y), 3)) + y[:, None]
    assert calinski_harabasz(X, y) == pytest.approx(oracles.ch_loop(X, y), rel=1e-10)
    assert davies_bouldin(X, y) == pytest.approx(oracles.db_loop(X, y), rel=1e-10)


def test_db_unchanged_by_duplication(rng):
    X = rng.normal(size=(20, 3))
    y = np.arange(20) % 3
    assert np.isclose(davies_bouldin(X, y), davies_bouldin(np.vstack([X, X]), np.tile(y, 2)))


def test_cluster_errors():
    X = np.array([[1.0, 0], [-1, 0], [0, 1], [0, -1]])
    with pytest.raises(ValueError, match="centroid"):
        davies_bouldin(X, np.array([0, 0, 1, 1]))
    with pytest.raises(ValueError, match="2 non-empty"):
        calinski_harabasz(X, np.zeros(4, dtype=int))


def test_image_shaped_features(rng):
    F = rng.normal(size=(4, 5, 6))
    lab = rng.integers(-1, 3, size=(4, 5))
    keep = lab.ravel() >= 0
    flat = cluster_indices(F.reshape(-1, 6)[keep], lab.ravel()[keep])
    assert cluster_indices(F, lab) == flat


def test_psnr(rng):
    a = rng.uniform(0.2, 0.8, size=(8, 8, 3))
    assert psnr(a, a) == float("inf")
    assert psnr(a, a + 0.1) == pytest.approx(20.0)
    assert psnr(a, a + 0.01) == pytest.approx(40.0)
    b = rng.uniform(size=a.shape)
    mse = sum((x - z) ** 2 for x, z in zip(a.ravel(), b.ravel())) / a.size
    assert psnr(a, b) == pytest.approx(10 * np.log10(1 / mse), rel=1e-12)

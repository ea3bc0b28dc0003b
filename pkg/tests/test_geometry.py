import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deformcaps.geometry import (Box, Heatmap, box_iou, decode_detections, encode_heatmap, encode_regression,
                                 find_peaks, gaussian_radius)
from deformcaps.numerics import make_rng
from oracles import brute_peaks, roundtrip_ok, separated_layout


def _rect_iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area = lambda r: (r[2] - r[0]) * (r[3] - r[1])
    return inter / (area(a) + area(b) - inter)


def brute_radius(w, h, m, step=1e-4):
    """Scan displacement magnitudes; largest r keeping IoU >= m in every corner mode."""
    box = (0.0, 0.0, w, h)
    modes = [
        lambda r: (r, r, w + r, h + r),  # both corners shifted together
        lambda r: (r, r, w - r, h - r),  # both pulled in
        lambda r: (-r, -r, w + r, h + r),  # both pushed out
    ]
    best = []
    for mode in modes:
        rs = np.arange(0.0, min(w, h) / 2, step)
        ok = [r for r in rs if _rect_iou(box, mode(r)) >= m]
        best.append(ok[-1])
    return min(best)


def test_radius_matches_brute_force():
    assert gaussian_radius(10, 10, 0.7) == pytest.approx(brute_radius(10, 10, 0.7), abs=2e-4)


@pytest.mark.parametrize("w,h", [(6, 14), (20, 9), (3, 3)])
def test_radius_brute_force_rectangles(w, h):
    assert gaussian_radius(w, h, 0.7) == pytest.approx(brute_radius(w, h, 0.7), abs=2e-4)


def test_radius_doubles_with_size():
    r1, r2 = brute_radius(10, 10, 0.7), brute_radius(20, 20, 0.7)
    assert r2 / r1 == pytest.approx(2.0, rel=0.1)
    assert gaussian_radius(20, 20) / gaussian_radius(10, 10) == pytest.approx(2.0, rel=0.1)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.5, 100), st.floats(1.01, 3))
def test_radius_positive_and_monotone(side, factor):
    r = gaussian_radius(side, side)
    assert r > 0
    assert gaussian_radius(side * factor, side * factor) > r


def test_heatmap_peak_is_one_and_empty_is_zero():
    hm = encode_heatmap([Box(10, 10, 30, 26, 1)], K=3, H=64, W=64, d=4)
    assert hm.values[1, 4, 5] == 1.0
    assert hm.values[0].max() == 0.0
    assert not encode_heatmap([], 3, 64, 64, 4).values.any()


def test_heatmap_overlap_is_pixelwise_max():
    a, b = Box(8, 8, 30, 30, 0), Box(18, 12, 40, 34, 0)
    got = encode_heatmap([a, b], 1, 64, 64, 4).values[0]
    for r in range(16):
        for c in range(16):
            terms = []
            for box in (a, b):
                cx, cy = box.center
                col, row = int(cx // 4), int(cy // 4)
                sigma = gaussian_radius(box.width / 4, box.height / 4) / 3
                terms.append(np.exp(-((c - col) ** 2 + (r - row) ** 2) / (2 * sigma ** 2)))
            assert got[r, c] == pytest.approx(max(terms), abs=1e-15)


def test_heatmap_rejects_outside_center():
    with pytest.raises(ValueError, match="box 1"):
        encode_heatmap([Box(1, 1, 5, 5), Box(60, 60, 70, 70)], 1, 64, 64, 4)


def test_regression_hand_values():
    # center (6, 6), d=4 -> cell (1, 1), offset (0.5, 0.5)
    t = encode_regression([Box(2, 3, 10, 9, 0)], 64, 64, 4)
    assert t.P == 1 and t.mask[1, 1] == 1
    np.testing.assert_allclose(t.offsets[:, 1, 1], [0.5, 0.5])
    np.testing.assert_allclose(t.sizes[:, 1, 1], [8, 6])
    corner = encode_regression([Box(4, 4, 12, 12, 0)], 64, 64, 4)
    np.testing.assert_allclose(corner.offsets[:, 2, 2], [0, 0])
    empty = encode_regression([], 64, 64, 4)
    assert empty.P == 0 and not empty.offsets.any() and not empty.sizes.any()


def test_regression_collision_last_writer(caplog):
    with caplog.at_level(logging.WARNING):
        t = encode_regression([Box(0, 0, 10, 10, 0), Box(1, 1, 9, 9, 1)], 32, 32, 4)
    assert "share center cell" in caplog.text
    assert t.P == 1
    np.testing.assert_allclose(t.sizes[:, 1, 1], [8, 8])


@pytest.mark.parametrize("seed", range(5))
def test_peaks_match_brute_force(seed):
    scores = make_rng(seed).uniform(size=(3, 16, 16))
    # plateaus exercise the tie rule
    scores[0, 3:5, 3:5] = 0.999
    got = [tuple(p) for p in find_peaks(scores, 0.3)]
    assert got == brute_peaks(scores, 0.3)


def test_decode_single_peak_and_threshold():
    scores = np.zeros((2, 8, 8))
    scores[1, 3, 5] = 1.0
    offs, sizes = np.zeros((2, 8, 8)), np.full((2, 8, 8), 6.0)
    dets = decode_detections(Heatmap(scores, 4), offs, sizes, threshold=0.3)
    assert len(dets) == 1 and dets[0].class_id == 1 and dets[0].cell == (3, 5)
    assert dets[0].center == (20.0, 12.0)
    assert decode_detections(Heatmap(scores * 0.2, 4), offs, sizes, threshold=0.3) == []


def test_decode_sorted_with_tie_break():
    scores = np.zeros((2, 8, 8))
    scores[1, 1, 1] = scores[0, 1, 5] = scores[0, 5, 1] = 0.8
    scores[1, 6, 6] = 0.9
    dets = decode_detections(scores, np.zeros((2, 8, 8)), np.ones((2, 8, 8)), 0.3, d=4)
    assert [(d.class_id, d.cell) for d in dets] == [(1, (6, 6)), (1, (1, 1)), (0, (1, 5)), (0, (5, 1))]
    assert len(decode_detections(scores, np.zeros((2, 8, 8)), np.ones((2, 8, 8)), 0.3, top_n=2, d=4)) == 2


@pytest.mark.parametrize("seed", range(10))
def test_encode_decode_roundtrip(seed):
    rng = make_rng(seed)
    assert roundtrip_ok(separated_layout(rng, int(rng.integers(1, 5))))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_heatmap_never_exceeds_one(seed):
    rng = make_rng(seed)
    boxes = []
    for _ in range(int(rng.integers(1, 8))):
        x1, y1 = rng.uniform(0, 40, size=2)
        w, h = rng.uniform(2, 20, size=2)
        boxes.append(Box(x1, y1, x1 + w, y1 + h, int(rng.integers(2))))
    v = encode_heatmap(boxes, 2, 64, 64, 4).values
    assert v.max() <= 1.0 and v.min() >= 0.0


def test_box_validation_and_iou():
    with pytest.raises(ValueError):
        Box(5, 0, 5, 4)
    assert box_iou([[0, 0, 2, 2]], [[1, 1, 3, 3]])[0, 0] == pytest.approx(1 / 7)

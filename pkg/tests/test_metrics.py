import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geopose.flow import FlowField
from geopose.metrics import (
    EmptyMaskError,
    angle_error,
    endpoint_errors,
    epe,
    height_metrics,
    iou,
    magnitude_error,
    per_category_epe,
)
from geopose.scene import Category

masks = st.integers(0, 2**16 - 1).map(lambda v: np.array([(v >> i) & 1 for i in range(16)], dtype=bool).reshape(4, 4))


def test_epe_examples():
    gt = FlowField((0.0, 1.0), np.full((2, 2), 3.0))
    assert epe(gt, gt) == 0.0
    # opposite directions, equal magnitude: endpoints 2 * 3 apart
    assert epe(FlowField((0.0, -1.0), np.full((2, 2), 3.0)), gt) == pytest.approx(6.0)
    # perpendicular 3 and 4: a 3-4-5 triangle
    assert epe(FlowField((1.0, 0.0), np.full((2, 2), 4.0)), gt) == pytest.approx(5.0)


def test_epe_respects_mask_and_rejects_empty():
    gt = FlowField((1.0, 0.0), np.array([[0.0, 10.0]]))
    pred = FlowField((1.0, 0.0), np.zeros((1, 2)))
    assert epe(pred, gt, np.array([[True, False]])) == 0.0
    assert epe(pred, gt) == 5.0
    with pytest.raises(EmptyMaskError):
        epe(pred, gt, np.zeros((1, 2), bool))
    with pytest.raises(ValueError):
        epe(pred, gt, np.ones((2, 2), bool))


@settings(max_examples=100, deadline=None)
@given(t=st.floats(0.0, 2 * math.pi), seed=st.integers(0, 10_000))
def test_epe_equals_magnitude_error_for_equal_orientation(t, seed):
    rng = np.random.default_rng(seed)
    o = (math.sin(t), math.cos(t))
    pred = FlowField(o, rng.uniform(0, 20, (5, 6)))
    gt = FlowField(o, rng.uniform(0, 20, (5, 6)))
    assert epe(pred, gt) == pytest.approx(magnitude_error(pred, gt), abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_endpoint_triangle_inequality(seed):
    rng = np.random.default_rng(seed)

    def field():
        t = rng.uniform(0, 2 * math.pi)
        return FlowField((math.sin(t), math.cos(t)), rng.uniform(0, 10, (3, 3)))

    a, b, c = field(), field(), field()
    assert np.all(endpoint_errors(a, c) <= endpoint_errors(a, b) + endpoint_errors(b, c) + 1e-9)


def test_angle_examples():
    assert angle_error((0.0, 1.0), (0.0, 1.0)) == 0.0
    assert angle_error((1.0, 0.0), (0.0, 1.0)) == pytest.approx(90.0)
    assert angle_error((0.0, -1.0), (0.0, 1.0)) == 180.0
    r = math.sqrt(0.5)
    assert angle_error((r, r), (0.0, 1.0)) == pytest.approx(45.0)


def test_angle_undefined_without_parallax():
    assert angle_error((0.0, 1.0), (1.0, 0.0), np.zeros((4, 4))) is None
    assert angle_error((0.0, 1.0), (1.0, 0.0), np.full((4, 4), 1e-7)) is None
    mag = np.zeros((4, 4))
    mag[1, 1] = 2.0
    assert angle_error((0.0, 1.0), (1.0, 0.0), mag) == pytest.approx(90.0)


@settings(max_examples=100, deadline=None)
@given(a=st.floats(0, 2 * math.pi), b=st.floats(0, 2 * math.pi))
def test_angle_symmetric_and_bounded(a, b):
    u, v = (math.sin(a), math.cos(a)), (math.sin(b), math.cos(b))
    e = angle_error(u, v)
    assert 0.0 <= e <= 180.0
    assert e == pytest.approx(angle_error(v, u), abs=1e-9)
    d = abs((a - b + math.pi) % (2 * math.pi) - math.pi)
    assert e == pytest.approx(math.degrees(d), abs=1e-6)


def test_magnitude_error_example():
    gt = FlowField((0.0, 1.0), np.array([[1.0, 2.0], [3.0, 4.0]]))
    pred = FlowField((1.0, 0.0), np.array([[2.0, 2.0], [1.0, 4.0]]))
    assert magnitude_error(pred, gt) == pytest.approx(0.75)


def test_per_category_table():
    gt = FlowField((0.0, 1.0), np.array([[0.0, 4.0, 2.0]]))
    pred = FlowField((0.0, 1.0), np.array([[1.0, 4.0, 0.0]]))
    sem = np.array([[Category.GROUND, Category.ROOF, Category.FACADE]])
    shadow = np.array([[True, False, False]])
    table = per_category_epe(pred, gt, sem, shadow)
    assert table["ground"] == 1.0 and table["roof"] == 0.0 and table["facade"] == 2.0
    assert table["shadow"] == 1.0
    assert table["water"] is None and table["vegetation"] is None


def test_height_metrics_examples():
    gt = np.array([[0.0, 10.0], [0.0, 10.0]])
    pred = np.array([[1.0, 8.0], [-1.0, 10.0]])
    bld = gt > 0
    m = height_metrics(pred, gt, bld)
    assert m["mean"] == pytest.approx(1.0)
    assert m["rms"] == pytest.approx(math.sqrt(6.0 / 4))
    assert m["mean_bldgs"] == pytest.approx(1.0)
    assert m["rms_bldgs"] == pytest.approx(math.sqrt(2.0))
    s = height_metrics(pred, gt, bld, signed=True)
    assert s["mean"] == pytest.approx(-0.5) and s["mean_bldgs"] == pytest.approx(-1.0)
    with pytest.raises(EmptyMaskError):
        height_metrics(pred, gt, np.zeros((2, 2), bool))


def test_height_rms_matches_gaussian_sigma():
    rng = np.random.default_rng(7)
    sigma = 2.5
    gt = rng.uniform(0, 30, (200, 200))
    pred = gt + rng.normal(0, sigma, gt.shape)
    m = height_metrics(pred, gt, gt > 15)
    assert abs(m["rms"] - sigma) <= 0.05 * sigma
    assert abs(m["rms_bldgs"] - sigma) <= 0.05 * sigma
    assert abs(height_metrics(pred, gt, gt > 15, signed=True)["mean"]) < 0.05


def test_iou_fixtures():
    a = np.zeros((10, 10), bool)
    a[2:6, 2:6] = True
    assert iou(a, a) == 1.0
    b = np.zeros_like(a)
    b[7:9, 7:9] = True
    assert iou(a, b) == 0.0
    half = np.zeros_like(a)
    half[2:6, 4:8] = True
    assert iou(a, half) == pytest.approx(1.0 / 3.0)
    assert math.isnan(iou(np.zeros((3, 3), bool), np.zeros((3, 3), bool)))
    with pytest.raises(ValueError):
        iou(a, a[:5])


@settings(max_examples=200, deadline=None)
@given(a=masks, b=masks)
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    if not (a | b).any():
        assert math.isnan(v)
        return
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0
    assert (v == 1.0) == np.array_equal(a, b)


@settings(max_examples=200, deadline=None)
@given(a=masks, b=masks, c=masks)
def test_jaccard_distance_triangle_inequality(a, b, c):
    if not (a.any() and b.any() and c.any()):
        return
    ac, ab, bc = (1.0 - iou(x, y) for x, y in ((a, c), (a, b), (b, c)))
    assert ac <= ab + bc + 1e-12

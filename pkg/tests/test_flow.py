import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geopose.flow import (
    DegenerateFlowError,
    FlowField,
    compose_flow,
    decompose_flow,
    flip_sample,
    rotate_orientation,
    rotate_sample,
    rotate_vectors,
)
from geopose.metrics import endpoint_errors
from geopose.scene import INVALID_LABEL

angles = st.floats(-720.0, 720.0, allow_nan=False)
units = st.floats(0.0, 2 * math.pi, allow_nan=False).map(lambda t: (math.sin(t), math.cos(t)))


def test_compose_examples():
    v = compose_flow(FlowField((0.0, 1.0), np.full((2, 3), 5.0)))
    assert np.array_equal(v[..., 0], np.zeros((2, 3))) and np.array_equal(v[..., 1], np.full((2, 3), 5.0))
    assert not compose_flow(FlowField((0.6, 0.8), np.zeros((2, 2)))).any()
    v = compose_flow(FlowField((0.6, 0.8), np.full((1, 1), 10.0)))
    assert v[0, 0].tolist() == pytest.approx([6.0, 8.0], abs=1e-12)


def test_flowfield_invariants():
    with pytest.raises(ValueError):
        FlowField((1.0, 1.0), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        FlowField((0.0, 1.0), -np.ones((2, 2)))
    with pytest.raises(ValueError):
        FlowField((0.0, 1.0), np.full((2, 2), np.inf))


def test_decompose_examples():
    f = decompose_flow(np.tile([3.0, 4.0], (2, 2, 1)))
    assert f.orientation == pytest.approx((0.6, 0.8)) and np.allclose(f.magnitude, 5.0)
    with pytest.raises(DegenerateFlowError):
        decompose_flow(np.zeros((3, 3, 2)))
    h = np.arange(12.0).reshape(3, 4)
    f = decompose_flow(np.stack([np.zeros_like(h), h], axis=-1))
    assert f.orientation == (0.0, 1.0) and np.array_equal(f.magnitude, h)


@settings(max_examples=100, deadline=None)
@given(o=units, mags=st.lists(st.floats(0.0, 50.0, allow_nan=False), min_size=4, max_size=4))
def test_compose_decompose_identity(o, mags):
    mag = np.array(mags).reshape(2, 2)
    if mag.max() < 1e-6:
        return
    field = FlowField(o, mag)
    back = decompose_flow(compose_flow(field))
    assert np.max(np.abs(compose_flow(back) - compose_flow(field))) <= 1e-6
    assert np.max(np.abs(back.magnitude - mag)) <= 1e-6


@settings(max_examples=100, deadline=None)
@given(o=units, a=angles)
def test_rotation_equivariance(o, a):
    field = FlowField(o, np.linspace(0.5, 9.0, 12).reshape(3, 4))
    turned = decompose_flow(rotate_vectors(compose_flow(field), a))
    assert np.allclose(turned.orientation, rotate_orientation(o, a), atol=1e-6)


@settings(max_examples=100, deadline=None)
@given(o=units, a=angles, b=angles)
def test_orientation_rotation_composes(o, a, b):
    assert np.allclose(rotate_orientation(rotate_orientation(o, a), b), rotate_orientation(o, a + b), atol=1e-9)


def test_rotate_orientation_quarter_turn_exact():
    assert rotate_orientation((0.0, 1.0), 90.0) == (1.0, 0.0)
    assert rotate_orientation((1.0, 0.0), -90.0) == (0.0, 1.0)


def test_rotate_zero_is_identity(oblique_sample):
    assert rotate_sample(oblique_sample, 0.0) is oblique_sample
    assert rotate_sample(oblique_sample, 360.0) is oblique_sample


def test_rotate_ninety_preserves_magnitudes(oblique_sample):
    s = replace(oblique_sample, flow=FlowField((0.0, 1.0), oblique_sample.flow.magnitude))
    r = rotate_sample(s, 90.0)
    assert r.flow.orientation == pytest.approx((1.0, 0.0), abs=1e-6)
    # the frame is square with an exact quarter turn: no pixel is lost and values match
    assert r.valid.all()
    assert np.array_equal(np.sort(r.flow.magnitude.ravel()), np.sort(s.flow.magnitude.ravel()))
    assert np.array_equal(np.sort(r.semantics.ravel()), np.sort(s.semantics.ravel()))


def test_rotation_round_trip_interior_epe(oblique_sample):
    s = oblique_sample
    back = rotate_sample(rotate_sample(s, 36.0), -36.0)
    rows, cols = s.shape
    y, x = np.mgrid[0:rows, 0:cols]
    r = math.hypot(rows, cols) / 2.0
    interior = back.valid & (np.hypot(x - (cols - 1) / 2, y - (rows - 1) / 2) < 0.45 * r)
    err = endpoint_errors(back.flow, s.flow)[interior]
    assert interior.sum() > 0.25 * s.intensity.size
    assert err.mean() < 0.5


def test_rotation_marks_out_of_frame_invalid(oblique_sample):
    r = rotate_sample(oblique_sample, 45.0)
    assert not r.valid[0, 0] and not r.valid[-1, -1]
    assert r.semantics[0, 0] == INVALID_LABEL
    assert r.flow.magnitude[0, 0] == 0.0
    assert r.valid[r.shape[0] // 2, r.shape[1] // 2]


def test_flip_orientation_rules(oblique_sample):
    s = oblique_sample
    sn, cs = s.flow.orientation
    assert flip_sample(s, "horizontal").flow.orientation == (-sn, cs)
    assert flip_sample(s, "vertical").flow.orientation == (sn, -cs)
    with pytest.raises(ValueError):
        flip_sample(s, "diagonal")


@pytest.mark.parametrize("axis", ["horizontal", "vertical"])
def test_flip_involution_exact(oblique_sample, axis):
    s = oblique_sample
    back = flip_sample(flip_sample(s, axis), axis)
    for name in ("intensity", "dsm", "dtm", "agl", "semantics", "shadow", "occlusion", "footprint", "facade", "valid"):
        assert np.array_equal(getattr(back, name), getattr(s, name)), name
    assert back.flow.orientation == s.flow.orientation
    assert np.array_equal(back.flow.magnitude, s.flow.magnitude)
    assert back.geometry == s.geometry


def test_flip_then_half_turn_is_the_other_flip(oblique_sample):
    s = oblique_sample
    a = rotate_sample(flip_sample(s, "horizontal"), 180.0)
    b = flip_sample(s, "vertical")
    assert np.allclose(a.flow.orientation, b.flow.orientation, atol=1e-12)
    for name in ("intensity", "agl", "semantics", "facade", "valid"):
        assert np.array_equal(getattr(a, name), getattr(b, name)), name


@settings(max_examples=50, deadline=None)
@given(o=units)
def test_flip_then_half_turn_orientations(o):
    h = (-o[0], o[1])
    v = (o[0], -o[1])
    assert np.allclose(rotate_orientation(h, 180.0), v, atol=1e-12)


def test_geometry_tracks_transforms(oblique_sample):
    for a in (36.0, 90.0, -72.0):
        r = rotate_sample(oblique_sample, a)
        assert np.allclose(r.geometry.flow_orientation, r.flow.orientation, atol=1e-9)
    for axis in ("horizontal", "vertical"):
        f = flip_sample(oblique_sample, axis)
        assert np.allclose(f.geometry.flow_orientation, f.flow.orientation, atol=1e-9)

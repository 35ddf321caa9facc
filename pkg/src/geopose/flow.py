"""Flow-field encoding of geocentric pose and its transformation algebra.

Image axes: ``x`` is the column index (left to right), ``y`` the row index
(top to bottom). A flow vector ``(dx, dy)`` moves a surface pixel to the
image location of the ground point vertically beneath it. Under affine
projection every vector in an image is parallel, so a field is stored as one
unit orientation ``(sin t, cos t) = (dx, dy) / |(dx, dy)|`` plus a per-pixel
magnitude in pixels.

Angles are only ever handled through their (sin, cos) pair. Rotating a
sample by ``a`` degrees maps the orientation ``(sin t, cos t)`` to
``(sin(t + a), cos(t + a))``; on screen (y down) that turns content
counter-clockwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, Literal

import numpy as np

from .scene import INVALID_LABEL

if TYPE_CHECKING:
    from .projection import GeoPoseSample

UNIT_TOLERANCE = 1e-6


class DegenerateFlowError(ValueError):
    """Orientation is undefined because every vector is (near) zero."""


@dataclass(frozen=True)
class FlowField:
    orientation: tuple[float, float]
    magnitude: np.ndarray

    def __post_init__(self):
        s, c = (float(v) for v in self.orientation)
        if abs(s * s + c * c - 1.0) > UNIT_TOLERANCE:
            raise ValueError(f"orientation {self.orientation} is not a unit vector")
        mag = np.asarray(self.magnitude, dtype=np.float64)
        if mag.ndim != 2:
            raise ValueError(f"magnitude must be 2-D, got shape {mag.shape}")
        if not np.all(np.isfinite(mag)) or np.any(mag < 0):
            raise ValueError("magnitudes must be finite and non-negative")
        object.__setattr__(self, "orientation", (s, c))
        object.__setattr__(self, "magnitude", mag)

    @property
    def shape(self) -> tuple[int, int]:
        return self.magnitude.shape

    @classmethod
    def zeros(cls, shape: tuple[int, int], orientation=(0.0, 1.0)) -> "FlowField":
        return cls(orientation, np.zeros(shape))

    def with_orientation(self, orientation) -> "FlowField":
        return FlowField(orientation, self.magnitude)


def unit(v, eps: float = 1e-12) -> tuple[float, float]:
    s, c = float(v[0]), float(v[1])
    norm = math.hypot(s, c)
    if norm < eps:
        raise DegenerateFlowError(f"cannot normalize near-zero vector {v}")
    return s / norm, c / norm


def compose_flow(field: FlowField) -> np.ndarray:
    """Dense (H, W, 2) vectors ``magnitude * (sin t, cos t)``; [..., 0] is dx."""
    s, c = field.orientation
    return np.stack([field.magnitude * s, field.magnitude * c], axis=-1)


def decompose_flow(vectors: np.ndarray, eps: float = 1e-9) -> FlowField:
    """Inverse of :func:`compose_flow` for (approximately) parallel vectors.

    The orientation is the magnitude-weighted mean direction, which is simply
    the normalized vector sum.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    mag = np.hypot(vectors[..., 0], vectors[..., 1])
    if not np.any(mag >= eps):
        raise DegenerateFlowError("all flow magnitudes are below eps; orientation undefined")
    total = vectors[mag >= eps].sum(axis=0)
    return FlowField(unit(total), mag)


def _exact_sincos(angle_deg: float) -> tuple[float, float]:
    """sin/cos with exact values on multiples of 90 degrees."""
    q, r = divmod(float(angle_deg), 90.0)
    if r == 0.0:
        return [(0.0, 1.0), (1.0, 0.0), (0.0, -1.0), (-1.0, 0.0)][int(q) % 4]
    a = math.radians(angle_deg)
    return math.sin(a), math.cos(a)


def rotate_orientation(orientation, angle_deg: float) -> tuple[float, float]:
    s, c = orientation
    sa, ca = _exact_sincos(angle_deg)
    return s * ca + c * sa, c * ca - s * sa


def rotate_vectors(vectors: np.ndarray, angle_deg: float) -> np.ndarray:
    sa, ca = _exact_sincos(angle_deg)
    dx, dy = vectors[..., 0], vectors[..., 1]
    return np.stack([dx * ca + dy * sa, dy * ca - dx * sa], axis=-1)


# ----------------------------------------------------------------------------
# Resampling
# ----------------------------------------------------------------------------

def _rotation_sources(shape: tuple[int, int], angle_deg: float) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = shape
    sa, ca = _exact_sincos(angle_deg)
    cx, cy = (cols - 1) / 2.0, (rows - 1) / 2.0
    y, x = np.mgrid[0:rows, 0:cols].astype(np.float64)
    u, v = x - cx, y - cy
    # inverse of q = c + R (p - c) with R = [[cos, sin], [-sin, cos]]
    return cx + ca * u - sa * v, cy + sa * u + ca * v


def _bilinear(img: np.ndarray, sx: np.ndarray, sy: np.ndarray, valid: np.ndarray):
    rows, cols = img.shape
    tol = 1e-9
    inside = (sx >= -tol) & (sx <= cols - 1 + tol) & (sy >= -tol) & (sy <= rows - 1 + tol)
    sx = np.clip(sx, 0.0, cols - 1)
    sy = np.clip(sy, 0.0, rows - 1)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    fx = sx - x0
    fy = sy - y0
    x1 = np.minimum(x0 + 1, cols - 1)
    y1 = np.minimum(y0 + 1, rows - 1)
    w00 = (1 - fx) * (1 - fy)
    w01 = fx * (1 - fy)
    w10 = (1 - fx) * fy
    w11 = fx * fy
    out = img[y0, x0] * w00 + img[y0, x1] * w01 + img[y1, x0] * w10 + img[y1, x1] * w11
    ok = inside.copy()
    for yy, xx, ww in ((y0, x0, w00), (y0, x1, w01), (y1, x0, w10), (y1, x1, w11)):
        ok &= valid[yy, xx] | (ww == 0)
    return np.where(ok, out, 0.0), ok


def _nearest(img: np.ndarray, sx: np.ndarray, sy: np.ndarray, fill):
    rows, cols = img.shape
    xi = np.floor(sx + 0.5).astype(np.intp)
    yi = np.floor(sy + 0.5).astype(np.intp)
    inside = (xi >= 0) & (xi < cols) & (yi >= 0) & (yi < rows)
    out = img[np.clip(yi, 0, rows - 1), np.clip(xi, 0, cols - 1)]
    return np.where(inside, out, np.asarray(fill, dtype=img.dtype))


CONTINUOUS_LAYERS = ("intensity", "dsm", "dtm", "agl")
BOOLEAN_LAYERS = ("shadow", "occlusion", "footprint", "facade")


def rotate_sample(sample: "GeoPoseSample", angle: float) -> "GeoPoseSample":
    """Rotate every layer about the image centre.

    Continuous layers use bilinear interpolation, labels and masks use
    nearest neighbour. Pixels whose source falls outside the frame (or touches
    an invalid pixel) become invalid; invalid pixels hold 0 / False /
    ``INVALID_LABEL``. Magnitudes are resampled, never rescaled.
    """
    if float(angle) % 360.0 == 0.0:
        return sample
    sx, sy = _rotation_sources(sample.shape, angle)
    valid = sample.valid
    _, ok = _bilinear(np.zeros(sample.shape), sx, sy, valid)
    near_valid = _nearest(valid, sx, sy, False)
    ok &= near_valid

    def cont(arr):
        out, _ = _bilinear(arr, sx, sy, valid)
        return np.where(ok, out, 0.0)

    def near(arr, fill):
        out = _nearest(arr, sx, sy, fill)
        return np.where(ok, out, np.asarray(fill, dtype=arr.dtype))

    layers = {name: cont(getattr(sample, name)) for name in CONTINUOUS_LAYERS}
    layers.update({name: near(getattr(sample, name), False) for name in BOOLEAN_LAYERS})
    layers["semantics"] = near(sample.semantics, INVALID_LABEL)
    flow = FlowField(
        rotate_orientation(sample.flow.orientation, angle),
        np.maximum(cont(sample.flow.magnitude), 0.0),
    )
    geom = sample.geometry.rotated(angle)
    return replace(sample, flow=flow, valid=ok, geometry=geom, **layers)


def flip_sample(sample: "GeoPoseSample", axis: Literal["horizontal", "vertical"]) -> "GeoPoseSample":
    """Mirror every layer. Horizontal flips negate dx (sin), vertical flips dy (cos)."""
    s, c = sample.flow.orientation
    if axis == "horizontal":
        mirror = lambda a: a[:, ::-1].copy()  # noqa: E731
        orientation = (-s, c)
    elif axis == "vertical":
        mirror = lambda a: a[::-1, :].copy()  # noqa: E731
        orientation = (s, -c)
    else:
        raise ValueError(f"axis must be 'horizontal' or 'vertical', got {axis!r}")
    layers = {name: mirror(getattr(sample, name)) for name in CONTINUOUS_LAYERS + BOOLEAN_LAYERS}
    layers["semantics"] = mirror(sample.semantics)
    flow = FlowField(orientation, mirror(sample.flow.magnitude))
    return replace(
        sample,
        flow=flow,
        valid=mirror(sample.valid),
        geometry=sample.geometry.flipped(axis),
        **layers,
    )

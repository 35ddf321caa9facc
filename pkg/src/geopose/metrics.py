"""Evaluation quantities for flow, height and footprint experiments."""

from __future__ import annotations

import math

import numpy as np

from .flow import FlowField, compose_flow
from .scene import CATEGORY_NAMES, Category


class EmptyMaskError(ValueError):
    pass


def _valid(valid, shape) -> np.ndarray:
    if valid is None:
        return np.ones(shape, dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != tuple(shape):
        raise ValueError(f"mask shape {valid.shape} does not match {shape}")
    return valid


def endpoint_errors(pred: FlowField, gt: FlowField) -> np.ndarray:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    diff = compose_flow(pred) - compose_flow(gt)
    return np.hypot(diff[..., 0], diff[..., 1])


def epe(pred: FlowField, gt: FlowField, valid=None) -> float:
    """Mean Euclidean distance between predicted and reference flow endpoints."""
    m = _valid(valid, gt.shape)
    if not m.any():
        raise EmptyMaskError("epe over an empty valid mask")
    return float(endpoint_errors(pred, gt)[m].mean())


def angle_error(pred_orientation, gt_orientation, gt_magnitude=None, eps: float = 1e-6):
    """Angle in degrees between two unit orientations.

    Returns ``None`` (undefined) when ``gt_magnitude`` is given and every
    reference magnitude is below ``eps``: with no parallax there is no
    orientation to get right.
    """
    if gt_magnitude is not None and not np.any(np.asarray(gt_magnitude) >= eps):
        return None
    (ps, pc), (gs, gc) = pred_orientation, gt_orientation
    # atan2 of (|cross|, dot) stays accurate near 0 and 180 degrees, unlike acos
    return math.degrees(math.atan2(abs(ps * gc - pc * gs), ps * gs + pc * gc))


def magnitude_error(pred: FlowField, gt: FlowField, valid=None) -> float:
    m = _valid(valid, gt.shape)
    if not m.any():
        raise EmptyMaskError("magnitude error over an empty valid mask")
    return float(np.abs(pred.magnitude - gt.magnitude)[m].mean())


PER_CATEGORY = (
    Category.GROUND,
    Category.VEGETATION,
    Category.ROOF,
    Category.WATER,
    Category.ELEVATED_ROAD,
    Category.FACADE,
)


def per_category_epe(pred: FlowField, gt: FlowField, semantics, shadow, valid=None) -> dict:
    """EPE per reference category plus a separate shadow row.

    Categories (and shadow) with no valid pixels map to ``None``.
    """
    m = _valid(valid, gt.shape)
    err = endpoint_errors(pred, gt)
    semantics = np.asarray(semantics)
    table = {}
    for cat in PER_CATEGORY:
        sel = m & (semantics == cat)
        table[CATEGORY_NAMES[cat]] = float(err[sel].mean()) if sel.any() else None
    sel = m & np.asarray(shadow, dtype=bool)
    table["shadow"] = float(err[sel].mean()) if sel.any() else None
    return table


def height_metrics(pred, gt, building_mask, valid=None, signed: bool = False) -> dict:
    """Mean and RMS height error (meters), overall and over building pixels.

    ``mean`` is the mean absolute error unless ``signed`` is set.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    m = _valid(valid, gt.shape)
    b = m & np.asarray(building_mask, dtype=bool)
    if not m.any() or not b.any():
        raise EmptyMaskError("height metrics need non-empty valid and building masks")
    d = pred - gt
    mean = (lambda v: float(v.mean())) if signed else (lambda v: float(np.abs(v).mean()))
    return {
        "mean": mean(d[m]),
        "mean_bldgs": mean(d[b]),
        "rms": float(np.sqrt(np.mean(d[m] ** 2))),
        "rms_bldgs": float(np.sqrt(np.mean(d[b] ** 2))),
    }


def iou(a, b) -> float:
    """Intersection over union of two boolean masks; NaN when both are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return math.nan
    return np.count_nonzero(a & b) / union

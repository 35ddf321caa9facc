"""Registration of rectified height images.

A transform is a 2x3 affine matrix ``A`` mapping fixed-frame pixel
coordinates ``(x, y, 1)`` to moving-frame coordinates, so that
``moving(A p) ~ fixed(p)``. A pure shift ``(dx, dy)`` means
``moving[y, x] = fixed[y - dy, x - dx]`` and has ``A = [[1, 0, dx], [0, 1, dy]]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .metrics import iou


class InsufficientOverlapError(ValueError):
    pass


@dataclass(frozen=True)
class Transform:
    matrix: np.ndarray  # (2, 3)
    cost: float
    overlap: float

    @property
    def shift(self) -> tuple[float, float]:
        return float(self.matrix[0, 2]), float(self.matrix[1, 2])

    def to_dict(self) -> dict:
        return {
            "matrix": [[float(v) for v in row] for row in self.matrix],
            "cost": float(self.cost),
            "overlap": float(self.overlap),
        }

    @classmethod
    def identity(cls) -> "Transform":
        return cls(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), 0.0, 1.0)


def translation(dx: float, dy: float) -> np.ndarray:
    return np.array([[1.0, 0.0, float(dx)], [0.0, 1.0, float(dy)]])


def _masks(fixed, moving, fixed_valid, moving_valid):
    fixed = np.asarray(fixed, dtype=np.float64)
    moving = np.asarray(moving, dtype=np.float64)
    if fixed.shape != moving.shape:
        raise ValueError(f"shape mismatch: {fixed.shape} vs {moving.shape}")
    fv = np.isfinite(fixed) if fixed_valid is None else np.asarray(fixed_valid, dtype=bool) & np.isfinite(fixed)
    mv = np.isfinite(moving) if moving_valid is None else np.asarray(moving_valid, dtype=bool) & np.isfinite(moving)
    return np.where(fv, fixed, 0.0), np.where(mv, moving, 0.0), fv, mv


def _overlap_slices(n: int, d: int):
    """Index ranges with fixed[i] paired to moving[i + d]."""
    lo, hi = max(0, -d), min(n, n - d)
    return slice(lo, hi), slice(lo + d, hi + d)


def register(
    fixed: np.ndarray,
    moving: np.ndarray,
    fixed_valid: np.ndarray | None = None,
    moving_valid: np.ndarray | None = None,
    search: int = 8,
    min_overlap: float = 0.25,
    affine: bool = False,
    affine_iterations: int = 10,
) -> Transform:
    """Best integer shift within ``[-search, search]^2`` by mean squared difference.

    Candidates whose mutually valid area is below ``min_overlap`` of the fixed
    valid area are skipped. Ties go to the smallest shift, then lowest
    ``dx``, then lowest ``dy``. With ``affine`` the shift seeds a Gauss-Newton
    refinement that is kept only if it lowers the cost.
    """
    if search < 0:
        raise ValueError("search radius must be non-negative")
    f, m, fv, mv = _masks(fixed, moving, fixed_valid, moving_valid)
    rows, cols = f.shape
    n_fixed = int(fv.sum())
    if n_fixed == 0:
        raise InsufficientOverlapError("fixed raster has no valid pixels")
    best = None
    for dy in range(-search, search + 1):
        fy, my = _overlap_slices(rows, dy)
        for dx in range(-search, search + 1):
            fx, mx = _overlap_slices(cols, dx)
            both = fv[fy, fx] & mv[my, mx]
            count = int(both.sum())
            if count == 0 or count < min_overlap * n_fixed:
                continue
            diff = (f[fy, fx] - m[my, mx])[both]
            cost = float(np.dot(diff, diff) / count)
            key = (cost, dx * dx + dy * dy, dx, dy)
            if best is None or key < best[0]:
                best = (key, count)
    if best is None:
        raise InsufficientOverlapError(
            f"no shift within +/-{search} px reaches {min_overlap:.0%} overlap"
        )
    (cost, _, dx, dy), count = best
    result = Transform(translation(dx, dy), cost, count / n_fixed)
    if affine:
        result = _refine_affine(f, m, fv, mv, result, affine_iterations, min_overlap * n_fixed, n_fixed)
    return result


def _sample_bilinear(img, valid, x, y):
    rows, cols = img.shape
    inside = (x >= 0) & (x <= cols - 1) & (y >= 0) & (y <= rows - 1)
    xc = np.clip(x, 0, cols - 1)
    yc = np.clip(y, 0, rows - 1)
    x0 = np.minimum(np.floor(xc).astype(np.intp), max(cols - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(np.intp), max(rows - 2, 0))
    x1 = np.minimum(x0 + 1, cols - 1)
    y1 = np.minimum(y0 + 1, rows - 1)
    fx, fy = xc - x0, yc - y0
    v00, v01, v10, v11 = img[y0, x0], img[y0, x1], img[y1, x0], img[y1, x1]
    ok = inside & valid[y0, x0] & valid[y0, x1] & valid[y1, x0] & valid[y1, x1]
    val = v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy) + v10 * (1 - fx) * fy + v11 * fx * fy
    gx = (v01 - v00) * (1 - fy) + (v11 - v10) * fy
    gy = (v10 - v00) * (1 - fx) + (v11 - v01) * fx
    return val, gx, gy, ok


def _refine_affine(f, m, fv, mv, start: Transform, iterations, min_count, n_fixed) -> Transform:
    rows, cols = f.shape
    y, x = np.mgrid[0:rows, 0:cols].astype(np.float64)
    x, y, fval = x[fv], y[fv], f[fv]

    def evaluate(a):
        sx = a[0, 0] * x + a[0, 1] * y + a[0, 2]
        sy = a[1, 0] * x + a[1, 1] * y + a[1, 2]
        return _sample_bilinear(m, mv, sx, sy)

    best = start
    a = start.matrix.copy()
    for _ in range(iterations):
        val, gx, gy, ok = evaluate(a)
        if ok.sum() < max(min_count, 6):
            break
        r = (val - fval)[ok]
        xo, yo, gxo, gyo = x[ok], y[ok], gx[ok], gy[ok]
        jac = np.stack([gxo * xo, gxo * yo, gxo, gyo * xo, gyo * yo, gyo], axis=1)
        step, *_ = np.linalg.lstsq(jac, -r, rcond=None)
        a = a + step.reshape(2, 3)
        val, _, _, ok = evaluate(a)
        count = int(ok.sum())
        if count < max(min_count, 1):
            break
        cost = float(np.mean((val - fval)[ok] ** 2))
        if cost < best.cost:
            best = Transform(a.copy(), cost, count / n_fixed)
        if np.max(np.abs(step)) < 1e-6:
            break
    return best


def apply_transform(raster: np.ndarray, transform: Transform | np.ndarray, order: int = 0, fill=0):
    """Resample ``raster`` (moving frame) into the fixed frame.

    ``order`` 0 is nearest neighbour (round half up), 1 is bilinear. Pixels
    mapping outside the raster receive ``fill``.
    """
    a = transform.matrix if isinstance(transform, Transform) else np.asarray(transform, dtype=np.float64)
    raster = np.asarray(raster)
    rows, cols = raster.shape
    y, x = np.mgrid[0:rows, 0:cols].astype(np.float64)
    sx = a[0, 0] * x + a[0, 1] * y + a[0, 2]
    sy = a[1, 0] * x + a[1, 1] * y + a[1, 2]
    if order == 0:
        xi = np.floor(sx + 0.5).astype(np.intp)
        yi = np.floor(sy + 0.5).astype(np.intp)
        inside = (xi >= 0) & (xi < cols) & (yi >= 0) & (yi < rows)
        out = raster[np.clip(yi, 0, rows - 1), np.clip(xi, 0, cols - 1)]
        return np.where(inside, out, np.asarray(fill, dtype=raster.dtype))
    if order == 1:
        val, _, _, ok = _sample_bilinear(raster.astype(np.float64), np.ones(raster.shape, bool), sx, sy)
        return np.where(ok, val, float(fill))
    raise ValueError(f"order must be 0 or 1, got {order}")


@dataclass(frozen=True)
class AlignmentReport:
    mean_iou: float
    fraction_above_half: float
    count: int

    def to_dict(self) -> dict:
        return {"mean_iou": self.mean_iou, "fraction_iou_gt_0.5": self.fraction_above_half, "pairs": self.count}


def alignment_report(pairs: Iterable[tuple[np.ndarray, np.ndarray]]) -> AlignmentReport:
    """Aggregate IoU over (predicted footprint, reference footprint) pairs.

    Pairs whose union is empty count as a perfect match.
    """
    scores = []
    for pred, ref in pairs:
        v = iou(pred, ref)
        scores.append(1.0 if math.isnan(v) else v)
    if not scores:
        raise ValueError("alignment_report needs at least one pair")
    arr = np.asarray(scores)
    return AlignmentReport(float(arr.mean()), float(np.mean(arr > 0.5)), len(scores))

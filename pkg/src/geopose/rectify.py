"""Move annotations and heights between surface level and ground level.

Forward warps scatter each source pixel ``p`` to ``round(p + v(p))`` with
round-half-up on both axes; pixels landing outside the frame are dropped.
"""

from __future__ import annotations

import numpy as np

from .flow import FlowField, compose_flow


def _check(raster: np.ndarray, flow: FlowField) -> None:
    if raster.shape != flow.shape:
        raise ValueError(f"raster shape {raster.shape} does not match flow shape {flow.shape}")


def _targets(flow: FlowField) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows, cols = flow.shape
    vec = compose_flow(flow)
    y, x = np.mgrid[0:rows, 0:cols]
    tx = np.floor(x + vec[..., 0] + 0.5).astype(np.intp)
    ty = np.floor(y + vec[..., 1] + 0.5).astype(np.intp)
    inside = (tx >= 0) & (tx < cols) & (ty >= 0) & (ty < rows)
    return tx, ty, inside


def warp_to_ground(mask: np.ndarray, flow: FlowField) -> np.ndarray:
    """Scatter set pixels of a surface-level mask to their ground positions."""
    mask = np.asarray(mask, dtype=bool)
    _check(mask, flow)
    tx, ty, inside = _targets(flow)
    keep = mask & inside
    out = np.zeros(mask.shape, dtype=bool)
    out[ty[keep], tx[keep]] = True
    return out


def warp_from_ground(footprint: np.ndarray, flow: FlowField) -> np.ndarray:
    """Pixels whose flow target lands inside ``footprint`` (ground -> surface)."""
    footprint = np.asarray(footprint, dtype=bool)
    _check(footprint, flow)
    tx, ty, inside = _targets(flow)
    out = np.zeros(footprint.shape, dtype=bool)
    out[inside] = footprint[ty[inside], tx[inside]]
    return out


def rectify_height(agl: np.ndarray, flow: FlowField, valid: np.ndarray | None = None):
    """Scatter heights to ground level.

    Collisions keep the largest height (the occluding surface). Ground pixels
    that receive nothing are holes. Returns ``(heights, valid)``; holes hold 0.
    """
    agl = np.asarray(agl, dtype=np.float64)
    _check(agl, flow)
    tx, ty, inside = _targets(flow)
    if valid is not None:
        inside &= np.asarray(valid, dtype=bool)
    out = np.full(agl.shape, -np.inf)
    np.maximum.at(out, (ty[inside], tx[inside]), agl[inside])
    written = np.isfinite(out)
    return np.where(written, out, 0.0), written

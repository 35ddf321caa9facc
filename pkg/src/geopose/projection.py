"""Affine oblique rendering of a :class:`~geopose.scene.Scene`.

The image frame is the north-up ground grid of :func:`geopose.scene.pixel_centers`
plus an affine parallax term: a 3-D point ``(e, n, z)`` lands at

    x = (e - ce) / gsd + W // 2 + shift_x + (z - zref) * t * dx
    y = (cn - n) / gsd + H // 2 + shift_y + (z - zref) * t * dy

with ``t = tan(off_nadir) / gsd`` pixels per meter and ``(dx, dy)`` the unit
image direction pointing away from the sensor. ``azimuth`` is measured
clockwise from image up to the side the sensor lies on, so the sensor
direction is ``(sin az, -cos az)`` and ``(dx, dy) = (-sin az, cos az)``.
Objects lean away from the sensor; flow vectors point back toward it.

Each pixel is resolved by exact ray/prism intersection (roof plane test plus
a slab clip for walls) against a fixed-point solve for the terrain; the
highest intersection wins, i.e. the surface nearest the sensor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .flow import FlowField
from .scene import Category, Scene, points_in_polygon

AMBIENT = 0.3
GROUND_ALBEDO = 0.35
WATER_ALBEDO = 0.12
FACADE_ALBEDO = 0.45


def _wrap(deg: float) -> float:
    return float(deg) % 360.0


@dataclass(frozen=True)
class SensorGeometry:
    """Affine view and illumination for one image (all angles in degrees)."""

    azimuth: float
    off_nadir: float
    gsd: float = 1.0
    solar_azimuth: float = 135.0
    solar_elevation: float = 60.0

    def __post_init__(self):
        if not 0.0 <= self.off_nadir < 60.0:
            raise ValueError(f"off_nadir must be in [0, 60), got {self.off_nadir}")
        if not self.gsd > 0:
            raise ValueError(f"gsd must be positive, got {self.gsd}")
        if not 0.0 < self.solar_elevation <= 90.0:
            raise ValueError(f"solar_elevation must be in (0, 90], got {self.solar_elevation}")

    @property
    def parallax(self) -> float:
        """Image displacement in pixels per meter of height."""
        return math.tan(math.radians(self.off_nadir)) / self.gsd

    @property
    def flow_orientation(self) -> tuple[float, float]:
        a = math.radians(self.azimuth)
        return math.sin(a), -math.cos(a)

    @property
    def lean(self) -> tuple[float, float]:
        s, c = self.flow_orientation
        return -s, -c

    def rotated(self, angle: float) -> "SensorGeometry":
        return SensorGeometry(
            _wrap(self.azimuth - angle), self.off_nadir, self.gsd,
            _wrap(self.solar_azimuth - angle), self.solar_elevation,
        )

    def flipped(self, axis: str) -> "SensorGeometry":
        if axis == "horizontal":
            az, saz = -self.azimuth, -self.solar_azimuth
        else:
            az, saz = 180.0 - self.azimuth, 180.0 - self.solar_azimuth
        return SensorGeometry(_wrap(az), self.off_nadir, self.gsd, _wrap(saz), self.solar_elevation)

    def to_dict(self) -> dict:
        return {
            "azimuth": float(self.azimuth),
            "off_nadir": float(self.off_nadir),
            "gsd": float(self.gsd),
            "solar_azimuth": float(self.solar_azimuth),
            "solar_elevation": float(self.solar_elevation),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SensorGeometry":
        return cls(**{k: float(d[k]) for k in ("azimuth", "off_nadir", "gsd", "solar_azimuth", "solar_elevation")})


@dataclass(frozen=True)
class GeoPoseSample:
    intensity: np.ndarray
    dsm: np.ndarray
    dtm: np.ndarray
    agl: np.ndarray
    flow: FlowField
    semantics: np.ndarray
    shadow: np.ndarray
    occlusion: np.ndarray
    footprint: np.ndarray
    facade: np.ndarray
    valid: np.ndarray
    geometry: SensorGeometry
    scene_seed: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.intensity.shape

    @property
    def building(self) -> np.ndarray:
        """Surface-level building annotation: roof plus facade pixels."""
        return (self.semantics == Category.ROOF) | self.facade


@dataclass(frozen=True)
class ImageFrame:
    """Pixel <-> world mapping for one render."""

    center: tuple[float, float]
    geometry: SensorGeometry
    shape: tuple[int, int]
    zref: float
    shift: tuple[float, float] = (0.0, 0.0)
    _lean: tuple[float, float] = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_lean", self.geometry.lean)

    def ground_to_pixel(self, e, n):
        rows, cols = self.shape
        g = self.geometry.gsd
        x = (np.asarray(e) - self.center[0]) / g + cols // 2 + self.shift[0]
        y = (self.center[1] - np.asarray(n)) / g + rows // 2 + self.shift[1]
        return x, y

    def pixel_to_ground(self, x, y):
        rows, cols = self.shape
        g = self.geometry.gsd
        e = self.center[0] + (np.asarray(x) - cols // 2 - self.shift[0]) * g
        n = self.center[1] - (np.asarray(y) - rows // 2 - self.shift[1]) * g
        return e, n

    def project(self, e, n, z):
        x, y = self.ground_to_pixel(e, n)
        k = (np.asarray(z) - self.zref) * self.geometry.parallax
        return x + k * self._lean[0], y + k * self._lean[1]

    def ground_track(self, x, y, z):
        """Ground-grid pixel position of the point at height ``z`` seen at image pixel (x, y)."""
        k = (np.asarray(z) - self.zref) * self.geometry.parallax
        return x - k * self._lean[0], y - k * self._lean[1]


def make_frame(scene: Scene, geom: SensorGeometry, shape, shift=(0.0, 0.0), zref=None) -> ImageFrame:
    rows, cols = shape
    if rows <= 0 or cols <= 0:
        raise ValueError(f"shape must have at least one pixel, got {shape}")
    z0 = scene.terrain.base if zref is None else zref
    return ImageFrame(scene.center, geom, (int(rows), int(cols)), float(z0), (float(shift[0]), float(shift[1])))


# ----------------------------------------------------------------------------
# Closed-form flow and shadows
# ----------------------------------------------------------------------------

def flow_from_agl(agl: np.ndarray, geom: SensorGeometry) -> FlowField:
    """Ground-truth flow: magnitude ``agl * tan(off_nadir) / gsd`` along the sensor direction."""
    agl = np.asarray(agl, dtype=np.float64)
    if np.any(agl < 0):
        raise ValueError("agl must be non-negative")
    return FlowField(geom.flow_orientation, agl * geom.parallax)


def _march_to_sun(e, n, z, height_fn, geom: SensorGeometry, z_top: float, step: float) -> np.ndarray:
    """Shadow flag for points (e, n, z): does the sunward ray pass below ``height_fn``?"""
    shadow = np.zeros(np.shape(e), dtype=bool)
    if geom.solar_elevation >= 90.0:
        return shadow
    rise = math.tan(math.radians(geom.solar_elevation))
    a = math.radians(geom.solar_azimuth)
    ue, un = math.sin(a), math.cos(a)
    e, n, z = (np.asarray(v, dtype=np.float64).ravel() for v in (e, n, z))
    flat = shadow.ravel()
    active = np.flatnonzero(z < z_top)
    k = 1
    while active.size:
        s = k * step
        ray_z = z[active] + s * rise
        hit = height_fn(e[active] + s * ue, n[active] + s * un) > ray_z + 1e-9
        flat[active[hit]] = True
        active = active[~hit & (ray_z < z_top)]
        k += 1
    return flat.reshape(np.shape(shadow))


def cast_shadows(dsm: np.ndarray, geom: SensorGeometry) -> np.ndarray:
    """Cast shadows on a north-up DSM raster (cells are flat-topped columns).

    A cell is shadowed iff the ray toward the sun from its surface point
    passes below the DSM somewhere; the ray is marched in ``gsd / 4`` steps.
    """
    dsm = np.asarray(dsm, dtype=np.float64)
    rows, cols = dsm.shape
    g = geom.gsd

    def lookup(e, n):
        c = np.floor(e / g + 0.5).astype(np.intp)
        r = np.floor(-n / g + 0.5).astype(np.intp)
        inside = (c >= 0) & (c < cols) & (r >= 0) & (r < rows)
        out = np.full(e.shape, -np.inf)
        out[inside] = dsm[r[inside], c[inside]]
        return out

    r, c = np.mgrid[0:rows, 0:cols].astype(np.float64)
    return _march_to_sun(c * g, -r * g, dsm, lookup, geom, float(dsm.max()), g / 4.0)


# ----------------------------------------------------------------------------
# Rendering
# ----------------------------------------------------------------------------

def _outward_normals(poly: np.ndarray) -> np.ndarray:
    """Unit outward edge normals (in the polygon's own axes) for edges i -> i+1."""
    edges = np.roll(poly, -1, axis=0) - poly
    normals = np.stack([edges[:, 1], -edges[:, 0]], axis=1)
    area2 = np.sum(poly[:, 0] * np.roll(poly[:, 1], -1) - np.roll(poly[:, 0], -1) * poly[:, 1])
    if area2 < 0:
        normals = -normals
    return normals / np.linalg.norm(normals, axis=1, keepdims=True)


def _slab_entry(poly_px: np.ndarray, ax, ay, d) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Clip rays A + s d (s >= 0) against a convex polygon in pixel coordinates.

    Returns (hit, s_enter, entering_edge); s_enter is 0 when A is inside.
    """
    normals = _outward_normals(poly_px)
    lo = np.zeros(np.shape(ax))
    hi = np.full(np.shape(ax), np.inf)
    edge = np.full(np.shape(ax), -1, dtype=np.intp)
    ok = np.ones(np.shape(ax), dtype=bool)
    for i, (nrm, v) in enumerate(zip(normals, poly_px)):
        num = nrm[0] * (ax - v[0]) + nrm[1] * (ay - v[1])
        den = nrm[0] * d[0] + nrm[1] * d[1]
        if abs(den) < 1e-15:
            ok &= num <= 1e-12
            continue
        bound = -num / den
        if den < 0:
            better = bound > lo
            edge = np.where(better, i, edge)
            lo = np.where(better, bound, lo)
        else:
            hi = np.minimum(hi, bound)
    return ok & (lo <= hi), lo, edge


def _solve_terrain(frame: ImageFrame, scene: Scene, x, y, iters: int = 100):
    """Fixed point z = T(ground(x, y, z)): where each pixel's ray meets bare terrain."""
    z = np.full(np.shape(x), frame.zref)
    for _ in range(iters if frame.geometry.parallax > 0 else 1):
        gx, gy = frame.ground_track(x, y, z)
        e, n = frame.pixel_to_ground(gx, gy)
        z_new = scene.terrain.height(e, n)
        if np.max(np.abs(z_new - z), initial=0.0) < 1e-12:
            z = z_new
            break
        z = z_new
    gx, gy = frame.ground_track(x, y, z)
    return z, gx, gy


def render_oblique(
    scene: Scene,
    geom: SensorGeometry,
    shape: tuple[int, int],
    shift: tuple[float, float] = (0.0, 0.0),
    zref: float | None = None,
) -> GeoPoseSample:
    """Render all supervision layers of ``scene`` seen from ``geom``.

    ``shift`` translates image content by whole or fractional pixels, which
    stands in for a geolocation offset between two views.
    """
    frame = make_frame(scene, geom, shape, shift, zref)
    rows, cols = frame.shape
    y, x = np.mgrid[0:rows, 0:cols].astype(np.float64)
    t = geom.parallax
    lean = geom.lean

    z_ground, gxt, gyt = _solve_terrain(frame, scene, x, y)
    et, nt = frame.pixel_to_ground(gxt, gyt)

    best_z = z_ground.copy()
    best_gx, best_gy = gxt.copy(), gyt.copy()
    owner = np.full(shape, -1, dtype=np.intp)
    wall = np.zeros(shape, dtype=bool)
    wall_edge = np.full(shape, -1, dtype=np.intp)

    for i, b in enumerate(scene.buildings):
        px, py = frame.ground_to_pixel(b.footprint[:, 0], b.footprint[:, 1])
        poly = np.stack([px, py], axis=1)
        ax, ay = frame.ground_track(x, y, b.top)
        if t > 0:
            hit, s, edge = _slab_entry(poly, ax, ay, lean)
            cz = b.top - s / t
            hx, hy = ax + s * lean[0], ay + s * lean[1]
            he, hn = frame.pixel_to_ground(hx, hy)
            hit &= cz >= scene.terrain.height(he, hn)
            is_wall = s > 0
        else:
            hit = points_in_polygon(poly, ax, ay)
            cz = np.full(shape, b.top)
            hx, hy = ax, ay
            edge = np.full(shape, -1, dtype=np.intp)
            is_wall = np.zeros(shape, dtype=bool)
        # strict: on equal height the earlier prism keeps the pixel
        take = hit & (cz > best_z)
        best_z = np.where(take, cz, best_z)
        best_gx = np.where(take, hx, best_gx)
        best_gy = np.where(take, hy, best_gy)
        owner = np.where(take, i, owner)
        wall = np.where(take, is_wall, wall)
        wall_edge = np.where(take, edge, wall_edge)

    be, bn = frame.pixel_to_ground(best_gx, best_gy)
    on_ground = owner < 0
    dsm = best_z
    dtm = np.where(on_ground, dsm, scene.terrain.height(be, bn))
    dtm = np.minimum(dtm, dsm)
    agl = dsm - dtm
    flow = flow_from_agl(agl, geom)

    # labels
    semantics = np.full(shape, Category.GROUND, dtype=np.uint8)
    for p in scene.patches:
        semantics[on_ground & points_in_polygon(p.footprint, be, bn)] = p.category
    facade = np.zeros(shape, dtype=bool)
    footprint = np.zeros(shape, dtype=bool)
    under_prism = np.zeros(shape, dtype=bool)
    for i, b in enumerate(scene.buildings):
        mine = owner == i
        if b.is_building:
            semantics[mine & ~wall] = Category.ROOF
            semantics[mine & wall] = Category.FACADE
            facade |= mine & wall
        else:
            semantics[mine] = b.category
        inside = points_in_polygon(b.footprint, et, nt)
        under_prism |= inside
        if b.is_building:
            footprint |= inside
    occlusion = (agl > 0) & ~under_prism

    # illumination
    z_top = max([b.top for b in scene.buildings], default=-np.inf)
    z_top = max(z_top, float(dsm.max())) + 1e-6
    shadow = _march_to_sun(be, bn, dsm, scene.surface_height, geom, z_top, geom.gsd / 4.0)
    intensity = _shade(scene, geom, owner, wall, wall_edge, be, bn, semantics, shadow)

    return GeoPoseSample(
        intensity=intensity,
        dsm=dsm,
        dtm=dtm,
        agl=agl,
        flow=flow,
        semantics=semantics,
        shadow=shadow,
        occlusion=occlusion,
        footprint=footprint,
        facade=facade,
        valid=np.ones(shape, dtype=bool),
        geometry=geom,
        scene_seed=int(scene.seed),
    )


def _shade(scene, geom, owner, wall, wall_edge, e, n, semantics, shadow) -> np.ndarray:
    el = math.radians(geom.solar_elevation)
    az = math.radians(geom.solar_azimuth)
    sun = np.array([math.cos(el) * math.sin(az), math.cos(el) * math.cos(az), math.sin(el)])

    ge, gn = scene.terrain.gradient(e, n)
    norm = np.sqrt(ge**2 + gn**2 + 1.0)
    lambert = (-ge * sun[0] - gn * sun[1] + sun[2]) / norm
    albedo = np.where(semantics == Category.WATER, WATER_ALBEDO, GROUND_ALBEDO)

    for i, b in enumerate(scene.buildings):
        mine = owner == i
        if not mine.any():
            continue
        roof = mine & ~wall
        lambert = np.where(roof, sun[2], lambert)
        albedo = np.where(roof, b.tone, albedo)
        normals = _outward_normals(b.footprint)
        wall_albedo = FACADE_ALBEDO if b.is_building else b.tone
        for k, (ne, nn) in enumerate(normals):
            face = mine & wall & (wall_edge == k)
            lambert = np.where(face, ne * sun[0] + nn * sun[1], lambert)
            albedo = np.where(face, wall_albedo, albedo)

    direct = np.clip(lambert, 0.0, 1.0) * ~shadow
    return np.clip(albedo * (AMBIENT + (1.0 - AMBIENT) * direct), 0.0, 1.0)


# ----------------------------------------------------------------------------
# Independent ray-march oracle
# ----------------------------------------------------------------------------

def raycast_displacement(
    scene: Scene,
    geom: SensorGeometry,
    shape: tuple[int, int],
    shift: tuple[float, float] = (0.0, 0.0),
    zref: float | None = None,
    step_px: float = 0.5,
    refine: int = 24,
) -> np.ndarray:
    """Per-pixel parallax (px) measured by marching each viewing ray.

    The ray is stepped down from above the tallest prism in increments of
    ``step_px`` along the ground track against ``scene.surface_height``; the
    first crossing is bisected, the ground point under the hit is projected
    back into the image and the distance to the pixel is returned. Shares
    nothing with :func:`render_oblique` beyond the projection equations.
    """
    frame = make_frame(scene, geom, shape, shift, zref)
    rows, cols = frame.shape
    y, x = (a.ravel() for a in np.mgrid[0:rows, 0:cols].astype(np.float64))
    t = geom.parallax
    if t == 0:
        return np.zeros(frame.shape)

    def f(z, idx):
        gx, gy = frame.ground_track(x[idx], y[idx], z)
        e, n = frame.pixel_to_ground(gx, gy)
        return z - scene.surface_height(e, n)

    relief = scene.terrain.relief_bound(scene.extent)
    z_hi = max([b.top for b in scene.buildings], default=scene.terrain.base) + relief + 1.0
    z_lo = scene.terrain.base - relief - 1.0
    dz = step_px / t
    upper = np.full(x.shape, np.nan)
    lower = np.full(x.shape, np.nan)
    pending = np.arange(x.size)
    z_prev = z_hi
    z = z_hi
    while pending.size and z > z_lo - dz:
        z = z_prev - dz
        crossed = f(np.full(pending.size, z), pending) <= 0
        idx = pending[crossed]
        upper[idx] = z_prev
        lower[idx] = z
        pending = pending[~crossed]
        z_prev = z
    if pending.size:
        raise RuntimeError(f"{pending.size} rays never met the surface")
    idx = np.arange(x.size)
    for _ in range(refine):
        mid = 0.5 * (upper + lower)
        below = f(mid, idx) <= 0
        lower = np.where(below, mid, lower)
        upper = np.where(below, upper, mid)
    z_hit = lower
    gx, gy = frame.ground_track(x, y, z_hit)
    e, n = frame.pixel_to_ground(gx, gy)
    px, py = frame.project(e, n, scene.terrain.height(e, n))
    return np.hypot(px - x, py - y).reshape(frame.shape)

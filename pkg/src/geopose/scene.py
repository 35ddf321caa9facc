"""Procedural urban scenes: smooth analytic terrain plus extruded prisms.

A :class:`Scene` lives in a local metric frame with easting ``e`` in
``[0, width]`` and northing ``n`` in ``[0, height]``. Terrain is an analytic
function (a base elevation, an optional planar slope and a handful of
low-frequency sinusoids) so any raster sampled from it is exact. Everything
raised above the terrain is a :class:`BuildingPrism`; flat water bodies are
:class:`GroundPatch` entries.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

MAX_BUILDING_HEIGHT = 200.0
INVALID_LABEL = 255
SCENE_FORMAT = "geopose-scene"
SCENE_VERSION = 1


class Category(IntEnum):
    """Semantic classes: five urban surface types plus a separate facade label."""

    GROUND = 0
    VEGETATION = 1
    ROOF = 2
    WATER = 3
    ELEVATED_ROAD = 4
    FACADE = 5


CATEGORY_NAMES = {
    Category.GROUND: "ground",
    Category.VEGETATION: "vegetation",
    Category.ROOF: "roof",
    Category.WATER: "water",
    Category.ELEVATED_ROAD: "elevated_road",
    Category.FACADE: "facade",
}


# ----------------------------------------------------------------------------
# Geometry helpers
# ----------------------------------------------------------------------------

def rectangle(center: Sequence[float], size: Sequence[float], angle_deg: float = 0.0) -> np.ndarray:
    """Corners of a rectangle, counter-clockwise in (e, n), shape (4, 2)."""
    cx, cy = center
    hw, hh = size[0] / 2.0, size[1] / 2.0
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    local = np.array([[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([cx, cy])


def points_in_polygon(poly: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Vectorized inside test for a convex polygon (boundary counts as inside).

    Works for either vertex winding.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    sign = 1.0 if _signed_area(poly) >= 0 else -1.0
    inside = np.ones(np.broadcast(x, y).shape, dtype=bool)
    nxt = np.concatenate([poly[1:], poly[:1]])
    for (x0, y0), (x1, y1) in zip(poly.tolist(), nxt.tolist()):
        cross = (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0)
        inside &= sign * cross >= -1e-12
    return inside


def _signed_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    xn, yn = np.concatenate([x[1:], x[:1]]), np.concatenate([y[1:], y[:1]])
    return 0.5 * float(np.sum(x * yn - xn * y))


def polygons_separated(a: np.ndarray, b: np.ndarray, gap: float = 0.0) -> bool:
    """True when some separating axis keeps the convex polygons ``gap`` apart."""
    for poly in (a, b):
        edges = np.roll(poly, -1, axis=0) - poly
        for ex, ey in edges:
            norm = math.hypot(ex, ey)
            if norm == 0.0:
                continue
            axis = np.array([-ey, ex]) / norm
            pa, pb = a @ axis, b @ axis
            if pa.max() + gap <= pb.min() or pb.max() + gap <= pa.min():
                return True
    return False


# ----------------------------------------------------------------------------
# Scene types
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Terrain:
    """Analytic ground elevation in meters.

    ``height(e, n) = base + slope . (e - e0, n - n0) + sum_k a_k sin(2 pi (kx e + ky n) + phase_k)``
    where ``(e0, n0)`` is ``origin`` and wave numbers are in cycles per meter.
    """

    base: float = 0.0
    slope: tuple[float, float] = (0.0, 0.0)
    origin: tuple[float, float] = (0.0, 0.0)
    waves: tuple[tuple[float, float, float, float], ...] = ()

    def height(self, e, n):
        e = np.asarray(e, dtype=np.float64)
        n = np.asarray(n, dtype=np.float64)
        z = self.base + self.slope[0] * (e - self.origin[0]) + self.slope[1] * (n - self.origin[1])
        for amp, kx, ky, phase in self.waves:
            z = z + amp * np.sin(2.0 * np.pi * (kx * e + ky * n) + phase)
        return z

    def gradient(self, e, n) -> tuple[np.ndarray, np.ndarray]:
        e = np.asarray(e, dtype=np.float64)
        n = np.asarray(n, dtype=np.float64)
        ge = np.full(np.broadcast(e, n).shape, float(self.slope[0]))
        gn = np.full(ge.shape, float(self.slope[1]))
        for amp, kx, ky, phase in self.waves:
            c = amp * 2.0 * np.pi * np.cos(2.0 * np.pi * (kx * e + ky * n) + phase)
            ge = ge + c * kx
            gn = gn + c * ky
        return ge, gn

    def relief_bound(self, extent: tuple[float, float]) -> float:
        """Upper bound on max - min elevation over the extent."""
        slope_span = abs(self.slope[0]) * extent[0] + abs(self.slope[1]) * extent[1]
        return slope_span + 2.0 * sum(abs(w[0]) for w in self.waves)


@dataclass(frozen=True)
class BuildingPrism:
    """Vertical extrusion of a convex footprint.

    ``base`` is the reference ground elevation the height is measured from;
    the flat top sits at ``base + height``. ``tone`` is a [0, 1] surface
    brightness used only by the renderer.
    """

    footprint: np.ndarray
    height: float
    category: Category = Category.ROOF
    base: float = 0.0
    tone: float = 0.5

    def __post_init__(self):
        fp = np.asarray(self.footprint, dtype=np.float64)
        if fp.ndim != 2 or fp.shape[1] != 2 or fp.shape[0] < 3:
            raise ValueError(f"footprint must be an (N>=3, 2) array, got {fp.shape}")
        if not 0.0 < self.height <= MAX_BUILDING_HEIGHT:
            raise ValueError(f"prism height {self.height} outside (0, {MAX_BUILDING_HEIGHT}]")
        fp.setflags(write=False)
        object.__setattr__(self, "footprint", fp)
        object.__setattr__(self, "category", Category(self.category))

    @property
    def top(self) -> float:
        return self.base + self.height

    @property
    def is_building(self) -> bool:
        return self.category == Category.ROOF


@dataclass(frozen=True)
class GroundPatch:
    """Flat, terrain-following region with a non-ground label (water)."""

    footprint: np.ndarray
    category: Category = Category.WATER

    def __post_init__(self):
        fp = np.asarray(self.footprint, dtype=np.float64)
        fp.setflags(write=False)
        object.__setattr__(self, "footprint", fp)
        object.__setattr__(self, "category", Category(self.category))


@dataclass(frozen=True)
class Scene:
    seed: int
    extent: tuple[float, float]
    terrain: Terrain
    buildings: tuple[BuildingPrism, ...] = ()
    patches: tuple[GroundPatch, ...] = ()

    @property
    def center(self) -> tuple[float, float]:
        return self.extent[0] / 2.0, self.extent[1] / 2.0

    def surface_height(self, e, n) -> np.ndarray:
        """Top surface elevation (DSM) at arbitrary points."""
        e, n = np.broadcast_arrays(np.asarray(e, dtype=np.float64), np.asarray(n, dtype=np.float64))
        z = np.array(self.terrain.height(e, n), dtype=np.float64)
        for b in self.buildings:
            # bounding-box prefilter; the margin covers the inside test's tolerance
            lo = b.footprint.min(axis=0) - 1e-9
            hi = b.footprint.max(axis=0) + 1e-9
            idx = np.nonzero((e >= lo[0]) & (e <= hi[0]) & (n >= lo[1]) & (n <= hi[1]))
            if idx[0].size == 0:
                continue
            inside = points_in_polygon(b.footprint, e[idx], n[idx])
            z[idx] = np.where(inside, np.maximum(z[idx], b.top), z[idx])
        return z

    def to_dict(self) -> dict:
        return {
            "format": SCENE_FORMAT,
            "version": SCENE_VERSION,
            "seed": int(self.seed),
            "extent": [float(v) for v in self.extent],
            "terrain": {
                "base": float(self.terrain.base),
                "slope": [float(v) for v in self.terrain.slope],
                "origin": [float(v) for v in self.terrain.origin],
                "waves": [[float(v) for v in w] for w in self.terrain.waves],
            },
            "buildings": [
                {
                    "footprint": b.footprint.tolist(),
                    "height": float(b.height),
                    "base": float(b.base),
                    "category": CATEGORY_NAMES[b.category],
                    "tone": float(b.tone),
                }
                for b in self.buildings
            ],
            "patches": [
                {"footprint": p.footprint.tolist(), "category": CATEGORY_NAMES[p.category]}
                for p in self.patches
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Scene":
        if doc.get("format") != SCENE_FORMAT:
            raise ValueError(f"not a scene document (format={doc.get('format')!r})")
        if doc.get("version") != SCENE_VERSION:
            raise ValueError(f"unsupported scene version {doc.get('version')!r}")
        by_name = {v: k for k, v in CATEGORY_NAMES.items()}
        t = doc["terrain"]
        terrain = Terrain(
            base=t["base"],
            slope=tuple(t["slope"]),
            origin=tuple(t["origin"]),
            waves=tuple(tuple(w) for w in t["waves"]),
        )
        buildings = tuple(
            BuildingPrism(
                footprint=np.array(b["footprint"]),
                height=b["height"],
                base=b["base"],
                category=by_name[b["category"]],
                tone=b["tone"],
            )
            for b in doc["buildings"]
        )
        patches = tuple(
            GroundPatch(np.array(p["footprint"]), by_name[p["category"]]) for p in doc["patches"]
        )
        return cls(int(doc["seed"]), tuple(doc["extent"]), terrain, buildings, patches)


# ----------------------------------------------------------------------------
# Generation
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneConfig:
    extent: tuple[float, float] = (64.0, 64.0)
    n_buildings: tuple[int, int] = (4, 8)
    building_size: tuple[float, float] = (8.0, 18.0)
    height_range: tuple[float, float] = (3.0, 30.0)
    max_relief: float = 2.0
    terrain_base: float = 20.0
    terrain_waves: int = 3
    n_vegetation: tuple[int, int] = (0, 3)
    vegetation_size: tuple[float, float] = (3.0, 7.0)
    vegetation_height: tuple[float, float] = (2.0, 8.0)
    n_roads: tuple[int, int] = (0, 1)
    road_width: tuple[float, float] = (5.0, 8.0)
    road_height: tuple[float, float] = (5.0, 9.0)
    n_water: tuple[int, int] = (0, 1)
    water_size: tuple[float, float] = (6.0, 14.0)
    rotated_fraction: float = 0.25
    snap: float = 0.0
    tone_height_coupling: float = 0.8
    roof_tone: tuple[float, float] = (0.6, 1.0)
    min_gap: float = 2.0
    margin: float = 2.0
    max_attempts: int = 200

    def validate(self) -> None:
        if min(self.extent) <= 0:
            raise ValueError(f"extent must be positive, got {self.extent}")
        lo, hi = self.height_range
        if not (0.0 < lo <= hi <= MAX_BUILDING_HEIGHT):
            raise ValueError(f"height_range must satisfy 0 < lo <= hi <= {MAX_BUILDING_HEIGHT}, got {self.height_range}")
        for name in ("vegetation_height", "road_height"):
            vlo, vhi = getattr(self, name)
            if not (0.0 < vlo <= vhi <= MAX_BUILDING_HEIGHT):
                raise ValueError(f"{name} must be positive and ordered, got {(vlo, vhi)}")
        for name in ("building_size", "vegetation_size", "road_width", "water_size"):
            slo, shi = getattr(self, name)
            if not 0.0 < slo <= shi:
                raise ValueError(f"{name} must be positive and ordered, got {(slo, shi)}")
        for name in ("n_buildings", "n_vegetation", "n_roads", "n_water"):
            clo, chi = getattr(self, name)
            if not 0 <= clo <= chi:
                raise ValueError(f"{name} must satisfy 0 <= lo <= hi, got {(clo, chi)}")
        if self.max_relief < 0:
            raise ValueError("max_relief must be non-negative")
        tlo, thi = self.roof_tone
        if not 0.0 <= tlo <= thi <= 1.0:
            raise ValueError(f"roof_tone must satisfy 0 <= lo <= hi <= 1, got {self.roof_tone}")
        if not 0.0 <= self.tone_height_coupling <= 1.0:
            raise ValueError("tone_height_coupling must be in [0, 1]")
        if self.snap < 0:
            raise ValueError("snap must be non-negative")
        if not 0.0 <= self.rotated_fraction <= 1.0:
            raise ValueError("rotated_fraction must be in [0, 1]")


def _make_terrain(rng: np.random.Generator, cfg: SceneConfig) -> Terrain:
    if cfg.max_relief == 0 or cfg.terrain_waves == 0:
        return Terrain(base=cfg.terrain_base, origin=(cfg.extent[0] / 2, cfg.extent[1] / 2))
    span = max(cfg.extent)
    weights = rng.uniform(0.2, 1.0, size=cfg.terrain_waves)
    amps = weights / weights.sum() * (cfg.max_relief / 2.0)
    waves = []
    for amp in amps:
        wavelength = rng.uniform(1.0, 3.0) * span
        direction = rng.uniform(0.0, 2.0 * np.pi)
        waves.append(
            (
                float(amp),
                float(math.cos(direction) / wavelength),
                float(math.sin(direction) / wavelength),
                float(rng.uniform(0.0, 2.0 * np.pi)),
            )
        )
    return Terrain(base=cfg.terrain_base, origin=(cfg.extent[0] / 2, cfg.extent[1] / 2), waves=tuple(waves))


def _place(
    rng: np.random.Generator,
    cfg: SceneConfig,
    taken: list[np.ndarray],
    size_sampler,
    allow_rotation: bool = True,
) -> np.ndarray | None:
    w, h = cfg.extent
    for _ in range(cfg.max_attempts):
        size = size_sampler()
        angle = 0.0
        if allow_rotation and rng.uniform() < cfg.rotated_fraction:
            angle = float(rng.uniform(0.0, 90.0))
        center = (rng.uniform(0.0, w), rng.uniform(0.0, h))
        poly = rectangle(center, size, angle)
        if cfg.snap > 0 and angle == 0.0:
            poly = np.round(poly / cfg.snap) * cfg.snap
            if np.any(poly.max(axis=0) - poly.min(axis=0) < cfg.snap):
                continue
        if (
            poly[:, 0].min() < cfg.margin
            or poly[:, 1].min() < cfg.margin
            or poly[:, 0].max() > w - cfg.margin
            or poly[:, 1].max() > h - cfg.margin
        ):
            continue
        if all(polygons_separated(poly, other, cfg.min_gap) for other in taken):
            taken.append(poly)
            return poly
    return None


def generate_scene(seed: int, config: SceneConfig | None = None) -> Scene:
    """Deterministic procedural scene for ``(seed, config)``.

    Placement is rejection sampling with a retry cap; when the cap is hit the
    scene simply holds fewer objects than requested.
    """
    cfg = config or SceneConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    terrain = _make_terrain(rng, cfg)
    taken: list[np.ndarray] = []
    prisms: list[BuildingPrism] = []

    def base_of(poly: np.ndarray) -> float:
        pts = np.vstack([poly, poly.mean(axis=0)])
        return float(terrain.height(pts[:, 0], pts[:, 1]).max())

    n_roads = int(rng.integers(cfg.n_roads[0], cfg.n_roads[1] + 1))
    for _ in range(n_roads):
        long_side = 0.8 * max(cfg.extent)

        def road_size():
            width = rng.uniform(*cfg.road_width)
            return (long_side, width) if rng.uniform() < 0.5 else (width, long_side)

        poly = _place(rng, cfg, taken, road_size, allow_rotation=False)
        if poly is None:
            break
        height = float(rng.uniform(*cfg.road_height))
        prisms.append(BuildingPrism(poly, height, Category.ELEVATED_ROAD, base_of(poly), 0.55))

    hlo, hhi = cfg.height_range
    n_build = int(rng.integers(cfg.n_buildings[0], cfg.n_buildings[1] + 1))
    for _ in range(n_build):
        poly = _place(rng, cfg, taken, lambda: rng.uniform(*cfg.building_size, size=2))
        if poly is None:
            logger.info("building placement hit retry cap (seed=%d)", seed)
            break
        height = float(rng.uniform(hlo, hhi))
        rel = 0.5 if hhi == hlo else (height - hlo) / (hhi - hlo)
        c = cfg.tone_height_coupling
        tlo, thi = cfg.roof_tone
        tone = tlo + (thi - tlo) * (c * rel + (1.0 - c) * float(rng.uniform()))
        prisms.append(BuildingPrism(poly, height, Category.ROOF, base_of(poly), tone))

    n_veg = int(rng.integers(cfg.n_vegetation[0], cfg.n_vegetation[1] + 1))
    for _ in range(n_veg):
        poly = _place(rng, cfg, taken, lambda: rng.uniform(*cfg.vegetation_size, size=2))
        if poly is None:
            break
        height = float(rng.uniform(*cfg.vegetation_height))
        prisms.append(BuildingPrism(poly, height, Category.VEGETATION, base_of(poly), 0.3))

    patches: list[GroundPatch] = []
    n_water = int(rng.integers(cfg.n_water[0], cfg.n_water[1] + 1))
    for _ in range(n_water):
        poly = _place(rng, cfg, taken, lambda: rng.uniform(*cfg.water_size, size=2))
        if poly is None:
            break
        patches.append(GroundPatch(poly, Category.WATER))

    return Scene(int(seed), (float(cfg.extent[0]), float(cfg.extent[1])), terrain, tuple(prisms), tuple(patches))


# ----------------------------------------------------------------------------
# Rasters in the north-up ground frame
# ----------------------------------------------------------------------------

def pixel_centers(scene: Scene, gsd: float, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Easting/northing of every pixel center of a north-up grid.

    Pixel ``(rows // 2, cols // 2)`` sits exactly on the extent center, so
    with an integer-meter center and ``gsd`` dividing the snap step, snapped
    footprint corners fall on pixel centers.
    """
    if gsd <= 0:
        raise ValueError(f"gsd must be positive, got {gsd}")
    rows, cols = shape
    ce, cn = scene.center
    e = ce + (np.arange(cols, dtype=np.float64) - cols // 2) * gsd
    n = cn - (np.arange(rows, dtype=np.float64) - rows // 2) * gsd
    return np.meshgrid(e, n)


def sample_dtm(scene: Scene, gsd: float, shape: tuple[int, int]) -> np.ndarray:
    """Terrain elevation (m) at pixel centers, row 0 = north."""
    e, n = pixel_centers(scene, gsd, shape)
    return scene.terrain.height(e, n)


def sample_dsm(scene: Scene, gsd: float, shape: tuple[int, int]) -> np.ndarray:
    e, n = pixel_centers(scene, gsd, shape)
    return scene.surface_height(e, n)

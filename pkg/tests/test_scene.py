import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geopose.scene import (
    MAX_BUILDING_HEIGHT,
    BuildingPrism,
    Category,
    Scene,
    SceneConfig,
    Terrain,
    generate_scene,
    pixel_centers,
    points_in_polygon,
    polygons_separated,
    rectangle,
    sample_dsm,
    sample_dtm,
)


def _inside_convex(poly, px, py):
    """Independent inside test: all edge cross products share a sign (strict interior)."""
    nxt = np.roll(poly, -1, axis=0)
    crosses = [(b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0]) for a, b in zip(poly, nxt)]
    crosses = np.stack(crosses)
    return np.all(crosses > 1e-9, axis=0) | np.all(crosses < -1e-9, axis=0)


def _assert_disjoint(scene):
    e, n = np.meshgrid(np.arange(0, scene.extent[0], 0.25), np.arange(0, scene.extent[1], 0.25))
    hits = np.zeros(e.shape, dtype=int)
    for b in scene.buildings:
        hits += _inside_convex(b.footprint, e, n)
    for p in scene.patches:
        hits += _inside_convex(p.footprint, e, n)
    assert hits.max(initial=0) <= 1


def test_empty_flat_scene():
    cfg = SceneConfig(n_buildings=(0, 0), n_vegetation=(0, 0), n_roads=(0, 0), n_water=(0, 0), max_relief=0.0)
    scene = generate_scene(1, cfg)
    assert scene.buildings == () and scene.patches == ()
    dtm = sample_dtm(scene, 1.0, (16, 16))
    assert np.all(dtm == dtm[0, 0])


def test_generation_is_bit_identical():
    a = generate_scene(42)
    b = generate_scene(42)
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())
    assert np.array_equal(sample_dsm(a, 0.5, (64, 64)), sample_dsm(b, 0.5, (64, 64)))


def test_twenty_buildings_respect_height_bounds_and_disjointness():
    cfg = SceneConfig(extent=(200.0, 200.0), n_buildings=(20, 20), height_range=(3.0, 60.0),
                      n_roads=(0, 0), n_vegetation=(0, 0), n_water=(0, 0))
    scene = generate_scene(7, cfg)
    heights = [b.height for b in scene.buildings]
    assert len(heights) == 20
    assert min(heights) >= 3.0 and max(heights) <= 60.0
    _assert_disjoint(scene)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_footprints_disjoint_and_inside_extent(seed):
    scene = generate_scene(seed)
    for b in scene.buildings:
        assert 0.0 < b.height <= MAX_BUILDING_HEIGHT
        assert np.all(b.footprint >= 0.0)
        assert np.all(b.footprint[:, 0] <= scene.extent[0]) and np.all(b.footprint[:, 1] <= scene.extent[1])
    _assert_disjoint(scene)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_terrain_relief_is_bounded(seed):
    cfg = SceneConfig(max_relief=3.0)
    scene = generate_scene(seed, cfg)
    assert scene.terrain.relief_bound(scene.extent) <= 3.0 + 1e-9
    dtm = sample_dtm(scene, 1.0, (64, 64))
    assert np.all(np.isfinite(dtm))
    assert dtm.max() - dtm.min() <= 3.0 + 1e-9


@pytest.mark.parametrize("bad", [
    dict(extent=(0.0, 10.0)),
    dict(extent=(-5.0, 10.0)),
    dict(height_range=(0.0, 10.0)),
    dict(height_range=(-1.0, 10.0)),
    dict(height_range=(5.0, 250.0)),
])
def test_rejects_invalid_config(bad):
    with pytest.raises(ValueError):
        generate_scene(0, SceneConfig(**bad))


def test_prism_height_bounds():
    with pytest.raises(ValueError):
        BuildingPrism(rectangle((0, 0), (4, 4)), 0.0)
    with pytest.raises(ValueError):
        BuildingPrism(rectangle((0, 0), (4, 4)), 200.5)
    assert BuildingPrism(rectangle((0, 0), (4, 4)), 200.0).height == 200.0


def test_dtm_flat_value():
    scene = Scene(0, (32.0, 32.0), Terrain(base=10.0))
    assert np.all(sample_dtm(scene, 1.0, (8, 8)) == 10.0)


def test_dtm_linear_ramp_matches_plane():
    terrain = Terrain(base=5.0, slope=(0.03, -0.02), origin=(16.0, 16.0))
    scene = Scene(0, (32.0, 32.0), terrain)
    gsd, shape = 0.7, (20, 30)
    dtm = sample_dtm(scene, gsd, shape)
    rows, cols = np.mgrid[0:shape[0], 0:shape[1]]
    e = 16.0 + (cols - shape[1] // 2) * gsd
    n = 16.0 - (rows - shape[0] // 2) * gsd
    expected = 5.0 + 0.03 * (e - 16.0) - 0.02 * (n - 16.0)
    assert np.max(np.abs(dtm - expected)) <= 1e-6


def test_single_pixel_dtm_is_terrain_at_center():
    terrain = Terrain(base=3.0, slope=(0.1, 0.2), waves=((0.5, 0.01, 0.02, 0.3),))
    scene = Scene(0, (40.0, 24.0), terrain)
    dtm = sample_dtm(scene, 2.0, (1, 1))
    assert dtm.shape == (1, 1)
    assert dtm[0, 0] == pytest.approx(float(terrain.height(20.0, 12.0)), abs=1e-12)


def test_pixel_centers_reject_bad_gsd():
    scene = Scene(0, (8.0, 8.0), Terrain())
    with pytest.raises(ValueError):
        pixel_centers(scene, 0.0, (4, 4))


def test_dsm_includes_prism_tops():
    prism = BuildingPrism(rectangle((16.0, 16.0), (8.0, 8.0)), 12.0, base=2.0)
    scene = Scene(0, (32.0, 32.0), Terrain(base=2.0), (prism,))
    dsm = sample_dsm(scene, 1.0, (32, 32))
    assert dsm[16, 16] == 14.0
    assert dsm[0, 0] == 2.0


def test_terrain_gradient_matches_finite_differences():
    t = Terrain(base=1.0, slope=(0.02, 0.05), waves=((0.7, 0.013, -0.021, 1.1), (0.2, 0.03, 0.004, 0.2)))
    e, n = np.array([3.0, 17.5, 40.0]), np.array([9.0, 2.0, 33.3])
    ge, gn = t.gradient(e, n)
    h = 1e-5
    assert np.allclose(ge, (t.height(e + h, n) - t.height(e - h, n)) / (2 * h), atol=1e-8)
    assert np.allclose(gn, (t.height(e, n + h) - t.height(e, n - h)) / (2 * h), atol=1e-8)


def test_scene_json_round_trip():
    scene = generate_scene(5)
    doc = json.loads(json.dumps(scene.to_dict()))
    again = Scene.from_dict(doc)
    assert again.to_dict() == scene.to_dict()
    with pytest.raises(ValueError):
        Scene.from_dict({**doc, "version": 99})


def test_snapped_footprints_sit_on_the_lattice():
    cfg = SceneConfig(snap=1.0, rotated_fraction=0.0, n_roads=(0, 0))
    scene = generate_scene(11, cfg)
    for b in scene.buildings:
        assert np.array_equal(b.footprint, np.round(b.footprint))


def test_categories_of_generated_objects():
    cfg = SceneConfig(n_vegetation=(2, 2), n_roads=(1, 1), n_water=(1, 1), extent=(120.0, 120.0))
    scene = generate_scene(2, cfg)
    cats = {b.category for b in scene.buildings} | {p.category for p in scene.patches}
    assert cats <= {Category.ROOF, Category.VEGETATION, Category.ELEVATED_ROAD, Category.WATER}
    assert Category.WATER not in {b.category for b in scene.buildings}


def test_geometry_helpers():
    sq = rectangle((0.0, 0.0), (2.0, 2.0))
    assert points_in_polygon(sq, np.array([0.0, 1.0, 1.5]), np.array([0.0, 1.0, 0.0])).tolist() == [True, True, False]
    assert polygons_separated(sq, rectangle((5.0, 0.0), (2.0, 2.0)), gap=2.0)
    assert not polygons_separated(sq, rectangle((5.0, 0.0), (2.0, 2.0)), gap=3.5)
    assert not polygons_separated(sq, rectangle((0.5, 0.5), (2.0, 2.0), 30.0))

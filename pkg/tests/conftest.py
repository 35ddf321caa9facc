import numpy as np
import pytest

from geopose.projection import SensorGeometry, render_oblique
from geopose.scene import BuildingPrism, Scene, SceneConfig, Terrain, generate_scene, rectangle

_ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def acceptance():
    """Record one line per acceptance criterion; printed in the terminal summary."""

    def record(criterion: str, passed: bool, detail: str = "") -> bool:
        _ACCEPTANCE.append((criterion, bool(passed), detail))
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in _ACCEPTANCE:
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"{status}  {criterion}" + (f"  [{detail}]" if detail else ""))


def cube_scene(side=10.0, height=10.0, extent=64.0, base=0.0, center=None) -> Scene:
    """A single axis-aligned prism on flat terrain."""
    c = (extent / 2.0, extent / 2.0) if center is None else center
    prism = BuildingPrism(rectangle(c, (side, side)), height, base=base)
    return Scene(0, (extent, extent), Terrain(base=base), (prism,))


@pytest.fixture(scope="session")
def small_config():
    return SceneConfig(extent=(48.0, 48.0), n_buildings=(2, 4), building_size=(6.0, 12.0),
                       height_range=(3.0, 20.0), n_roads=(0, 1))


@pytest.fixture(scope="session")
def oblique_sample(small_config):
    scene = generate_scene(3, small_config)
    return render_oblique(scene, SensorGeometry(35.0, 30.0, 0.5, 140.0, 60.0), (96, 96))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


TINY_CONFIG = {
    "version": 1, "image_size": 32, "train_scenes": 2, "test_scenes": 2, "seeds": [0],
    "train_views": {"gsd": 2.0}, "test_views": {"gsd": 2.0}, "schedule": {"epochs": 1},
    "align_pairs": 2, "align_max_shift": 2, "align_search": 3,
}


def run_pipeline(root, jobs=1):
    """Run every subcommand on a tiny config; returns {relative path: bytes}."""
    import json

    from geopose.cli import main

    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY_CONFIG))
    common = ["--config", str(cfg), "--jobs", str(jobs)]
    steps = [
        ["synth", "--seed", "4", "--out", str(root / "synth")],
        ["render", "--scene", str(root / "synth" / "scene.json"), "--seed", "4", "--off-nadir", "30",
         "--out", str(root / "render")],
        ["encode-flow", "--agl", str(root / "render" / "agl.gpr"), "--out", str(root / "flow")],
        ["rectify", "--manifest", str(root / "render" / "manifest.json"),
         "--flow", str(root / "flow" / "flow.gpr"), "--out", str(root / "rectify")],
        ["train", "--variant", "flow-ha", "--out", str(root / "train")],
        ["eval", "--checkpoint", str(root / "train" / "checkpoint.gpr"), "--out", str(root / "eval")],
        ["eval", "--gt", "--out", str(root / "eval_gt")],
        ["align", "--fixed", str(root / "rectify" / "heights.gpr"), "--moving", str(root / "rectify" / "heights.gpr"),
         "--annotation", str(root / "rectify" / "footprint_pred.gpr"),
         "--reference", str(root / "render" / "footprint.gpr"), "--out", str(root / "align")],
        ["bench", "--out", str(root / "bench")],
    ]
    for argv in steps:
        code = main(argv[:1] + common + argv[1:])
        assert code == 0, argv
    skip = {cfg}
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file() and p not in skip}

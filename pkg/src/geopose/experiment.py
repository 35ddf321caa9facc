"""Synthetic benchmark: view sampling, training of the four variants, evaluation tables."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import align
from .flow import FlowField, rotate_sample
from .metrics import epe, angle_error, iou, magnitude_error, per_category_epe
from .model import VARIANTS, Model, ModelConfig, Schedule, VariantConfig, predict, train
from .projection import GeoPoseSample, SensorGeometry, render_oblique
from .rectify import rectify_height, warp_from_ground, warp_to_ground
from .scene import SceneConfig, generate_scene

logger = logging.getLogger(__name__)

TEST_ROTATIONS = tuple(float(a) for a in range(0, 360, 36))
REPORT_VERSION = 1


@dataclass(frozen=True)
class ViewDistribution:
    """Sensor geometry sampler.

    Azimuths are ``center +/- spread`` (uniform); ``spread >= 180`` covers the
    full circle. The solar azimuth is drawn the same way.
    """

    azimuth_center: float = 200.0
    azimuth_spread: float = 15.0
    off_nadir: tuple[float, float] = (25.0, 35.0)
    gsd: float = 0.5
    solar_azimuth_center: float = 140.0
    solar_azimuth_spread: float = 10.0
    solar_elevation: tuple[float, float] = (70.0, 85.0)

    def validate(self) -> None:
        lo, hi = self.off_nadir
        if not 0.0 <= lo <= hi < 60.0:
            raise ValueError(f"off_nadir range must lie in [0, 60), got {self.off_nadir}")
        if self.azimuth_spread < 0 or self.solar_azimuth_spread < 0:
            raise ValueError("spreads must be non-negative")
        slo, shi = self.solar_elevation
        if not 0.0 < slo <= shi <= 90.0:
            raise ValueError(f"solar_elevation range must lie in (0, 90], got {self.solar_elevation}")
        if self.gsd <= 0:
            raise ValueError("gsd must be positive")

    def sample(self, rng: np.random.Generator) -> SensorGeometry:
        def around(center, spread):
            return float(center + rng.uniform(-min(spread, 180.0), min(spread, 180.0))) % 360.0

        az = around(self.azimuth_center, self.azimuth_spread)
        off = float(rng.uniform(*self.off_nadir))
        saz = around(self.solar_azimuth_center, self.solar_azimuth_spread)
        sel = float(rng.uniform(*self.solar_elevation))
        return SensorGeometry(az, off, self.gsd, saz, sel)


def bench_scene_config() -> SceneConfig:
    """Flat, lattice-snapped city blocks sized so footprint warps are near-lossless."""
    return SceneConfig(
        extent=(64.0, 64.0),
        n_buildings=(2, 5),
        building_size=(12.0, 24.0),
        height_range=(3.0, 15.0),
        max_relief=0.0,
        n_roads=(0, 0),
        rotated_fraction=0.0,
        snap=1.0,
        min_gap=3.0,
        margin=10.0,
    )


@dataclass(frozen=True)
class BenchConfig:
    scene: SceneConfig = field(default_factory=bench_scene_config)
    image_size: int = 128
    train_scenes: int = 24
    test_scenes: int = 8
    train_views: ViewDistribution = field(default_factory=ViewDistribution)
    test_views: ViewDistribution = field(default_factory=ViewDistribution)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: Schedule = field(default_factory=Schedule)
    seeds: tuple[int, ...] = (0, 1, 2)
    variants: tuple[str, ...] = tuple(v.name for v in VARIANTS)
    iou_min_off_nadir: float = 20.0
    align_pairs: int = 20
    align_max_shift: int = 5
    align_search: int = 8
    align_min_overlap: float = 0.25

    def validate(self) -> None:
        self.scene.validate()
        self.train_views.validate()
        self.test_views.validate()
        self.model.validate()
        self.schedule.validate()
        if self.image_size < self.model.receptive_field:
            raise ValueError("image_size smaller than the model receptive field")
        if self.train_scenes < 1 or self.test_scenes < 1 or not self.seeds:
            raise ValueError("need at least one train scene, test scene and seed")
        for name in self.variants:
            VariantConfig.from_name(name)
        if self.align_max_shift > self.align_search:
            raise ValueError("align_max_shift must not exceed align_search")


# ----------------------------------------------------------------------------
# Data
# ----------------------------------------------------------------------------

SPLITS = {"train": 0, "test": 1, "align": 2}


def scene_seed(seed: int, split: str, index: int) -> int:
    return int(np.random.SeedSequence([seed, SPLITS[split], index]).generate_state(1)[0])


def render_view(cfg: BenchConfig, seed: int, split: str, index: int, views: ViewDistribution) -> GeoPoseSample:
    sseed = scene_seed(seed, split, index)
    scene = generate_scene(sseed, cfg.scene)
    geom = views.sample(np.random.default_rng([sseed, 7]))
    return render_oblique(scene, geom, (cfg.image_size, cfg.image_size))


def make_split(cfg: BenchConfig, seed: int, split: str, mapper: Callable = map) -> list[GeoPoseSample]:
    views = cfg.train_views if split == "train" else cfg.test_views
    n = cfg.train_scenes if split == "train" else cfg.test_scenes
    return list(mapper(_RenderJob(cfg, seed, split, views), range(n)))


@dataclass(frozen=True)
class _RenderJob:
    cfg: BenchConfig
    seed: int
    split: str
    views: ViewDistribution

    def __call__(self, index: int) -> GeoPoseSample:
        return render_view(self.cfg, self.seed, self.split, index, self.views)


# ----------------------------------------------------------------------------
# Evaluation
# ----------------------------------------------------------------------------

def evaluate_flow(model: Model, samples: Sequence[GeoPoseSample], rotations: Sequence[float] = (0.0,)) -> dict:
    """Mean EPE, angle and magnitude error over samples x rotations (per-image means)."""
    epes, angles, mags = [], [], []
    cats: dict[str, list[float]] = {}
    for sample in samples:
        for angle in rotations:
            s = rotate_sample(sample, angle)
            pred = predict(model, s)
            o = pred.unit_orientation()
            # a degenerate prediction carries no direction; score it as zero flow
            flow = pred.flow() if o is not None else FlowField.zeros(s.shape)
            epes.append(epe(flow, s.flow, s.valid))
            mags.append(magnitude_error(flow, s.flow, s.valid))
            ang = angle_error(o, s.flow.orientation, s.flow.magnitude[s.valid]) if o is not None else 180.0
            if ang is not None:
                angles.append(ang)
            for name, v in per_category_epe(flow, s.flow, s.semantics, s.shadow, s.valid).items():
                if v is not None:
                    cats.setdefault(name, []).append(v)
    return {
        "epe": float(np.mean(epes)),
        "angle": float(np.mean(angles)) if angles else None,
        "magnitude": float(np.mean(mags)),
        "per_category": {k: float(np.mean(v)) for k, v in sorted(cats.items())},
        "images": len(epes),
    }


def footprint_ious(samples: Sequence[GeoPoseSample], flows: Sequence[FlowField | None], min_off_nadir: float = 0.0) -> dict:
    """Building->footprint and footprint->building IoU, unrectified vs warped.

    Samples below ``min_off_nadir`` or without any building are skipped.
    """
    rows = {"unrectified": [], "to_ground": [], "from_ground": []}
    for s, f in zip(samples, flows):
        if s.geometry.off_nadir < min_off_nadir or not s.footprint.any() or f is None:
            continue
        b = s.building
        rows["unrectified"].append(iou(b, s.footprint))
        rows["to_ground"].append(iou(warp_to_ground(b, f), s.footprint))
        rows["from_ground"].append(iou(warp_from_ground(s.footprint, f), b))
    out = {k: (float(np.mean(v)) if v else None) for k, v in rows.items()}
    out["min_to_ground"] = float(np.min(rows["to_ground"])) if rows["to_ground"] else None
    out["max_from_ground"] = float(np.max(rows["from_ground"])) if rows["from_ground"] else None
    out["samples"] = len(rows["unrectified"])
    return out


@dataclass(frozen=True)
class AlignPair:
    fixed: GeoPoseSample
    moving: GeoPoseSample
    shift: tuple[int, int]


def make_align_pair(cfg: BenchConfig, seed: int, index: int) -> AlignPair:
    """Two renders of one scene from different azimuths; the second is offset by an integer shift."""
    sseed = scene_seed(seed, "align", index)
    scene = generate_scene(sseed, cfg.scene)
    rng = np.random.default_rng([sseed, 11])
    views = cfg.test_views
    g1 = views.sample(rng)
    g2 = SensorGeometry(
        (g1.azimuth + rng.uniform(90.0, 270.0)) % 360.0,
        float(rng.uniform(*views.off_nadir)),
        views.gsd,
        g1.solar_azimuth,
        g1.solar_elevation,
    )
    k = cfg.align_max_shift
    dx, dy = (int(v) for v in rng.integers(-k, k + 1, size=2))
    shape = (cfg.image_size, cfg.image_size)
    return AlignPair(render_oblique(scene, g1, shape), render_oblique(scene, g2, shape, shift=(dx, dy)), (dx, dy))


def _rectified(sample: GeoPoseSample, flow: FlowField, agl: np.ndarray):
    heights, written = rectify_height(agl, flow, sample.valid)
    return heights, written


def alignment_rows(cfg: BenchConfig, pairs: Sequence[AlignPair], predicted: dict | None = None) -> dict:
    """Footprint IoU rows for each alignment method.

    Each pair's moving-view building annotation is rectified to ground with
    its flow and compared with the fixed view's footprint, either as is
    ("unaligned") or after registering moving onto fixed.
    """
    rows: dict[str, list] = {"unaligned": [], "intensity_aligned": [], "gt_height_aligned": []}
    if predicted is not None:
        rows["flow-ha"] = []
        rows["flow-ha fixed angle"] = []
    kw = dict(search=cfg.align_search, min_overlap=cfg.align_min_overlap)
    for i, pair in enumerate(pairs):
        fx, mv = pair.fixed, pair.moving
        annot = warp_to_ground(mv.building, mv.flow)
        ref = fx.footprint
        rows["unaligned"].append((annot, ref))
        t = align.register(fx.intensity, mv.intensity, **kw)
        rows["intensity_aligned"].append((align.apply_transform(annot, t), ref))
        hf, vf = _rectified(fx, fx.flow, fx.agl)
        hm, vm = _rectified(mv, mv.flow, mv.agl)
        t = align.register(hf, hm, vf, vm, **kw)
        rows["gt_height_aligned"].append((align.apply_transform(annot, t), ref))
        if predicted is not None:
            (pf, pm) = predicted[i]
            for name, orient in (("flow-ha", None), ("flow-ha fixed angle", "geometry")):
                fl_f = _pred_flow(pf, fx, orient)
                fl_m = _pred_flow(pm, mv, orient)
                if fl_f is None or fl_m is None:
                    rows[name].append((np.zeros_like(ref), ref))
                    continue
                hf, vf = _rectified(fx, fl_f, np.maximum(pf.height, 0.0))
                hm, vm = _rectified(mv, fl_m, np.maximum(pm.height, 0.0))
                t = align.register(hf, hm, vf, vm, **kw)
                rows[name].append((align.apply_transform(annot, t), ref))
    return {k: align.alignment_report(v).to_dict() for k, v in rows.items()}


def _pred_flow(pred, sample: GeoPoseSample, orient: str | None) -> FlowField | None:
    o = sample.geometry.flow_orientation if orient == "geometry" else pred.unit_orientation()
    if o is None:
        return None
    return FlowField(o, np.maximum(pred.magnitude, 0.0))


# ----------------------------------------------------------------------------
# Benchmark driver
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainJob:
    cfg: BenchConfig
    seed: int
    variant: str

    def __call__(self, train_set: Sequence[GeoPoseSample]):
        v = VariantConfig.from_name(self.variant)
        return train(v, train_set, self.cfg.schedule, self.cfg.model, seed=self.seed)


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def run_bench(cfg: BenchConfig, mapper: Callable = map) -> dict:
    """Full experiment: per seed render data, train each variant, evaluate.

    ``mapper`` is an order-preserving map (``map`` or a process pool's) used
    for the per-sample rendering and the per-variant training.
    """
    cfg.validate()
    per_seed = []
    for seed in cfg.seeds:
        logger.info("bench seed %d: rendering", seed)
        train_set = make_split(cfg, seed, "train", mapper)
        test_set = make_split(cfg, seed, "test", mapper)
        jobs = [(TrainJob(cfg, seed, name), train_set) for name in cfg.variants]
        results = list(mapper(_run_train, jobs))
        models = {name: r[0] for name, r in zip(cfg.variants, results)}
        logs = {name: r[1] for name, r in zip(cfg.variants, results)}
        plain = {name: evaluate_flow(m, test_set) for name, m in models.items()}
        rotated = {name: evaluate_flow(m, test_set, TEST_ROTATIONS) for name, m in models.items()}
        gt_iou = footprint_ious(test_set, [s.flow for s in test_set])
        iou_rows = {"gt": gt_iou}
        if "flow-ha" in models:
            preds = [_pred_flow(predict(models["flow-ha"], s), s, None) for s in test_set]
            iou_rows["flow-ha"] = footprint_ious(test_set, preds, cfg.iou_min_off_nadir)
            iou_rows["gt_min_off_nadir"] = footprint_ious(test_set, [s.flow for s in test_set], cfg.iou_min_off_nadir)
        pairs = [make_align_pair(cfg, seed, i) for i in range(cfg.align_pairs)]
        predicted = None
        if "flow-ha" in models:
            predicted = [(predict(models["flow-ha"], p.fixed), predict(models["flow-ha"], p.moving)) for p in pairs]
        aligned = alignment_rows(cfg, pairs, predicted)
        per_seed.append({
            "seed": seed,
            "no_test_rotation": plain,
            "test_rotation": rotated,
            "footprint_iou": iou_rows,
            "alignment": aligned,
            "final_loss": {name: log[-1]["total"] for name, log in logs.items()},
        })
        logger.info("bench seed %d: done", seed)
    summary = {}
    for key in ("no_test_rotation", "test_rotation"):
        summary[key] = {
            name: {
                "epe": _mean(r[key][name]["epe"] for r in per_seed),
                "angle": _mean(r[key][name]["angle"] for r in per_seed),
                "magnitude": _mean(r[key][name]["magnitude"] for r in per_seed),
            }
            for name in cfg.variants
        }
    return {"version": REPORT_VERSION, "summary": summary, "per_seed": per_seed}


def _run_train(job):
    fn, data = job
    return fn(data)


def rotation_orderings(report: dict) -> dict[str, bool]:
    """The directional checks on the seed-mean EPE."""
    a = report["summary"]["no_test_rotation"]
    b = report["summary"]["test_rotation"]
    return {
        "flow-h <= flow (no test rotation)": a["flow-h"]["epe"] <= a["flow"]["epe"],
        "flow-ha <= flow (test rotation)": b["flow-ha"]["epe"] <= b["flow"]["epe"],
        "flow-ha <= flow-h (test rotation)": b["flow-ha"]["epe"] <= b["flow-h"]["epe"],
        "flow-ha <= flow-a (test rotation)": b["flow-ha"]["epe"] <= b["flow-a"]["epe"],
    }

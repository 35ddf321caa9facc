"""Command-line front end: ``geopose <subcommand> [options]``.

Every subcommand writes into ``--out`` through a temporary sibling directory
that is renamed into place only on success, and finishes with a
``manifest.json`` listing each artifact with its SHA-256. Nothing written
depends on wall-clock time, absolute paths or the ``--jobs`` value.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import io
import json
import logging
import os
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import align, gpr
from .config import ConfigError, dump_config, read_config
from .experiment import (
    TEST_ROTATIONS,
    BenchConfig,
    evaluate_flow,
    footprint_ious,
    make_split,
    rotation_orderings,
    run_bench,
)
from .flow import FlowField
from .metrics import iou
from .model import VariantConfig, predict, train
from .projection import SensorGeometry, flow_from_agl, render_oblique
from .rectify import rectify_height, warp_from_ground, warp_to_ground
from .scene import Category, Scene, generate_scene

logger = logging.getLogger("geopose")

SUBCOMMANDS = ("synth", "render", "encode-flow", "rectify", "train", "eval", "align", "bench")
RENDER_LAYERS = {
    "intensity": "reflectance",
    "dsm": "m",
    "dtm": "m",
    "agl": "m",
    "semantics": "category",
    "shadow": "mask",
    "occlusion": "mask",
    "footprint": "mask",
    "facade": "mask",
    "valid": "mask",
}


class CliError(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# Output plumbing
# ----------------------------------------------------------------------------

class Artifacts:
    """Collects files in a staging directory; ``commit`` moves them to ``out``."""

    def __init__(self, out: Path):
        self.out = out
        if out.exists() and (not out.is_dir() or any(out.iterdir())):
            raise CliError(f"output directory {out} exists and is not empty")
        out.parent.mkdir(parents=True, exist_ok=True)
        self.stage = Path(tempfile.mkdtemp(prefix=f".{out.name}.partial-", dir=out.parent))
        self.files: dict[str, str] = {}

    def _record(self, name: str, data: bytes) -> None:
        path = self.stage / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        self.files[name] = hashlib.sha256(data).hexdigest()

    def bytes(self, name: str, data: bytes) -> None:
        self._record(name, data)

    def json(self, name: str, obj) -> None:
        self._record(name, (json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n").encode())

    def csv(self, name: str, header, rows) -> None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
        self._record(name, buf.getvalue().encode())

    def gpr(self, name: str, array, **meta) -> None:
        self._record(name, gpr.encode(array, **meta))

    def commit(self, command: str, params: dict) -> None:
        manifest = {
            "format": "geopose-manifest",
            "version": 1,
            "command": command,
            "params": params,
            "files": dict(sorted(self.files.items())),
        }
        self.json("manifest.json", manifest)
        if self.out.exists():
            self.out.rmdir()
        os.replace(self.stage, self.out)

    def abort(self) -> None:
        shutil.rmtree(self.stage, ignore_errors=True)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


@contextlib.contextmanager
def artifacts(out: str):
    a = Artifacts(Path(out))
    try:
        yield a
    except BaseException:
        a.abort()
        raise


@contextlib.contextmanager
def mapper(jobs: int):
    if jobs <= 1:
        yield map
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            yield pool.map


# ----------------------------------------------------------------------------
# Subcommands
# ----------------------------------------------------------------------------

def _geometry(args, cfg: BenchConfig) -> SensorGeometry:
    g = cfg.test_views.sample(np.random.default_rng([args.seed, 3]))
    over = {
        "azimuth": args.azimuth,
        "off_nadir": args.off_nadir,
        "gsd": args.gsd,
        "solar_azimuth": args.solar_azimuth,
        "solar_elevation": args.solar_elevation,
    }
    d = g.to_dict()
    d.update({k: v for k, v in over.items() if v is not None})
    return SensorGeometry.from_dict(d)


def cmd_synth(args, cfg: BenchConfig) -> None:
    scene = generate_scene(args.seed, cfg.scene)
    with artifacts(args.out) as out:
        out.json("scene.json", scene.to_dict())
        out.commit("synth", {"seed": args.seed, "config": json.loads(dump_config(cfg))})


def cmd_render(args, cfg: BenchConfig) -> None:
    scene = Scene.from_dict(json.loads(Path(args.scene).read_text()))
    geom = _geometry(args, cfg)
    size = args.size or cfg.image_size
    sample = render_oblique(scene, geom, (size, size), shift=(args.shift_x, args.shift_y))
    with artifacts(args.out) as out:
        meta = {"geometry": geom.to_dict(), "scene_seed": scene.seed}
        for name, units in RENDER_LAYERS.items():
            out.gpr(f"{name}.gpr", getattr(sample, name), units=units, **meta)
        out.gpr("flow.gpr", sample.flow.magnitude, units="px",
                orientation=list(sample.flow.orientation), **meta)
        out.commit("render", {"seed": args.seed, "size": size, "shift": [args.shift_x, args.shift_y],
                              "geometry": geom.to_dict(), "scene_seed": scene.seed})


def cmd_encode_flow(args, cfg: BenchConfig) -> None:
    agl, header = gpr.read(args.agl)
    geom = SensorGeometry.from_dict(header["geometry"]) if "geometry" in header else _geometry(args, cfg)
    flow = flow_from_agl(np.maximum(agl.astype(np.float64), 0.0), geom)
    with artifacts(args.out) as out:
        out.gpr("flow.gpr", flow.magnitude, units="px", orientation=list(flow.orientation),
                geometry=geom.to_dict())
        vec = np.stack([flow.magnitude * flow.orientation[0], flow.magnitude * flow.orientation[1]])
        out.gpr("flow_vectors.gpr", vec, units="px", geometry=geom.to_dict())
        out.commit("encode-flow", {"geometry": geom.to_dict()})


def _load_flow(path) -> FlowField:
    mag, header = gpr.read(path)
    if "orientation" not in header:
        raise CliError(f"{path} has no orientation in its header")
    return FlowField(tuple(header["orientation"]), np.maximum(mag.astype(np.float64), 0.0))


def cmd_rectify(args, cfg: BenchConfig) -> None:
    base = Path(args.manifest).parent
    flow = _load_flow(args.flow)
    sem, head = gpr.read(base / "semantics.gpr")
    facade, _ = gpr.read(base / "facade.gpr")
    footprint, _ = gpr.read(base / "footprint.gpr")
    agl, _ = gpr.read(base / "agl.gpr")
    valid, _ = gpr.read(base / "valid.gpr")
    building = (sem == Category.ROOF) | (facade > 0)
    footprint = footprint > 0
    to_ground = warp_to_ground(building, flow)
    from_ground = warp_from_ground(footprint, flow)
    heights, written = rectify_height(agl.astype(np.float64), flow, valid > 0)
    report = {
        "iou_unrectified": iou(building, footprint),
        "iou_building_to_footprint": iou(to_ground, footprint),
        "iou_footprint_to_building": iou(from_ground, building),
        "holes": int((~written).sum()),
    }
    with artifacts(args.out) as out:
        meta = {"geometry": head.get("geometry")}
        out.gpr("footprint_pred.gpr", to_ground, units="mask", **meta)
        out.gpr("building_pred.gpr", from_ground, units="mask", **meta)
        out.gpr("heights.gpr", heights, units="m", **meta)
        out.gpr("heights_valid.gpr", written, units="mask", **meta)
        out.json("report.json", report)
        out.commit("rectify", {"manifest": Path(args.manifest).name, "flow": Path(args.flow).name})


def cmd_train(args, cfg: BenchConfig) -> None:
    variant = VariantConfig.from_name(args.variant)
    with mapper(args.jobs) as m:
        data = make_split(cfg, args.seed, "train", m)
    model, log = train(variant, data, cfg.schedule, cfg.model, seed=args.seed)
    with artifacts(args.out) as out:
        out.bytes("checkpoint.gpr", gpr.encode_checkpoint(model))
        cols = ("epoch", "total", "orientation", "height", "magnitude")
        out.csv("train_log.csv", cols, [[row.get(c) for c in cols] for row in log])
        out.commit("train", {"seed": args.seed, "variant": variant.name, "config": json.loads(dump_config(cfg))})


def _eval_model(model, test_set):
    return {
        "no_test_rotation": evaluate_flow(model, test_set),
        "test_rotation": evaluate_flow(model, test_set, TEST_ROTATIONS),
    }


def cmd_eval(args, cfg: BenchConfig) -> None:
    with mapper(args.jobs) as m:
        test_set = make_split(cfg, args.seed, "test", m)
    if args.gt:
        name = "gt"
        flows = [s.flow for s in test_set]
        rows = {}
        for key, angles in (("no_test_rotation", (0.0,)), ("test_rotation", TEST_ROTATIONS)):
            rows[key] = _gt_flow_errors(test_set, angles)
    else:
        if not args.checkpoint:
            raise CliError("eval needs --checkpoint or --gt")
        model = gpr.decode_checkpoint(Path(args.checkpoint).read_bytes())
        name = model.variant.name
        rows = _eval_model(model, test_set)
        flows = []
        for s in test_set:
            o = predict(model, s)
            flows.append(o.flow() if o.unit_orientation() is not None else None)
    report = {
        "variant": name,
        "flow": rows,
        "footprint_iou": footprint_ious(test_set, flows),
        "footprint_iou_min_off_nadir": footprint_ious(test_set, flows, cfg.iou_min_off_nadir),
    }
    with artifacts(args.out) as out:
        out.json("report.json", report)
        out.csv("report.csv", ("setting", "epe", "angle", "magnitude"),
                [[k, v["epe"], v["angle"], v["magnitude"]] for k, v in rows.items()])
        out.commit("eval", {"seed": args.seed, "variant": name, "config": json.loads(dump_config(cfg))})


def _gt_flow_errors(samples, angles):
    """Scores the reference flow against itself under the same rotation protocol."""
    from .flow import rotate_sample
    from .metrics import angle_error, epe, magnitude_error

    e, a, mg = [], [], []
    for s in samples:
        for ang in angles:
            r = rotate_sample(s, ang)
            e.append(epe(r.flow, r.flow, r.valid))
            mg.append(magnitude_error(r.flow, r.flow, r.valid))
            v = angle_error(r.flow.orientation, r.flow.orientation, r.flow.magnitude[r.valid])
            if v is not None:
                a.append(v)
    return {"epe": float(np.mean(e)), "angle": float(np.mean(a)) if a else None,
            "magnitude": float(np.mean(mg)), "images": len(e)}


def cmd_align(args, cfg: BenchConfig) -> None:
    fixed, _ = gpr.read(args.fixed)
    moving, _ = gpr.read(args.moving)
    fv = gpr.read(args.fixed_valid)[0] > 0 if args.fixed_valid else None
    mv = gpr.read(args.moving_valid)[0] > 0 if args.moving_valid else None
    t = align.register(fixed.astype(np.float64), moving.astype(np.float64), fv, mv,
                       search=args.search or cfg.align_search, min_overlap=cfg.align_min_overlap,
                       affine=args.affine)
    result = {"transform": t.to_dict()}
    if args.annotation and args.reference:
        annot = gpr.read(args.annotation)[0] > 0
        ref = gpr.read(args.reference)[0] > 0
        before = align.alignment_report([(annot, ref)])
        after = align.alignment_report([(align.apply_transform(annot, t), ref)])
        result["report"] = {"unaligned": before.to_dict(), "aligned": after.to_dict()}
    with artifacts(args.out) as out:
        out.json("transform.json", result)
        if "report" in result:
            out.gpr("annotation_aligned.gpr", align.apply_transform(gpr.read(args.annotation)[0] > 0, t),
                    units="mask")
        out.commit("align", {"affine": bool(args.affine), "search": args.search or cfg.align_search})


def cmd_bench(args, cfg: BenchConfig) -> None:
    from dataclasses import replace

    cfg = replace(cfg, seeds=tuple(args.seed + s for s in cfg.seeds))
    with mapper(args.jobs) as m:
        report = run_bench(cfg, m)
    report["orderings"] = rotation_orderings(report) if set(cfg.variants) >= {"flow", "flow-h", "flow-a", "flow-ha"} else {}
    with artifacts(args.out) as out:
        out.json("report.json", report)
        for key, fname in (("no_test_rotation", "flow_errors.csv"), ("test_rotation", "flow_errors_rotated.csv")):
            rows = []
            for seed_row in report["per_seed"]:
                for name, r in seed_row[key].items():
                    cats = r["per_category"]
                    rows.append([seed_row["seed"], name, r["epe"], r["angle"], r["magnitude"]]
                                + [cats.get(c) for c in _CATS])
            out.csv(fname, ["seed", "variant", "epe", "angle", "magnitude"] + list(_CATS), rows)
        rows = []
        for seed_row in report["per_seed"]:
            for name, r in seed_row["footprint_iou"].items():
                rows.append([seed_row["seed"], name, r["unrectified"], r["to_ground"], r["from_ground"], r["samples"]])
        out.csv("footprint_iou.csv", ["seed", "flow", "unrectified", "building_to_footprint",
                                      "footprint_to_building", "samples"], rows)
        rows = []
        for seed_row in report["per_seed"]:
            for name, r in seed_row["alignment"].items():
                rows.append([seed_row["seed"], name, r["mean_iou"], r["fraction_iou_gt_0.5"], r["pairs"]])
        out.csv("alignment.csv", ["seed", "method", "mean_iou", "fraction_iou_gt_0.5", "pairs"], rows)
        out.commit("bench", {"seeds": list(cfg.seeds), "config": json.loads(dump_config(cfg))})


_CATS = ("ground", "vegetation", "roof", "water", "elevated_road", "facade", "shadow")

HANDLERS = {
    "synth": cmd_synth,
    "render": cmd_render,
    "encode-flow": cmd_encode_flow,
    "rectify": cmd_rectify,
    "train": cmd_train,
    "eval": cmd_eval,
    "align": cmd_align,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (strict, versioned)")
    common.add_argument("--seed", type=int, default=0, help="base random seed")
    common.add_argument("--out", help="output directory (must be absent or empty)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("--print-config", action="store_true", help="print the effective config and exit")

    parser = argparse.ArgumentParser(prog="geopose", description="Geocentric pose toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a procedural scene")

    p = sub.add_parser("render", parents=[common], help="render all layers of a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--size", type=int)
    p.add_argument("--shift-x", type=int, default=0)
    p.add_argument("--shift-y", type=int, default=0)
    for name in ("azimuth", "off-nadir", "gsd", "solar-azimuth", "solar-elevation"):
        p.add_argument(f"--{name}", type=float)

    p = sub.add_parser("encode-flow", parents=[common], help="flow field from an AGL raster")
    p.add_argument("--agl", required=True)
    for name in ("azimuth", "off-nadir", "gsd", "solar-azimuth", "solar-elevation"):
        p.add_argument(f"--{name}", type=float)

    p = sub.add_parser("rectify", parents=[common], help="warp masks and heights with a flow")
    p.add_argument("--manifest", required=True, help="manifest.json of a render output")
    p.add_argument("--flow", required=True, help="flow GPR (magnitude with orientation header)")

    p = sub.add_parser("train", parents=[common], help="train one model variant")
    p.add_argument("--variant", default="flow-ha", choices=[v.name for v in _variants()])

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint or the reference flow")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--checkpoint")
    g.add_argument("--gt", action="store_true", help="score reference flow as the prediction")

    p = sub.add_parser("align", parents=[common], help="register two rectified height rasters")
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--fixed-valid")
    p.add_argument("--moving-valid")
    p.add_argument("--search", type=int)
    p.add_argument("--affine", action="store_true")
    p.add_argument("--annotation", help="moving-frame mask to carry over")
    p.add_argument("--reference", help="fixed-frame mask to score against")

    sub.add_parser("bench", parents=[common], help="full synthetic benchmark")
    return parser


def _variants():
    from .model import VARIANTS

    return VARIANTS


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("GEOPOSE_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    args = build_parser().parse_args(argv)
    try:
        cfg = read_config(args.config)
        if args.print_config:
            sys.stdout.write(dump_config(cfg))
            return 0
        if not args.out:
            raise CliError("--out is required")
        if args.jobs < 1:
            raise CliError("--jobs must be at least 1")
        HANDLERS[args.command](args, cfg)
    except (CliError, ConfigError, gpr.FormatError, align.InsufficientOverlapError, FileNotFoundError) as exc:
        logger.error("%s", exc)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())

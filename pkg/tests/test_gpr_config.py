import json
import struct

import numpy as np
import pytest

from geopose import gpr
from geopose.config import ConfigError, dump_config, load_config, read_config
from geopose.experiment import BenchConfig
from geopose.model import ModelConfig, VariantConfig, forward, init_model


def test_raster_round_trip_float_and_mask(rng):
    a = rng.normal(size=(5, 7)).astype(np.float32)
    back, header = gpr.decode(gpr.encode(a, units="m", orientation=[0.6, 0.8]))
    assert back.dtype == np.dtype("<f4") and np.array_equal(back, a)
    assert header == {"shape": [5, 7], "dtype": "float32", "units": "m", "orientation": [0.6, 0.8]}
    m = rng.uniform(size=(3, 4)) > 0.5
    back, header = gpr.decode(gpr.encode(m))
    assert header["dtype"] == "uint8" and np.array_equal(back.astype(bool), m)


def test_layout_is_documented_bytes():
    blob = gpr.encode(np.array([[1.0, 2.0]]), units="px")
    assert blob[:4] == b"GPR1"
    (n,) = struct.unpack("<I", blob[4:8])
    assert json.loads(blob[8:8 + n]) == {"dtype": "float32", "shape": [1, 2], "units": "px"}
    assert blob[8 + n:] == np.array([1.0, 2.0], dtype="<f4").tobytes()
    # the header has no whitespace and sorted keys, so encoding is canonical
    assert b" " not in blob[8:8 + n]
    assert gpr.encode(np.zeros(3), b=1, a=2) == gpr.encode(np.zeros(3), a=2, b=1)


def test_file_round_trip(tmp_path, rng):
    a = rng.uniform(size=(4, 4))
    gpr.write(tmp_path / "x.gpr", a, units="m")
    back, _ = gpr.read(tmp_path / "x.gpr")
    assert np.array_equal(back, a.astype(np.float32))


@pytest.mark.parametrize("blob", [
    b"",
    b"NOPE\x00\x00\x00\x00",
    b"GPR1" + struct.pack("<I", 3) + b"{x}",
    b"GPR1" + struct.pack("<I", 2) + b"{}",
])
def test_malformed_blobs_raise_format_error(blob):
    with pytest.raises(gpr.FormatError):
        gpr.decode(blob)


def test_truncated_payload_raises():
    blob = gpr.encode(np.zeros((3, 3)))
    with pytest.raises(gpr.FormatError):
        gpr.decode(blob[:-1])
    with pytest.raises(gpr.FormatError):
        gpr.decode(blob + b"\x00")


def test_non_finite_metadata_rejected():
    with pytest.raises(ValueError):
        gpr.encode(np.zeros(2), scale=float("nan"))


@pytest.mark.parametrize("name", ["flow", "flow-h", "flow-a", "flow-ha"])
def test_checkpoint_round_trip(name, rng):
    model = init_model(ModelConfig(), VariantConfig.from_name(name), seed=3)
    blob = gpr.encode_checkpoint(model)
    back = gpr.decode_checkpoint(blob)
    assert back.variant == model.variant and back.config == model.config
    for k, v in model.params.items():
        assert np.array_equal(back.params[k], v.astype(np.float32).astype(np.float64))
    assert gpr.encode_checkpoint(back) == blob
    img = rng.uniform(size=(24, 24))
    assert np.allclose(forward(back, img).magnitude, forward(model, img).magnitude, atol=1e-4)


def test_raster_is_not_a_checkpoint():
    with pytest.raises(gpr.FormatError):
        gpr.decode_checkpoint(gpr.encode(np.zeros(4)))


def test_default_config_round_trip():
    cfg = load_config(None)
    assert cfg == BenchConfig()
    assert load_config(json.loads(dump_config(cfg))) == cfg
    assert load_config({"version": 1}) == cfg


def test_partial_config_overrides(tmp_path):
    doc = {"version": 1, "image_size": 64, "schedule": {"epochs": 3}, "seeds": [5]}
    p = tmp_path / "c.json"
    p.write_text(json.dumps(doc))
    cfg = read_config(p)
    assert cfg.image_size == 64 and cfg.schedule.epochs == 3 and cfg.seeds == (5,)
    assert cfg.schedule.batch_size == BenchConfig().schedule.batch_size


@pytest.mark.parametrize("doc", [
    {"version": 2},
    {},
    {"version": 1, "bogus": 1},
    {"version": 1, "schedule": {"epochs": 3, "extra": True}},
    {"version": 1, "image_size": "big"},
    {"version": 1, "image_size": True},
    {"version": 1, "seeds": 3},
    {"version": 1, "variants": ["flow-x"]},
    {"version": 1, "image_size": 2},
])
def test_strict_config_rejections(doc):
    with pytest.raises(ConfigError):
        load_config(doc)


def test_invalid_json_file(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        read_config(p)

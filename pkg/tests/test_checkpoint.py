import numpy as np
import pytest

from gaitqat import tensor as tn
from gaitqat.checkpoint import (MAGIC, canonical_json, config_hash, load_lowered, load_model, read_container,
                                save_lowered, save_model, write_container)
from gaitqat.errors import ConfigError, UsageError
from gaitqat.gaitnet import GaitNet, ModelSpec, QuantPolicy
from gaitqat.intinfer import lower
from gaitqat.synthdata import stack_frames


@pytest.fixture(scope="module")
def w4(small_split):
    m = GaitNet(ModelSpec(n_classes=8, quant=QuantPolicy(4, 4)), seed=1)
    m(stack_frames(small_split.train[:8]))  # initialise steps
    return m.eval()


def test_container_roundtrip(tmp_path):
    arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array(1.5), "c": np.zeros((0, 4))}
    write_container(tmp_path / "x.qg", {"z": 1, "a": [1, 2]}, arrays)
    meta, back = read_container(tmp_path / "x.qg")
    assert meta == {"a": [1, 2], "z": 1}
    assert all(np.array_equal(arrays[k], back[k]) and arrays[k].shape == back[k].shape for k in arrays)
    assert (tmp_path / "x.qg").read_bytes().startswith(MAGIC)


def test_config_hash_ignores_key_order():
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
    assert canonical_json({"b": 1, "a": 2}) == '{"a":2,"b":1}'


def test_model_roundtrip_exact(w4, small_split, tmp_path):
    save_model(w4, tmp_path / "m.qg", {"seed": 1, "config_hash": "x"})
    back, meta = load_model(tmp_path / "m.qg")
    assert meta["provenance"] == {"seed": 1, "config_hash": "x"}
    assert back.spec == w4.spec
    x = stack_frames(small_split.probe[:4])
    with tn.no_grad():
        assert np.array_equal(back.embed(x).data, w4.embed(x).data)
    assert back.quant_configs() == w4.quant_configs()


def test_save_is_byte_stable(w4, tmp_path):
    save_model(w4, tmp_path / "a.qg", {"seed": 1})
    save_model(w4, tmp_path / "b.qg", {"seed": 1})
    assert (tmp_path / "a.qg").read_bytes() == (tmp_path / "b.qg").read_bytes()


def test_lowered_roundtrip_bit_exact(w4, tmp_path):
    layers = lower(w4)
    save_lowered(layers, w4.spec, tmp_path / "l.qg")
    back, spec, meta = load_lowered(tmp_path / "l.qg")
    assert spec == w4.spec and "int_lowered" in meta
    for a, b in zip(layers, back):
        assert np.array_equal(a.weight, b.weight) and b.weight.dtype == np.int64
        assert (a.v_w, a.v_a, a.r1, a.r2, a.a_r1, a.a_r2) == (b.v_w, b.v_a, b.r1, b.r2, b.a_r1, b.a_r2)
        assert (a.bias is None and b.bias is None) or np.array_equal(a.bias, b.bias)
    with pytest.raises(ConfigError):
        load_model(tmp_path / "l.qg")


@pytest.mark.parametrize("damage", ["magic", "truncate", "trailing", "meta"])
def test_corruption_detected(w4, tmp_path, damage):
    path = save_model(w4, tmp_path / "m.qg")
    raw = bytearray(path.read_bytes())
    if damage == "magic":
        raw[0] ^= 0xFF
    elif damage == "truncate":
        raw = raw[:-9]
    elif damage == "trailing":
        raw += b"\x00"
    else:
        raw[len(MAGIC) + 8] = ord("]")
    path.write_bytes(bytes(raw))
    with pytest.raises(ConfigError):
        read_container(path)


def test_missing_file(tmp_path):
    with pytest.raises(UsageError):
        read_container(tmp_path / "nope.qg")
    with pytest.raises(ConfigError):
        load_lowered(write_container(tmp_path / "e.qg", {}, {}))

"""Single-file checkpoint container.

Layout (all integers little-endian)::

    b"QGKT1\\n"
    uint64  length of the metadata block
    bytes   metadata, UTF-8 JSON with sorted keys
    uint32  number of arrays
    per array, in declaration order:
        uint16  name length, then the UTF-8 name
        uint8   ndim, then ndim x uint64 dims
        float64 values, C order

Metadata holds the model spec, the quantizer configs (bits, range, learned
step, gradient mode), the training provenance (config hash, seed, stage) and,
for lowered models, an ``int_lowered`` section describing each integer layer.
Integer arrays are stored as doubles; every value involved is far below 2**53,
so the round trip is exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, UsageError

MAGIC = b"QGKT1\n"
INT_SECTION = "int_lowered"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def write_container(path, metadata: dict, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    meta = canonical_json(metadata).encode()
    parts = [MAGIC, struct.pack("<Q", len(meta)), meta, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode()
        a = np.asarray(arr, dtype="<f8")  # tobytes below is C order; ascontiguousarray would promote 0-d
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes())
    path.write_bytes(b"".join(parts))
    return path


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    if not buf.startswith(MAGIC):
        raise ConfigError(f"{path} is not a QGKT1 container")
    try:
        pos = len(MAGIC)
        (n,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        metadata = json.loads(buf[pos:pos + n].decode())
        pos += n
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + ln].decode()
            pos += ln
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
            pos += 8 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * size > len(buf):
                raise ConfigError(f"{path}: array {name!r} is truncated")
            arrays[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
            pos += 8 * size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: corrupt container ({exc})") from None
    if pos != len(buf):
        raise ConfigError(f"{path}: {len(buf) - pos} trailing bytes")
    return metadata, arrays


# ---------------------------------------------------------------------------
# models


def save_model(model, path, provenance: dict | None = None) -> Path:
    quant = {}
    for layer in model.layers:
        quant[layer.name] = {
            "weight": layer.weight_quantizer.config().to_dict() if layer.weight_quantizer else None,
            "act": layer.act_quantizer.config().to_dict() if layer.act_quantizer else None,
        }
    meta = {"format": "gaitqat-checkpoint/1", "spec": model.spec.to_dict(), "quant": quant,
            "provenance": dict(provenance or {})}
    return write_container(path, meta, model.state_arrays())


def load_model(path):
    from .gaitnet import GaitNet, ModelSpec
    from .quant import QuantConfig

    meta, arrays = read_container(path)
    if meta.get("format") != "gaitqat-checkpoint/1":
        raise ConfigError(f"{path} is not a model checkpoint")
    model = GaitNet(ModelSpec.from_dict(meta["spec"]), seed=0)
    model.load_state_arrays(arrays)
    configs = {}
    for name, q in meta["quant"].items():
        if q["weight"] is None:
            continue
        configs[name] = (QuantConfig.from_dict(q["weight"]), QuantConfig.from_dict(q["act"]))
    model.load_quant_configs(configs)
    model.eval()
    return model, meta


def save_lowered(layers, spec, path, provenance: dict | None = None) -> Path:
    section, arrays = [], {}
    for l in layers:
        section.append({"name": l.name, "kind": l.kind, "r1": l.r1, "r2": l.r2, "v_w": l.v_w, "v_a": l.v_a,
                        "a_r1": l.a_r1, "a_r2": l.a_r2, "padding": l.padding, "acc_bits": l.acc_bits,
                        "has_bias": l.bias is not None})
        arrays[f"{INT_SECTION}/{l.name}.weight"] = l.weight
        if l.bias is not None:
            arrays[f"{INT_SECTION}/{l.name}.bias"] = l.bias
    meta = {"format": "gaitqat-lowered/1", "spec": spec.to_dict(), INT_SECTION: section,
            "provenance": dict(provenance or {})}
    return write_container(path, meta, arrays)


def load_lowered(path):
    from .gaitnet import ModelSpec
    from .intinfer import IntLayer

    meta, arrays = read_container(path)
    if INT_SECTION not in meta:
        raise ConfigError(f"{path} has no {INT_SECTION} section")
    layers = []
    for d in meta[INT_SECTION]:
        w = arrays[f"{INT_SECTION}/{d['name']}.weight"].astype(np.int64)
        b = arrays[f"{INT_SECTION}/{d['name']}.bias"].astype(np.int64) if d["has_bias"] else None
        layers.append(IntLayer(d["name"], d["kind"], w, d["r1"], d["r2"], d["v_w"], d["v_a"], d["a_r1"], d["a_r2"],
                               b, d["padding"], d["acc_bits"]))
    return layers, ModelSpec.from_dict(meta["spec"]), meta

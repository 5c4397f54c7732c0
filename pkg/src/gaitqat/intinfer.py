"""Integer inference for a fully quantized :class:`~gaitqat.gaitnet.GaitNet`.

Lowering turns every layer into integer weights plus its two step sizes. The
forward pass quantizes each layer input to integer levels, accumulates in
int64 and rescales by ``v_w * v_a``. Max pooling and ReLU commute with a
positive rescale, so both run directly on the integer accumulators; floats
appear only where the float model has them too (the strip mean of horizontal
pooling and the rescale before the next activation quantizer).

The first conv reads binary silhouettes, which are already integer levels, so
it is lowered with ``v_a = 1``, the same grid its bias uses in the
fake-quantized model.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, LoweringError, NumericError
from .metrics import layer_bitops, model_layer_costs
from .quant import QuantConfig, quantize_levels, round_half_away

ACC_BITS = 64
BIAS_LIMIT = 2 ** 31


@dataclass
class IntLayer:
    name: str
    kind: str               # "conv" or "linear"
    weight: np.ndarray      # int64 levels; conv (C_out, C_in, F, F), linear (p, c_in, c_out)
    r1: int
    r2: int
    v_w: float
    v_a: float
    a_r1: int
    a_r2: int
    bias: np.ndarray | None = None   # int64 on the v_w * v_a grid
    padding: int = 0
    acc_bits: int = ACC_BITS

    def __post_init__(self):
        if not (self.v_w > 0 and self.v_a > 0):
            raise LoweringError(f"{self.name}: scales must be positive")
        if self.weight.min(initial=0) < self.r1 or self.weight.max(initial=0) > self.r2:
            raise LoweringError(f"{self.name}: weights outside [{self.r1}, {self.r2}]")
        if self.acc_bits < 32:
            raise LoweringError("accumulator must be at least 32 bits wide")

    @property
    def bits(self) -> int:
        return int(self.r2 - self.r1 + 1).bit_length() - 1

    def quantize_input(self, x: np.ndarray) -> np.ndarray:
        return round_half_away(np.clip(x / self.v_a, self.a_r1, self.a_r2)).astype(np.int64)

    def check_accumulator(self, x_int: np.ndarray) -> None:
        """Raise when the worst-case accumulator for this input could overflow."""
        xmax = int(np.abs(x_int).max(initial=0))
        w = np.abs(self.weight)
        fan = w.reshape(w.shape[0], -1).sum(1) if self.kind == "conv" else w.sum(1)
        bound = xmax * int(fan.max(initial=0))
        if self.bias is not None:
            bound += int(np.abs(self.bias).max(initial=0))
        if bound >= 2 ** (self.acc_bits - 1):
            raise NumericError(f"{self.name}: accumulator bound {bound} exceeds {self.acc_bits}-bit range")


def dequantize(layer: IntLayer) -> np.ndarray:
    return layer.weight.astype(np.float64) * layer.v_w


def _act_bounds(cfg: QuantConfig | None) -> tuple[float, int, int]:
    if cfg is None or cfg.full_precision:
        return 1.0, 0, 1  # binary silhouettes
    return float(cfg.step), cfg.r1, cfg.r2


def lower(model) -> list[IntLayer]:
    """Integer layers (conv1, conv2, heads, classifier) of a fully quantized model."""
    out = []
    for layer in model.layers:
        wq, aq = layer.weight_quantizer, layer.act_quantizer
        if wq is None or wq.full_precision:
            raise LoweringError(f"{layer.name} has a full-precision weight; nothing to lower")
        if layer.name != "conv1" and (aq is None or aq.full_precision):
            raise LoweringError(f"{layer.name} has a full-precision input")
        if not wq.initialized or (aq is not None and not aq.full_precision and not aq.initialized):
            raise LoweringError(f"{layer.name}: quantizer steps are not initialised (run a forward pass)")
        wcfg = wq.config()
        v_a, a_r1, a_r2 = _act_bounds(aq.config() if aq is not None else None)
        w_int = quantize_levels(layer.weight.data, wcfg).astype(np.int64)
        bias, kind, pad = None, "linear", 0
        if hasattr(layer, "bias"):
            kind, pad = "conv", layer.padding
            grid = float(wcfg.step) * v_a
            bias = np.clip(round_half_away(layer.bias.data / grid), -BIAS_LIMIT, BIAS_LIMIT - 1).astype(np.int64)
        out.append(IntLayer(layer.name, kind, w_int, wcfg.r1, wcfg.r2, float(wcfg.step), v_a, a_r1, a_r2,
                            bias, pad))
    return out


def _int_conv(x: np.ndarray, layer: IntLayer) -> np.ndarray:
    """(N, H, W, C) int64 -> (N, H, W, C_out) int64 accumulators, stride 1."""
    n, h, w, c = x.shape
    co, ci, f, _ = layer.weight.shape
    if c != ci:
        raise DimensionError(f"{layer.name}: expected {ci} input channels, got {c}")
    p = layer.padding
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    ho, wo = h + 2 * p - f + 1, w + 2 * p - f + 1
    wk = layer.weight.transpose(2, 3, 1, 0)  # (F, F, C, Co)
    acc = np.zeros((n * ho * wo, co), dtype=np.int64)
    for i in range(f):
        for j in range(f):
            acc += xp[:, i:i + ho, j:j + wo, :].reshape(-1, c) @ wk[i, j]
    acc = acc.reshape(n, ho, wo, co)
    if layer.bias is not None:
        acc += layer.bias
    return acc


def _pool2_relu(acc: np.ndarray) -> np.ndarray:
    n, h, w, c = acc.shape
    v = acc.reshape(n, h // 2, 2, w // 2, 2, c)
    return np.maximum(v.max(axis=(2, 4)), 0)


def _conv_stage(x: np.ndarray, layer: IntLayer) -> np.ndarray:
    """Quantize float input, integer conv + pool + relu, return rescaled float output."""
    xi = layer.quantize_input(x)
    layer.check_accumulator(xi)
    return _pool2_relu(_int_conv(xi, layer)).astype(np.float64) * (layer.v_w * layer.v_a)


def _linear_stage(x: np.ndarray, layer: IntLayer) -> np.ndarray:
    """(B, p, c_in) float -> (B, p, c_out) float through integer part-wise matmul."""
    xi = layer.quantize_input(x)
    layer.check_accumulator(xi)
    acc = np.einsum("bpi,pio->bpo", xi, layer.weight)
    return acc.astype(np.float64) * (layer.v_w * layer.v_a)


def _pool(features: np.ndarray, n_parts: int) -> np.ndarray:
    # features (B, T, H, W, C) -> set max over T, strips max + mean -> (B, p, C)
    f = features.max(axis=1)
    b, h, w, c = f.shape
    strips = f.reshape(b, n_parts, (h // n_parts) * w, c)
    return strips.max(axis=2) + strips.mean(axis=2)


def _by_name(layers: list[IntLayer]) -> dict[str, IntLayer]:
    named = {l.name: l for l in layers}
    missing = {"conv1", "conv2", "heads"} - set(named)
    if missing:
        raise LoweringError(f"lowered model lacks {sorted(missing)}")
    return named


def int_forward(layers: list[IntLayer], frames, n_parts: int) -> np.ndarray:
    """Embeddings ``(batch, p, dim)`` of binary ``frames`` ``(batch, T, 1, H, W)``."""
    x = np.asarray(frames)
    if x.ndim != 5 or x.shape[2] != 1:
        raise DimensionError(f"expected (batch, T, 1, H, W) frames, got {x.shape}")
    if not np.isin(x, (0, 1)).all():
        raise DimensionError("integer inference expects binary silhouettes")
    named = _by_name(layers)
    b, t, _, h, w = x.shape
    y = x.reshape(b * t, h, w, 1).astype(np.float64)
    y = _conv_stage(y, named["conv1"])
    y = _conv_stage(y, named["conv2"])
    pooled = _pool(y.reshape(b, t, *y.shape[1:]), n_parts)
    return _linear_stage(pooled, named["heads"])


def embed_batched(layers: list[IntLayer], frames, n_parts: int, batch: int = 16) -> np.ndarray:
    return np.concatenate([int_forward(layers, frames[i:i + batch], n_parts)
                           for i in range(0, len(frames), batch)])


def int_retrieval(layers: list[IntLayer], split, n_parts: int) -> dict:
    from .metrics import retrieval_report
    from .synthdata import labels_of, stack_frames

    g = embed_batched(layers, stack_frames(split.gallery), n_parts)
    p = embed_batched(layers, stack_frames(split.probe), n_parts)
    return retrieval_report(p, labels_of(split.probe), g, labels_of(split.gallery))


# ---------------------------------------------------------------------------
# timing


@dataclass
class TimingRow:
    layer: str
    bits: int
    seconds_per_sample: float
    bitops: float


def timing_report(layers: list[IntLayer], model, frames, repetitions: int = 10) -> list[TimingRow]:
    """Median per-sample wall-clock time per lowered layer, next to its BitOPs count.

    Timings are informational; the BitOPs column uses the shared accounting
    formula with the frame count of ``frames``.
    """
    if repetitions < 10:
        raise NumericError("timing needs at least 10 repetitions")
    frames = np.asarray(frames)
    b, t = frames.shape[:2]
    named = _by_name(layers)
    costs = {c.name: c for c in model_layer_costs(model, frames=t)}
    # inputs for each stage
    x1 = frames.reshape(b * t, *frames.shape[3:], 1).astype(np.float64)
    x2 = _conv_stage(x1, named["conv1"])
    y2 = _conv_stage(x2, named["conv2"])
    pooled = _pool(y2.reshape(b, t, *y2.shape[1:]), model.spec.n_parts)
    emb = _linear_stage(pooled, named["heads"])
    stages = {"conv1": (_conv_stage, x1), "conv2": (_conv_stage, x2), "heads": (_linear_stage, pooled),
              "classifier": (_linear_stage, emb)}
    rows = []
    for layer in layers:
        fn, inp = stages[layer.name]
        times = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            fn(inp, layer)
            times.append(time.perf_counter() - t0)
        rows.append(TimingRow(layer.name, layer.bits, float(np.median(times)) / b, layer_bitops(costs[layer.name])))
    return rows


def write_timing_csv(rows: list[TimingRow], path, provenance: str | None = None) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        if provenance:
            fh.write(f"# {provenance}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "bits", "seconds_per_sample", "bitops"])
        for r in rows:
            w.writerow([r.layer, r.bits, f"{r.seconds_per_sample:.9f}", repr(r.bitops)])
    return path

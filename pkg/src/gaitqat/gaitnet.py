"""Toy part-based gait embedding network.

The model is the composition ``heads o pool o backbone``:

* backbone: frame-wise conv(1->8, 3x3) -> relu -> maxpool2 -> conv(8->16, 3x3)
  -> relu -> maxpool2, weights shared across frames;
* pool: max over frames (set pooling), then ``p`` horizontal strips each reduced
  to max + mean;
* heads: one bias-free linear map per strip, giving embeddings ``(batch, p, dim)``.

A BNNeck (batch norm + bias-free per-part classifier) turns embeddings into
logits. Every conv / linear layer can carry a weight quantizer and an input
activation quantizer. The first conv sees binary silhouettes, which are exact
at any bit width, so its activation quantizer is always full precision.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as tn
from .errors import ConfigError, DimensionError, UsageError
from .quant import FULL_PRECISION, STE, QuantConfig, Quantizer, attach_quantizer, round_half_away
from .tensor import Tensor, custom_op

LAYER_NAMES = ("conv1", "conv2", "heads", "classifier")


@dataclass
class QuantPolicy:
    """Bit widths for every quantized layer; ``None`` means full precision."""

    weight_bits: int | None = FULL_PRECISION
    act_bits: int | None = FULL_PRECISION
    grad_mode: str = STE
    k: float = 1.0
    soft_forward: bool = False
    boundary_bits: int | None = None  # if set, conv1 and classifier use this width instead

    def layer_configs(self) -> dict[str, tuple[QuantConfig, QuantConfig]]:
        out = {}
        for name in LAYER_NAMES:
            wb, ab = self.weight_bits, self.act_bits
            if self.boundary_bits is not None and name in ("conv1", "classifier") and wb is not None:
                wb, ab = self.boundary_bits, self.boundary_bits
            if name == "conv1":
                ab = FULL_PRECISION
            signed_act = name == "classifier"
            common = dict(grad_mode=self.grad_mode, k=self.k, soft_forward=self.soft_forward)
            out[name] = (QuantConfig(bits=wb, signed=True, **common),
                         QuantConfig(bits=ab, signed=signed_act, **common))
        return out

    @property
    def label(self) -> str:
        if self.weight_bits is None and self.act_bits is None:
            return "fp"
        return f"w{self.weight_bits or 32}a{self.act_bits or 32}"


@dataclass
class ModelSpec:
    channels: tuple[int, ...] = (8, 16)
    n_parts: int = 4
    dim: int = 32
    n_classes: int = 16
    height: int = 32
    width: int = 24
    quant: QuantPolicy = field(default_factory=QuantPolicy)

    def validate(self) -> None:
        if len(self.channels) != 2:
            raise ConfigError("the backbone has exactly two conv layers")
        if self.height % 4 or self.width % 4:
            raise ConfigError("input height and width must be divisible by 4")
        if (self.height // 4) % self.n_parts:
            raise ConfigError(f"n_parts={self.n_parts} must divide feature height {self.height // 4}")

    @property
    def feature_hw(self) -> tuple[int, int]:
        return self.height // 4, self.width // 4

    def to_dict(self) -> dict:
        return {
            "channels": list(self.channels), "n_parts": self.n_parts, "dim": self.dim,
            "n_classes": self.n_classes, "height": self.height, "width": self.width,
            "quant": {
                "weight_bits": self.quant.weight_bits, "act_bits": self.quant.act_bits,
                "grad_mode": self.quant.grad_mode, "k": self.quant.k,
                "soft_forward": self.quant.soft_forward, "boundary_bits": self.quant.boundary_bits,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> ModelSpec:
        return cls(channels=tuple(d["channels"]), n_parts=d["n_parts"], dim=d["dim"],
                   n_classes=d["n_classes"], height=d["height"], width=d["width"],
                   quant=QuantPolicy(**d["quant"]))


def _quantize_bias(bias: Tensor, step: float) -> Tensor:
    # int32 bias on the accumulator grid; gradient passes straight through
    lim = 2.0 ** 31

    def fwd(b):
        return np.clip(round_half_away(b / step), -lim, lim - 1) * step

    return custom_op((bias,), fwd, lambda g, b: (g,), op="bias_quant")


class QuantLayer:
    """Base for layers that can carry a weight and an input-activation quantizer."""

    def __init__(self, name: str):
        self.name = name
        self.weight_quantizer: Quantizer | None = None
        self.act_quantizer: Quantizer | None = None

    def quantized_weight(self) -> Tensor:
        wq = self.weight_quantizer
        return self.weight if wq is None else wq(self.weight)

    def quantized_input(self, x: Tensor) -> Tensor:
        aq = self.act_quantizer
        return x if aq is None else aq(x)

    def input_step(self) -> float:
        aq = self.act_quantizer
        return 1.0 if aq is None or aq.full_precision else float(aq.v.data)

    @property
    def is_quantized(self) -> bool:
        return self.weight_quantizer is not None and not self.weight_quantizer.full_precision

    def quantizers(self) -> list[Quantizer]:
        return [q for q in (self.weight_quantizer, self.act_quantizer) if q is not None]


class Conv2d(QuantLayer):
    """3x3 conv with bias on channels-last (N, H, W, C) input; weight is (C_out, C_in, F, F)."""

    def __init__(self, name: str, c_in: int, c_out: int, f: int, rng: np.random.Generator, padding: int = 1):
        super().__init__(name)
        std = math.sqrt(2.0 / (c_in * f * f))
        self.weight = Tensor(rng.normal(0.0, std, (c_out, c_in, f, f)), requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(c_out), requires_grad=True, name=f"{name}.bias")
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        xq = self.quantized_input(x)
        w = self.quantized_weight()
        b = self.bias
        if self.is_quantized:
            b = _quantize_bias(b, float(self.weight_quantizer.v.data) * self.input_step())
        return tn.conv2d_nhwc(xq, w, b, padding=self.padding)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class PartLinear(QuantLayer):
    """``p`` independent bias-free linear maps applied to (batch, p, c_in) input."""

    def __init__(self, name: str, parts: int, c_in: int, c_out: int, rng: np.random.Generator, std: float):
        super().__init__(name)
        self.weight = Tensor(rng.normal(0.0, std, (parts, c_in, c_out)), requires_grad=True, name=f"{name}.weight")

    def __call__(self, x: Tensor) -> Tensor:
        xq = self.quantized_input(x)
        w = self.quantized_weight()
        return tn.matmul(xq.transpose(1, 0, 2), w).transpose(1, 0, 2)

    def parameters(self) -> list[Tensor]:
        return [self.weight]


class BatchNormParts:
    def __init__(self, name: str, shape: tuple[int, ...]):
        self.name = name
        self.gamma = Tensor(np.ones(shape), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(shape), requires_grad=True, name=f"{name}.beta")
        self.running_mean = np.zeros(shape)
        self.running_var = np.ones(shape)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return tn.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, training)

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]


def set_pool(features: Tensor) -> Tensor:
    """Max over the frame axis: (batch, T, C, H, W) -> (batch, C, H, W)."""
    if features.ndim != 5 or features.shape[1] < 1:
        raise DimensionError("set_pool expects (batch, T, C, H, W) with T >= 1")
    return tn.max_over_axis(features, 1)


def horizontal_pool(features: Tensor, p: int) -> Tensor:
    """Split the height into ``p`` strips; each strip gives max + mean: -> (batch, p, C)."""
    b, c, h, w = features.shape
    if h % p:
        raise ConfigError(f"{p} parts do not divide feature height {h}")
    strips = features.reshape(b, c, p, (h // p) * w)
    pooled = tn.max_over_axis(strips, 3) + tn.mean(strips, 3)
    return pooled.transpose(0, 2, 1)


class GaitNet:
    def __init__(self, spec: ModelSpec | None = None, seed: int = 0, attach: bool = True):
        spec = spec or ModelSpec()
        spec.validate()
        self.spec = spec
        rng = np.random.default_rng(seed)
        c1, c2 = spec.channels
        self.conv1 = Conv2d("conv1", 1, c1, 3, rng)
        self.conv2 = Conv2d("conv2", c1, c2, 3, rng)
        self.heads = PartLinear("heads", spec.n_parts, c2, spec.dim, rng, std=math.sqrt(1.0 / c2))
        self.bnneck = BatchNormParts("bnneck", (spec.n_parts, spec.dim))
        self.classifier = PartLinear("classifier", spec.n_parts, spec.dim, spec.n_classes, rng, std=0.01)
        self.training = True
        if attach:
            for name, (wcfg, acfg) in spec.quant.layer_configs().items():
                attach_quantizer(getattr(self, name), wcfg, acfg)

    # -- structure -------------------------------------------------------

    @property
    def layers(self) -> list[QuantLayer]:
        return [self.conv1, self.conv2, self.heads, self.classifier]

    def train(self) -> GaitNet:
        self.training = True
        return self

    def eval(self) -> GaitNet:
        self.training = False
        return self

    def weights(self) -> list[Tensor]:
        return (self.conv1.parameters() + self.conv2.parameters() + self.heads.parameters()
                + self.bnneck.parameters() + self.classifier.parameters())

    def quantizers(self) -> list[Quantizer]:
        return [q for layer in self.layers for q in layer.quantizers()]

    def steps(self) -> list[Tensor]:
        return [p for q in self.quantizers() for p in q.parameters()]

    def parameters(self) -> list[Tensor]:
        return self.weights() + self.steps()

    def set_grad_mode(self, grad_mode: str, k: float | None = None) -> None:
        for q in self.quantizers():
            q.set_mode(grad_mode, k)

    def set_k(self, k: float) -> None:
        for q in self.quantizers():
            if not q.full_precision:
                q.set_k(k)

    def quant_configs(self) -> dict[str, tuple[QuantConfig, QuantConfig]]:
        return {layer.name: (layer.weight_quantizer.config(), layer.act_quantizer.config())
                for layer in self.layers if layer.weight_quantizer is not None}

    # -- forward stages --------------------------------------------------

    def backbone_forward(self, frames) -> Tensor:
        x = tn.as_tensor(frames)
        if x.ndim != 5 or x.shape[2] != 1 or x.shape[3:] != (self.spec.height, self.spec.width):
            raise DimensionError(
                f"expected (batch, T, 1, {self.spec.height}, {self.spec.width}) input, got {x.shape}")
        b, t = x.shape[:2]
        # single input channel: (B*T, 1, H, W) and (B*T, H, W, 1) share a layout
        h = x.reshape(b * t, self.spec.height, self.spec.width, 1)
        # relu and max pooling commute (values and gradient routing); pooling first is cheaper
        h = tn.relu(tn.max_pool2d_nhwc(self.conv1(h)))
        h = tn.relu(tn.max_pool2d_nhwc(self.conv2(h)))
        return h.reshape(b, t, *h.shape[1:]).transpose(0, 1, 4, 2, 3)

    def pool(self, features: Tensor) -> Tensor:
        return horizontal_pool(set_pool(features), self.spec.n_parts)

    def heads_forward(self, pooled: Tensor) -> Tensor:
        return self.heads(pooled)

    def bnneck_logits(self, embeddings: Tensor) -> Tensor:
        return self.classifier(self.bnneck(embeddings, self.training))

    def embed(self, frames) -> Tensor:
        return self.heads_forward(self.pool(self.backbone_forward(frames)))

    def __call__(self, frames) -> tuple[Tensor, Tensor]:
        x = self.embed(frames)
        return x, self.bnneck_logits(x)

    # -- state -----------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {t.name: t.data for t in self.weights()}
        out["bnneck.running_mean"] = self.bnneck.running_mean
        out["bnneck.running_var"] = self.bnneck.running_var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = {t.name: t for t in self.weights()}
        expected = set(own) | {"bnneck.running_mean", "bnneck.running_var"}
        if set(arrays) != expected:
            raise ConfigError(f"state mismatch: missing {sorted(expected - set(arrays))}, "
                              f"unexpected {sorted(set(arrays) - expected)}")
        for name, arr in arrays.items():
            target = own[name].data if name in own else getattr(self.bnneck, name.split(".")[1])
            if target.shape != arr.shape:
                raise ConfigError(f"{name}: shape {arr.shape} != {target.shape}")
            target[...] = arr

    def load_quant_configs(self, configs: dict[str, tuple[QuantConfig, QuantConfig]]) -> None:
        for layer in self.layers:
            if layer.name not in configs:
                continue
            for q, cfg in zip((layer.weight_quantizer, layer.act_quantizer), configs[layer.name]):
                if q.cfg.bits != cfg.bits or q.cfg.signed != cfg.signed:
                    raise ConfigError(f"{layer.name}: quantizer width mismatch")
                q.cfg = replace(cfg)
                if cfg.step is not None:
                    q.v.data[...] = cfg.step

    def clone(self) -> GaitNet:
        return copy.deepcopy(self)

    def requantize(self, policy: QuantPolicy) -> GaitNet:
        """Copy of this model with fresh (uninitialised) quantizers for ``policy``."""
        spec = replace(self.spec, quant=policy)
        other = GaitNet(spec, attach=True)
        other.load_state_arrays({k: v.copy() for k, v in self.state_arrays().items()})
        other.training = self.training
        return other


def detach_quantizers(model: GaitNet) -> GaitNet:
    """Copy of ``model`` with every quantizer removed."""
    other = model.clone()
    for layer in other.layers:
        layer.weight_quantizer = None
        layer.act_quantizer = None
    return other


def check_same_architecture(a: GaitNet, b: GaitNet) -> None:
    sa, sb = a.spec, b.spec
    if (sa.channels, sa.n_parts, sa.dim, sa.n_classes, sa.height, sa.width) != \
            (sb.channels, sb.n_parts, sb.dim, sb.n_classes, sb.height, sb.width):
        raise ConfigError("teacher and student architectures differ")


def require_attached(model: GaitNet) -> None:
    if any(layer.weight_quantizer is None for layer in model.layers):
        raise UsageError("model has no quantizers attached")

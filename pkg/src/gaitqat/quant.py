"""Uniform fake quantization with a learnable step size.

Forward (both modes)::

    x_bar = round(clamp(x / v, r1, r2))      # round half away from zero
    x_hat = x_bar * v

Backward with respect to ``x`` is either the straight-through estimator (pass
the gradient inside the clamp range, zero outside) or the derivative of the
tanh soft quantizer ``theta_k``. The step ``v`` receives the learned-step-size
gradient, scaled by ``1 / sqrt(n * r2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, NumericError, UsageError
from .tensor import Tensor, custom_op

FULL_PRECISION = None
STE = "ste"
SOFT = "soft"
MIN_STEP = 1e-8


@dataclass
class QuantConfig:
    """Per-tensor quantization policy.

    ``bits=FULL_PRECISION`` disables quantization entirely. ``step`` is the
    current value of ``v``; ``None`` means it is initialised from the first
    batch seen.
    """

    bits: int | None = FULL_PRECISION
    signed: bool = True
    step: float | None = None
    grad_mode: str = STE
    k: float = 1.0
    soft_forward: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.bits is not None and (not isinstance(self.bits, (int, np.integer)) or self.bits < 2):
            raise ConfigError(f"bits must be an integer >= 2 or FULL_PRECISION, got {self.bits!r}")
        if self.grad_mode not in (STE, SOFT):
            raise ConfigError(f"unknown grad_mode {self.grad_mode!r}")
        if self.grad_mode == SOFT and not self.k >= 1:
            raise ConfigError(f"soft quantizer needs k >= 1, got {self.k}")
        if self.step is not None and not self.step > 0:
            raise ConfigError(f"step size must be positive, got {self.step}")

    @property
    def full_precision(self) -> bool:
        return self.bits is None

    @property
    def r1(self) -> int:
        if self.bits is None:
            raise UsageError("full-precision config has no clamp range")
        return -(2 ** (self.bits - 1)) if self.signed else 0

    @property
    def r2(self) -> int:
        if self.bits is None:
            raise UsageError("full-precision config has no clamp range")
        return 2 ** (self.bits - 1) - 1 if self.signed else 2 ** self.bits - 1

    def to_dict(self) -> dict:
        fp = self.bits is None
        return {
            "bits": self.bits,
            "signed": self.signed,
            "r1": None if fp else self.r1,
            "r2": None if fp else self.r2,
            "v": self.step,
            "grad_mode": self.grad_mode,
            "k": self.k,
            "soft_forward": self.soft_forward,
        }

    @classmethod
    def from_dict(cls, d: dict) -> QuantConfig:
        cfg = cls(bits=d["bits"], signed=d["signed"], step=d.get("v"), grad_mode=d["grad_mode"],
                  k=d["k"], soft_forward=d.get("soft_forward", False))
        if cfg.bits is not None and (d.get("r1") != cfg.r1 or d.get("r2") != cfg.r2):
            raise ConfigError(f"clamp range {d.get('r1')}..{d.get('r2')} inconsistent with bits")
        return cfg


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _require_step(cfg: QuantConfig) -> float:
    if cfg.step is None or not cfg.step > 0:
        raise ConfigError(f"step size must be positive, got {cfg.step}")
    return float(cfg.step)


def soft_theta(x, k: float):
    """tanh soft rounding: floor(x) + tanh(k d) / (2 tanh(k/2)) + 1/2, d = x - floor(x) - 1/2."""
    if not k >= 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    x = np.asarray(x, dtype=np.float64)
    fl = np.floor(x)
    d = x - fl - 0.5
    return fl + 0.5 * np.tanh(k * d) / math.tanh(k / 2) + 0.5


def soft_theta_grad(x, k: float):
    """Analytic derivative of :func:`soft_theta` (the floor contributes nothing)."""
    if not k >= 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    x = np.asarray(x, dtype=np.float64)
    d = x - np.floor(x) - 0.5
    return 0.5 * k / np.cosh(k * d) ** 2 / math.tanh(k / 2)


def _levels(x: np.ndarray, cfg: QuantConfig) -> np.ndarray:
    v = _require_step(cfg)
    if np.isnan(x).any():
        raise NumericError("NaN in quantizer input")
    s = np.clip(x / v, cfg.r1, cfg.r2)
    if cfg.soft_forward and cfg.grad_mode == SOFT:
        return soft_theta(s, cfg.k)
    return round_half_away(s)


def quantize_levels(x, cfg: QuantConfig) -> np.ndarray:
    """Integer levels ``round(clamp(x / v))`` (as float64)."""
    x = np.asarray(x, dtype=np.float64)
    if cfg.full_precision:
        raise UsageError("full-precision config has no integer levels")
    return round_half_away(np.clip(x / _require_step(cfg), cfg.r1, cfg.r2))


def fake_quantize(x, cfg: QuantConfig):
    """Forward-only fake quantization; returns an array (or a detached Tensor for Tensor input)."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    out = arr.copy() if cfg.full_precision else _levels(arr, cfg) * _require_step(cfg)
    return Tensor(out) if isinstance(x, Tensor) else out


def _in_range(x: np.ndarray, cfg: QuantConfig) -> np.ndarray:
    s = x / _require_step(cfg)
    return (s > cfg.r1) & (s < cfg.r2)


def ste_backward(g_out, x, cfg: QuantConfig) -> np.ndarray:
    g_out, x = np.asarray(g_out, dtype=np.float64), np.asarray(x, dtype=np.float64)
    return np.where(_in_range(x, cfg), g_out, 0.0)


def soft_backward(g_out, x, cfg: QuantConfig) -> np.ndarray:
    g_out, x = np.asarray(g_out, dtype=np.float64), np.asarray(x, dtype=np.float64)
    s = x / _require_step(cfg)
    return np.where(_in_range(x, cfg), g_out * soft_theta_grad(s, cfg.k), 0.0)


def grad_scale(n_elements: int, cfg: QuantConfig) -> float:
    return 1.0 / math.sqrt(n_elements * cfg.r2)


def step_grad(g_out, x, cfg: QuantConfig) -> float:
    """Learned-step-size gradient of the loss with respect to ``v``."""
    g_out, x = np.asarray(g_out, dtype=np.float64), np.asarray(x, dtype=np.float64)
    s = x / _require_step(cfg)
    contrib = np.where(s <= cfg.r1, float(cfg.r1),
                       np.where(s >= cfg.r2, float(cfg.r2), round_half_away(s) - s))
    return float((g_out * contrib).sum()) * grad_scale(x.size, cfg)


def initial_step(x, cfg: QuantConfig) -> float:
    """Step initialisation ``2 mean|x| / sqrt(r2)``, floored at ``MIN_STEP``."""
    x = np.asarray(x, dtype=np.float64)
    return max(2.0 * float(np.abs(x).mean()) / math.sqrt(cfg.r2), MIN_STEP)


def fake_quant_op(x: Tensor, v: Tensor, cfg: QuantConfig) -> Tensor:
    """Differentiable fake quantization of ``x`` with step tensor ``v``.

    ``cfg.grad_mode`` selects the input gradient; ``v`` always gets
    :func:`step_grad`.
    """
    cfg = replace(cfg, step=float(v.data))
    back_x = soft_backward if cfg.grad_mode == SOFT else ste_backward

    def fwd(xd, vd):
        return _levels(xd, cfg) * cfg.step

    def bwd(g, xd, vd):
        return back_x(g, xd, cfg), np.asarray(step_grad(g, xd, cfg)).reshape(vd.shape)

    return custom_op((x, v), fwd, bwd, op=f"fake_quant_{cfg.grad_mode}")


class Quantizer:
    """Runtime quantizer: a :class:`QuantConfig` plus its learnable step tensor."""

    def __init__(self, cfg: QuantConfig):
        cfg.validate()
        self.cfg = replace(cfg)
        self.v = Tensor(cfg.step if cfg.step is not None else 1.0, requires_grad=not cfg.full_precision,
                        name="step")

    @property
    def full_precision(self) -> bool:
        return self.cfg.full_precision

    @property
    def initialized(self) -> bool:
        return self.cfg.step is not None

    def config(self) -> QuantConfig:
        """Snapshot of the policy with the current step value."""
        step = None if self.cfg.step is None else float(self.v.data)
        return replace(self.cfg, step=step)

    def set_mode(self, grad_mode: str, k: float | None = None) -> None:
        self.cfg = replace(self.cfg, grad_mode=grad_mode, k=self.cfg.k if k is None else k)
        self.cfg.validate()

    def set_k(self, k: float) -> None:
        if not k >= 1:
            raise ConfigError(f"k must be >= 1, got {k}")
        self.cfg.k = float(k)

    def clamp_step(self) -> None:
        if self.initialized and self.v.data < MIN_STEP:
            self.v.data[...] = MIN_STEP

    def initialize(self, x: np.ndarray) -> None:
        step = initial_step(x, self.cfg)
        self.cfg.step = step
        self.v.data[...] = step

    def __call__(self, x: Tensor) -> Tensor:
        if self.full_precision:
            return x
        if not self.initialized:
            self.initialize(x.data)
        self.cfg.step = float(self.v.data)
        return fake_quant_op(x, self.v, self.cfg)

    def parameters(self) -> list[Tensor]:
        return [] if self.full_precision else [self.v]


def attach_quantizer(layer, weight_cfg: QuantConfig, act_cfg: QuantConfig):
    """Install weight and input-activation quantizers on a conv or linear layer.

    The layer must expose ``weight_quantizer`` / ``act_quantizer`` slots; a
    second attachment raises :class:`UsageError`.
    """
    if not hasattr(layer, "weight_quantizer"):
        raise UsageError(f"{type(layer).__name__} cannot carry quantizers")
    if layer.weight_quantizer is not None or layer.act_quantizer is not None:
        raise UsageError("quantizers already attached to this layer")
    layer.weight_quantizer = Quantizer(weight_cfg)
    layer.act_quantizer = Quantizer(act_cfg)
    return layer

"""Two-stage quantization-aware training.

Stage 1 trains with straight-through gradients on triplet + cross-entropy loss.
Stage 2 switches every quantizer to the soft-quantizer gradient and fine-tunes
for a short budget while a :class:`KSchedule` raises ``k``. Distillation
fine-tunes (inter-class distance calibration or logit KD) run the same loop
with a frozen teacher.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as tn
from .errors import ConfigError, TrainingError
from .gaitnet import GaitNet, check_same_architecture
from .losses import LossWeights, idc_loss, kd_kl, softmax_ce, triplet_loss
from .quant import SOFT, STE
from .synthdata import DatasetSplit, labels_of, stack_frames

FIXED = "fixed"
GROW = "grow"


@dataclass(frozen=True)
class KSchedule:
    """``k(t) = T`` (FIXED) or ``min(k0 + delta * floor(t / interval), T)`` (GROW)."""

    mode: str = GROW
    k0: float = 1.0
    delta: float = 0.2
    interval: int = 100
    threshold: float = 3.0

    def __post_init__(self):
        if self.mode not in (FIXED, GROW):
            raise ConfigError(f"unknown schedule mode {self.mode!r}")
        if self.k0 < 1 or self.threshold < 1:
            raise ConfigError("k0 and threshold must be >= 1")
        if self.mode == GROW and (self.delta < 0 or self.interval < 1):
            raise ConfigError("GROW needs delta >= 0 and interval >= 1")


def k_at_iter(schedule: KSchedule, t: int) -> float:
    if t < 0:
        raise ConfigError("iteration must be >= 0")
    if schedule.mode == FIXED:
        return float(schedule.threshold)
    return float(min(schedule.k0 + schedule.delta * (t // schedule.interval), schedule.threshold))


# named schedules from the ablation (increment / iterations)
def named_schedule(name: str, threshold: float) -> KSchedule:
    table = {"fixed": (FIXED, 0.0, 1), "grow-1": (GROW, 0.1, 100), "grow-2": (GROW, 0.2, 100),
             "grow-3": (GROW, 1.0, 1000)}
    try:
        mode, delta, interval = table[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown schedule {name!r}; choose from {sorted(table)}") from None
    return KSchedule(mode, 1.0, delta, interval, threshold)


@dataclass
class TrainPlan:
    stage1_iters: int = 3000
    finetune_iters: int = 300
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ids_per_batch: int = 8
    samples_per_id: int = 4
    seed: int = 0
    step_lr_scale: float = 0.01
    weights: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> None:
        if self.stage1_iters < 0 or self.finetune_iters < 0:
            raise ConfigError("iteration counts must be >= 0")
        if self.lr <= 0 or self.step_lr_scale <= 0:
            raise ConfigError("learning rate must be positive")
        if self.ids_per_batch < 2 or self.samples_per_id < 2:
            raise ConfigError("sampler needs >= 2 identities and >= 2 samples per identity")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainPlan:
        d = dict(d)
        d["weights"] = LossWeights(**d.get("weights", {}))
        return cls(**d)


class Adam:
    def __init__(self, params: list[tn.Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, lr_scales: list[float] | None = None):
        self.params = params
        self.lr_scales = [1.0] * len(params) if lr_scales is None else list(lr_scales)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, m, v, scale in zip(self.params, self.m, self.v, self.lr_scales):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= scale * self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        tn.zero_grad(self.params)


class BatchSampler:
    """P identities x K sequences per batch, drawn without replacement within a batch."""

    def __init__(self, labels: np.ndarray, ids_per_batch: int, samples_per_id: int, seed: int):
        self.by_id = {int(i): np.flatnonzero(labels == i) for i in np.unique(labels)}
        if len(self.by_id) < ids_per_batch:
            raise ConfigError(f"only {len(self.by_id)} identities for {ids_per_batch} per batch")
        if min(len(v) for v in self.by_id.values()) < samples_per_id:
            raise ConfigError("an identity has fewer sequences than samples_per_id")
        self.ids = np.array(sorted(self.by_id))
        self.p, self.k = ids_per_batch, samples_per_id
        self.rng = np.random.default_rng(seed)

    def __next__(self) -> np.ndarray:
        chosen = self.rng.choice(self.ids, self.p, replace=False)
        return np.concatenate([self.rng.choice(self.by_id[int(i)], self.k, replace=False) for i in chosen])


@dataclass
class TraceRow:
    iteration: int
    loss: float
    task_loss: float
    k: float
    lr: float
    grad_mode: str


def _assert_modes(model: GaitNet, mode: str) -> None:
    for q in model.quantizers():
        if not q.full_precision and q.cfg.grad_mode != mode:
            raise ConfigError(f"expected every quantizer in {mode} mode, found {q.cfg.grad_mode}")


def _train_loop(model: GaitNet, split: DatasetSplit, plan: TrainPlan, iters: int, weights: LossWeights,
                schedule: KSchedule | None = None, teacher: GaitNet | None = None,
                seed_offset: int = 0) -> list[TraceRow]:
    frames = stack_frames(split.train)
    labels = labels_of(split.train)
    classes = {int(c): i for i, c in enumerate(sorted(set(labels.tolist())))}
    targets = np.array([classes[int(c)] for c in labels])
    sampler = BatchSampler(labels, plan.ids_per_batch, plan.samples_per_id, plan.seed * 7919 + seed_offset)
    params = model.parameters()
    steps = {id(v) for v in model.steps()}
    # Adam's update size ignores gradient scale, so step sizes get their own rate
    opt = Adam(params, plan.lr, plan.beta1, plan.beta2, plan.eps,
               [plan.step_lr_scale if id(p) in steps else 1.0 for p in params])
    trace = []
    model.train()
    if teacher is not None:
        teacher.eval()
    for t in range(iters):
        k = 1.0
        if schedule is not None:
            k = k_at_iter(schedule, t)
            model.set_k(k)
        idx = next(sampler)
        x, o = model(frames[idx])
        task = weights.triplet * triplet_loss(x, labels[idx], weights.margin) + \
            weights.ce * softmax_ce(o, targets[idx])
        loss = task
        if teacher is not None and (weights.idc or weights.kd):
            with tn.no_grad():
                xh, oh = teacher(frames[idx])
            if weights.idc:
                loss = loss + weights.idc * idc_loss(xh, x, labels[idx])
            if weights.kd:
                loss = loss + weights.kd * kd_kl(oh, o, weights.temperature)
        if not math.isfinite(loss.item()):
            raise TrainingError("loss is not finite", t)
        opt.zero_grad()
        try:
            tn.backward(loss)
        except ArithmeticError as exc:
            raise TrainingError(str(exc), t) from exc
        opt.step()
        opt.zero_grad()
        for q in model.quantizers():
            q.clamp_step()
        mode = STE if schedule is None else SOFT
        trace.append(TraceRow(t, loss.item(), task.item(), k, plan.lr, mode))
    return trace


def stage1_train(model: GaitNet, split: DatasetSplit, plan: TrainPlan,
                 iters: int | None = None) -> tuple[GaitNet, list[TraceRow]]:
    """Straight-through training on triplet + cross-entropy. Mutates and returns ``model``."""
    plan.validate()
    _assert_modes(model, STE)
    w = replace(plan.weights, idc=0.0, kd=0.0)
    trace = _train_loop(model, split, plan, plan.stage1_iters if iters is None else iters, w)
    return model, trace


def stage2_finetune(model: GaitNet, split: DatasetSplit, plan: TrainPlan, schedule: KSchedule,
                    iters: int | None = None) -> tuple[GaitNet, list[TraceRow]]:
    """Soft-quantizer fine-tuning with ``k`` set from ``schedule`` before every step."""
    plan.validate()
    model.set_grad_mode(SOFT, k_at_iter(schedule, 0))
    w = replace(plan.weights, idc=0.0, kd=0.0)
    trace = _train_loop(model, split, plan, plan.finetune_iters if iters is None else iters, w, schedule,
                        seed_offset=1)
    return model, trace


def model_bits(model: GaitNet) -> int:
    b = model.spec.quant.weight_bits
    return 32 if b is None else b


def distill_finetune(student: GaitNet, teacher: GaitNet, split: DatasetSplit, plan: TrainPlan,
                     weights: LossWeights, schedule: KSchedule | None = None,
                     iters: int | None = None) -> tuple[GaitNet, list[TraceRow]]:
    """Fine-tune ``student`` on task loss plus the distillation terms in ``weights``.

    With a ``schedule`` the student uses soft-quantizer gradients (stage 2);
    otherwise straight-through gradients.
    """
    plan.validate()
    check_same_architecture(student, teacher)
    if model_bits(teacher) < model_bits(student):
        raise ConfigError("teacher must not have fewer bits than the student")
    if schedule is not None:
        student.set_grad_mode(SOFT, k_at_iter(schedule, 0))
    else:
        student.set_grad_mode(STE)
    trace = _train_loop(student, split, plan, plan.finetune_iters if iters is None else iters, weights,
                        schedule, teacher=teacher, seed_offset=1)
    return student, trace


def calibrate_with_idc(student: GaitNet, teacher: GaitNet, split: DatasetSplit, plan: TrainPlan,
                       schedule: KSchedule | None = None, iters: int | None = None):
    """Inter-class distance calibration: task loss + ``plan.weights.idc`` * IDC loss."""
    w = replace(plan.weights, kd=0.0)
    return distill_finetune(student, teacher, split, plan, w, schedule, iters)


def convergence_contrast(split: DatasetSplit, plan: TrainPlan, k_values, model_factory,
                         iters: int | None = None) -> dict[str, list[TraceRow]]:
    """Train from the same initialisation once with STE and once per fixed soft ``k``."""
    iters = plan.stage1_iters if iters is None else iters
    traces = {}
    m = model_factory()
    traces["ste"] = _train_loop(m, split, plan, iters, replace(plan.weights, idc=0.0, kd=0.0))
    for k in k_values:
        m = model_factory()
        m.set_grad_mode(SOFT, float(k))
        sched = KSchedule(FIXED, 1.0, 0.0, 1, float(k))
        traces[f"soft_k{k:g}"] = _train_loop(m, split, plan, iters, replace(plan.weights, idc=0.0, kd=0.0), sched)
    return traces


def final_loss(trace: list[TraceRow], window: int = 50) -> float:
    """Mean task loss over the last ``window`` iterations."""
    tail = trace[-window:]
    return float(np.mean([r.task_loss for r in tail]))


# ---------------------------------------------------------------------------
# CSV export


def _comment(fh, provenance: str | None) -> None:
    if provenance:
        fh.write(f"# {provenance}\n")


def write_trace_csv(trace: list[TraceRow], path, provenance: str | None = None) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        _comment(fh, provenance)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loss", "task_loss", "k", "lr", "grad_mode"])
        for r in trace:
            w.writerow([r.iteration, repr(r.loss), repr(r.task_loss), repr(r.k), repr(r.lr), r.grad_mode])
    return path


def write_contrast_csv(traces: dict[str, list[TraceRow]], path, provenance: str | None = None) -> Path:
    names = list(traces)
    lengths = {len(traces[n]) for n in names}
    if len(lengths) != 1:
        raise ConfigError("contrast traces differ in length")
    path = Path(path)
    with path.open("w", newline="") as fh:
        _comment(fh, provenance)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration"] + names)
        for i in range(lengths.pop()):
            w.writerow([i] + [repr(traces[n][i].task_loss) for n in names])
    return path

"""Desk-scale experiment recipes shared by the CLI, the notebooks and the tests.

One seed of the quantization study runs:

1. full-precision training from scratch (``fp_iters`` at ``fp_lr``);
2. stage-1 STE training of w8/a8 and w4/a4 models initialised from that
   full-precision model (``qat_iters`` at ``lr``);
3. the ablation arms on the w4/a4 model, each ``finetune_iters`` long and
   sharing one batch order: more STE training (baseline), logit KD, IDC,
   and IDC followed by soft-quantizer fine-tuning.

The w8/a8 model is the teacher for KD and IDC.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .gaitnet import GaitNet, ModelSpec, QuantPolicy
from .losses import LossWeights, kd_kl
from .tensor import Tensor, backward
from .metrics import MetricsReport, evaluate
from .synthdata import DatasetConfig, DatasetSplit, generate_from_config
from .trainer import (Adam, KSchedule, TraceRow, TrainPlan, calibrate_with_idc, convergence_contrast,
                      distill_finetune, final_loss, stage1_train, stage2_finetune)


@dataclass(frozen=True)
class DeskBudget:
    fp_iters: int = 1000
    fp_lr: float = 1e-3
    qat_iters: int = 300
    finetune_iters: int = 300
    lr: float = 1e-4
    contrast_iters: int = 300
    contrast_lr: float = 1e-3
    contrast_bits: int = 4


def plan_for(seed: int, lr: float, iters: int, weights: LossWeights | None = None) -> TrainPlan:
    return TrainPlan(stage1_iters=iters, finetune_iters=iters, lr=lr, seed=seed,
                     weights=weights or LossWeights())


def train_fp(split: DatasetSplit, seed: int, budget: DeskBudget = DeskBudget(),
             spec: ModelSpec | None = None) -> tuple[GaitNet, list[TraceRow]]:
    model = GaitNet(spec or ModelSpec(), seed=seed)
    return stage1_train(model, split, plan_for(seed, budget.fp_lr, budget.fp_iters))


def train_qat(fp_model: GaitNet, bits: int, split: DatasetSplit, seed: int,
              budget: DeskBudget = DeskBudget()) -> tuple[GaitNet, list[TraceRow]]:
    model = fp_model.requantize(QuantPolicy(bits, bits))
    return stage1_train(model, split, plan_for(seed, budget.lr, budget.qat_iters))


def ablation_arms(student: GaitNet, teacher: GaitNet, split: DatasetSplit, seed: int,
                  budget: DeskBudget = DeskBudget(), idc_weight: float = 1.0, kd_weight: float = 1.0,
                  temperature: float = 1.0, schedule: KSchedule = KSchedule()) -> dict[str, GaitNet]:
    """The four w4/a4 rows of the component ablation, each from a copy of ``student``."""
    n = budget.finetune_iters
    plan = plan_for(seed, budget.lr, n)
    base, _ = stage1_train(student.clone(), split, plan)
    kd, _ = distill_finetune(student.clone(), teacher, split, plan,
                             LossWeights(kd=kd_weight, temperature=temperature))
    idc, _ = calibrate_with_idc(student.clone(), teacher, split,
                                plan_for(seed, budget.lr, n, LossWeights(idc=idc_weight)))
    idc_ft, _ = stage2_finetune(idc.clone(), split, plan, schedule)
    return {"baseline": base, "kd": kd, "idc": idc, "idc_ft": idc_ft}


@dataclass
class SeedResult:
    seed: int
    reports: dict[str, MetricsReport] = field(default_factory=dict)
    models: dict[str, GaitNet] = field(default_factory=dict)

    def rank1(self) -> dict[str, float]:
        return {k: r.rank1 for k, r in self.reports.items()}


def run_seed(seed: int, budget: DeskBudget = DeskBudget(), data: DatasetConfig | None = None,
             keep_models: bool = True) -> SeedResult:
    """Every model of the quantization study for one seed (data and init share it)."""
    split = generate_from_config(replace(data or DatasetConfig(), seed=seed))
    res = SeedResult(seed)
    fp, _ = train_fp(split, seed, budget)
    w8, _ = train_qat(fp, 8, split, seed, budget)
    w4, _ = train_qat(fp, 4, split, seed, budget)
    models = {"fp": fp, "w8a8": w8, "w4a4": w4}
    models.update({f"w4a4_{k}": m for k, m in ablation_arms(w4, w8, split, seed, budget).items()})
    cfg = {"seed": seed, "budget": asdict(budget)}
    for name, m in models.items():
        res.reports[name] = evaluate(m, split, config={**cfg, "model": name})
    if keep_models:
        res.models = models
    return res


def contrast_seed(seed: int, k_values=(2, 5), budget: DeskBudget = DeskBudget(),
                  data: DatasetConfig | None = None) -> dict[str, list[TraceRow]]:
    split = generate_from_config(replace(data or DatasetConfig(), seed=seed))
    bits = budget.contrast_bits
    return convergence_contrast(split, plan_for(seed, budget.contrast_lr, budget.contrast_iters), k_values,
                                lambda: GaitNet(ModelSpec(quant=QuantPolicy(bits, bits)), seed=seed))


def contrast_summary(traces: dict[str, list[TraceRow]]) -> dict[str, float]:
    """Final task loss per run: mean over the last tenth of the shared budget."""
    n = len(next(iter(traces.values())))
    return {k: final_loss(v, max(1, n // 10)) for k, v in traces.items()}


def kd_free_logits(teacher: np.ndarray, temperature: float = 1.0, iters: int = 10_000, lr: float = 0.05,
                   decay: float = 0.2, seed: int = 0) -> tuple[np.ndarray, float]:
    """Fit unconstrained student logits to a fixed teacher by minimising ``kd_kl``.

    Returns the fitted logits and the final loss. KL only sees softmax outputs,
    so each row is matched up to a constant shift and the per-row spread of the
    student converges to the teacher's. The Adam step decays exponentially to
    ``lr * decay``; low-probability classes get small gradients and converge last.
    """
    rng = np.random.default_rng(seed)
    student = Tensor(rng.normal(0.0, 0.1, teacher.shape), requires_grad=True)
    opt = Adam([student], lr)
    loss = None
    for t in range(iters):
        opt.lr = lr * decay ** (t / iters)
        opt.zero_grad()
        loss = kd_kl(teacher, student, temperature)
        backward(loss)
        opt.step()
    return student.data.copy(), loss.item()


def row_std(logits: np.ndarray) -> np.ndarray:
    """Population standard deviation of each logits vector (over the class axis)."""
    return np.asarray(logits).std(axis=-1)

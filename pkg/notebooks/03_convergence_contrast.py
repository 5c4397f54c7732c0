"""
Straight-through versus fixed soft-quantizer training from scratch
==================================================================

A w4/a4 model trained with a fixed large ``k`` keeps a higher task loss over
the same budget. About one CPU-minute per seed.
"""

# %%
import numpy as np

from gaitqat.experiments import contrast_seed, contrast_summary

traces = contrast_seed(0)
n = len(traces["ste"])
for name, rows in traces.items():
    marks = [np.mean([r.task_loss for r in rows[i:i + n // 6]]) for i in range(0, n, n // 6)]
    print(f"{name:8s} " + " ".join(f"{v:6.3f}" for v in marks))

# %% final loss: mean over the last tenth of the budget
for name, v in contrast_summary(traces).items():
    print(f"{name:8s} {v:.4f}")

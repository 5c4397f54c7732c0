"""
Lowering a w4/a4 model to integers
==================================

Trains a small w4/a4 model, lowers it, and checks the integer path against
the fake-quantized float model. Ends with the per-layer BitOPs table.
"""

# %%
import numpy as np

from gaitqat import tensor as tn
from gaitqat.experiments import DeskBudget, train_fp, train_qat
from gaitqat.intinfer import int_forward, int_retrieval, lower, timing_report
from gaitqat.metrics import bitops, evaluate, format_giga, gaitbase_layer_table, layer_bitops, model_layer_costs
from gaitqat.synthdata import DatasetConfig, generate_from_config, stack_frames

split = generate_from_config(DatasetConfig(seed=0))
budget = DeskBudget(fp_iters=300, qat_iters=100)
fp, _ = train_fp(split, 0, budget)
w4, _ = train_qat(fp, 4, split, 0, budget)
w4.eval()

# %% integer weights stay in [-8, 7]; outputs agree with the fake-quant model
layers = lower(w4)
for l in layers:
    print(f"{l.name:10s} levels [{l.weight.min()}, {l.weight.max()}]  v_w {l.v_w:.5f}  v_a {l.v_a:.5f}")
x = stack_frames(split.probe[:8])
with tn.no_grad():
    ref = w4.embed(x).data
out = int_forward(layers, x, w4.spec.n_parts)
print("max relative difference", np.abs(out - ref).max() / np.abs(ref).max())
print("fake-quant", evaluate(w4, split).rank1, "integer", int_retrieval(layers, split, w4.spec.n_parts)["rank1"])

# %% per-layer time and BitOPs (timing is wall-clock and informational only)
for r in timing_report(layers, w4, x):
    print(f"{r.layer:10s} {r.bits} bit  {r.seconds_per_sample * 1e6:8.1f} us/sample  {r.bitops:.3e} BitOPs")

# %% the GaitBase-style table at 32, 8 and 4 bits
for b in (32, 8, 4):
    table = gaitbase_layer_table(b_w=b, b_a=b)
    print(f"w{b}/a{b}: {format_giga(bitops(table))} G BitOPs over {len(table)} layers")
print("this model:", {s.name: layer_bitops(s) for s in model_layer_costs(w4)})

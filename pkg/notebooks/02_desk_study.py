"""
The desk-scale quantization study
=================================

Full precision, w8/a8 and w4/a4 training followed by the four w4/a4 ablation
arms. One seed takes about four CPU-minutes at the default budget; pass seeds
on the command line, e.g. ``python3 notebooks/02_desk_study.py 0 1 2``.
"""

# %%
import sys

import numpy as np

from gaitqat.experiments import run_seed

seeds = [int(s) for s in sys.argv[1:]] or [0]
results = {s: run_seed(s, keep_models=False) for s in seeds}

# %% per-seed table: Rank-1, mAP, mINP and logits variance
names = list(results[seeds[0]].reports)
for s in seeds:
    print(f"seed {s}")
    for n in names:
        r = results[s].reports[n]
        print(f"  {n:16s} rank1 {r.rank1:.4f}  mAP {r.mAP:.4f}  mINP {r.mINP:.4f}  "
              f"var(O) {r.logits_variance:7.3f}  {r.bitops_g} G BitOPs")

# %% medians, the numbers the acceptance criteria compare
print("median Rank-1")
for n in names:
    print(f"  {n:16s} {np.median([results[s].reports[n].rank1 for s in seeds]):.4f}")

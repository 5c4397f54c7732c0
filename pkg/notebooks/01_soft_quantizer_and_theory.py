"""
Soft rounding and the gradient moments it implies
=================================================

Run with ``python3 notebooks/01_soft_quantizer_and_theory.py``.
"""

# %% theta_k interpolates between the identity (small k) and round (large k)
import numpy as np

from gaitqat.quant import round_half_away, soft_theta, soft_theta_grad
from gaitqat.theory import FIRST, SECOND, expected_grad_mean_sq, expected_grad_sq_norm, quadrature_oracle

x = np.linspace(-1.5, 1.5, 13)
print("x      " + " ".join(f"{v:6.2f}" for v in x))
print("round  " + " ".join(f"{v:6.2f}" for v in round_half_away(x)))
for k in (1, 2, 5, 20):
    print(f"k={k:<4} " + " ".join(f"{v:6.2f}" for v in soft_theta(x, k)))

# %% the derivative peaks mid-cell and flattens at the cell edges as k grows
for k in (1, 5, 20):
    print(f"k={k:<3} slope at 0.5: {soft_theta_grad(0.5, k):8.4f}   at 1.0: {soft_theta_grad(1.0, k):.2e}")

# %% sup distance to round outside a 0.05 band around the half-integers
grid = np.linspace(-3, 3, 120001)
grid = grid[np.abs(grid - np.floor(grid) - 0.5) > 0.05]
for k in (1, 2, 5, 10, 20):
    print(f"k={k:<3} sup|theta - round| = {np.abs(soft_theta(grid, k) - round_half_away(grid)).max():.4f}")

# %% closed-form gradient moments against Gauss-Legendre quadrature
print(f"{'k':>5} {'1/k^2':>10} {'quad':>10} {'second':>10} {'quad':>10}")
for k in (1.0, 2.0, 3.0, 5.0, 10.0):
    print(f"{k:5.1f} {expected_grad_mean_sq(k):10.6f} {quadrature_oracle(k, FIRST):10.6f} "
          f"{expected_grad_sq_norm(k):10.6f} {quadrature_oracle(k, SECOND):10.6f}")

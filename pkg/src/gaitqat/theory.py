"""Gradient moments of the soft quantizer and the curves that visualise them.

Restricting the soft quantizer to its tanh part gives
``G(z) = tanh(z) / (2 tanh(k/2))`` on ``z in [-k/2, k/2)`` with gradient
``G'(z) = coth(k/2) sech(z)^2 / 2``. For ``z`` uniform on that interval the
squared mean of ``G'`` is ``1/k^2`` and its second moment is
``(cosh k + 2) / (3 k sinh k)``. Both fall with ``k``: the first-order descent
term of an L-smooth SGD bound shrinks as the quantizer sharpens, which is why
straight-through training converges faster than training with large ``k``.

The closed forms are checked against composite Gauss-Legendre quadrature.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .quant import round_half_away, soft_theta

FIRST = "first"
SECOND = "second"
THETA_KS = (1, 2, 5, 10)


def _check_k(k: float) -> None:
    if not k >= 1:
        raise ConfigError(f"k must be >= 1, got {k}")


def expected_grad_mean_sq(k: float) -> float:
    _check_k(k)
    return 1.0 / (k * k)


def expected_grad_sq_norm(k: float) -> float:
    _check_k(k)
    return (math.cosh(k) + 2.0) / (3.0 * k * math.sinh(k))


def grad_g(z, k: float):
    return 0.5 / math.tanh(k / 2) / np.cosh(z) ** 2


def gauss_legendre(f, a: float, b: float, panels: int = 256, order: int = 16) -> float:
    """Composite Gauss-Legendre rule with ``panels`` equal sub-intervals."""
    nodes, weights = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(a, b, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    z = mid[:, None] + half[:, None] * nodes[None, :]
    return float((f(z) * weights[None, :] * half[:, None]).sum())


def quadrature_oracle(k: float, moment: str, panels: int = 256) -> float:
    """Numerical E^2[G'] (``FIRST``) or E[G'^2] (``SECOND``) for z ~ U[-k/2, k/2]."""
    _check_k(k)
    if moment == FIRST:
        m = gauss_legendre(lambda z: grad_g(z, k) / k, -k / 2, k / 2, panels)
        return m * m
    if moment == SECOND:
        return gauss_legendre(lambda z: grad_g(z, k) ** 2 / k, -k / 2, k / 2, panels)
    raise ConfigError(f"unknown moment {moment!r}")


@dataclass(frozen=True)
class CurvePoint:
    k: float
    first_moment_sq: float
    second_moment: float


def curve(k_values) -> list[CurvePoint]:
    return [CurvePoint(float(k), expected_grad_mean_sq(k), expected_grad_sq_norm(k)) for k in k_values]


CSV_COLUMNS = ("k", "e2_grad", "e_grad_sq", "x") + tuple(f"theta_k_at_{k}" for k in THETA_KS) + ("round_x",)


def export_theory_curves(k_min: float, k_max: float, n_points: int, path, x_range=(-2.0, 2.0),
                         provenance: str | None = None) -> Path:
    """Write the moment curves and theta_k samples to a CSV file.

    Each row carries one ``k`` of the moment curves and one ``x`` sample of the
    theta_k curves (``x`` spans ``x_range`` on an ``n_points`` grid).
    ``provenance``, if given, is written as a leading ``#`` comment line.
    """
    _check_k(k_min)
    if not k_min < k_max:
        raise ConfigError("need k_min < k_max")
    if n_points < 2:
        raise ConfigError("need at least two points")
    path = Path(path)
    ks = np.linspace(k_min, k_max, n_points)
    xs = np.linspace(x_range[0], x_range[1], n_points)
    thetas = {k: soft_theta(xs, k) for k in THETA_KS}
    rounded = round_half_away(xs)
    with path.open("w", newline="") as fh:
        if provenance:
            fh.write(f"# {provenance}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for i, k in enumerate(ks):
            row = [k, expected_grad_mean_sq(k), expected_grad_sq_norm(k), xs[i]]
            row += [thetas[kk][i] for kk in THETA_KS] + [rounded[i]]
            w.writerow([repr(float(v)) for v in row])
    return path


def read_theory_curves(path) -> dict[str, np.ndarray]:
    with Path(path).open() as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    header, body = rows[0], rows[1:]
    cols = np.array(body, dtype=np.float64).T if body else np.zeros((len(header), 0))
    return dict(zip(header, cols))


def verify_theory_curves(path, tol: float = 1e-8) -> list[str]:
    """Re-check an exported curve file; returns a list of violations (empty when valid)."""
    c = read_theory_curves(path)
    problems = []
    k, e2, esq = c["k"], c["e2_grad"], c["e_grad_sq"]
    if np.any(np.diff(e2) >= 0):
        problems.append("e2_grad is not strictly decreasing in k")
    if np.any(np.diff(esq) >= 0):
        problems.append("e_grad_sq is not strictly decreasing in k")
    if np.any(esq <= 0):
        problems.append("e_grad_sq has non-positive entries")
    if np.any(e2[k > 1] >= 1):
        problems.append("e2_grad >= 1 for some k > 1")
    for kk, a, b in zip(k, e2, esq):
        if abs(a - quadrature_oracle(kk, FIRST)) > tol or abs(b - quadrature_oracle(kk, SECOND)) > tol:
            problems.append(f"closed form disagrees with quadrature at k={kk}")
            break
    return problems

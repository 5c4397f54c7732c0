import math

import mpmath
import numpy as np
import pytest

from gaitqat.errors import ConfigError
from gaitqat.theory import (FIRST, SECOND, CSV_COLUMNS, expected_grad_mean_sq, expected_grad_sq_norm,
                            export_theory_curves, gauss_legendre, quadrature_oracle, read_theory_curves,
                            verify_theory_curves)


def second_moment_mp(k):
    mpmath.mp.dps = 50
    k = mpmath.mpf(k)
    return (mpmath.cosh(k) + 2) / (3 * k * mpmath.sinh(k))


def test_first_moment_examples():
    assert expected_grad_mean_sq(1) == 1.0
    assert expected_grad_mean_sq(2) == 0.25
    assert expected_grad_mean_sq(10) == pytest.approx(0.01, rel=1e-15)


def test_second_moment_examples():
    assert expected_grad_sq_norm(1) == pytest.approx(1.004957, abs=1e-6)
    assert expected_grad_sq_norm(2) == pytest.approx(0.264792, abs=1e-6)
    assert expected_grad_sq_norm(50) == pytest.approx(0.006667, abs=1e-6)
    for k in (1, 2, 3.7, 50):
        assert expected_grad_sq_norm(k) == pytest.approx(float(second_moment_mp(k)), rel=1e-14)


def test_domain_errors():
    for fn in (expected_grad_mean_sq, expected_grad_sq_norm):
        with pytest.raises(ConfigError):
            fn(0.5)
    with pytest.raises(ConfigError):
        quadrature_oracle(3, "third")


def test_quadrature_at_k3():
    assert abs(quadrature_oracle(3, FIRST) - 1 / 9) < 1e-10
    assert abs(quadrature_oracle(3, SECOND) - expected_grad_sq_norm(3)) < 1e-10


def test_first_moment_before_squaring_is_one_over_k():
    from gaitqat.theory import grad_g
    for k in (1.0, 2.5, 7.0):
        m = gauss_legendre(lambda z: grad_g(z, k) / k, -k / 2, k / 2)
        assert m == pytest.approx(1 / k, abs=1e-13)


def test_closed_forms_against_quadrature_on_50_points():
    for k in np.linspace(1, 10, 50):
        assert abs(expected_grad_mean_sq(k) - quadrature_oracle(k, FIRST)) < 1e-8
        assert abs(expected_grad_sq_norm(k) - quadrature_oracle(k, SECOND)) < 1e-8


def test_bound_and_monotone_decay():
    ks = np.linspace(1, 50, 400)
    first = np.array([expected_grad_mean_sq(k) for k in ks])
    second = np.array([expected_grad_sq_norm(k) for k in ks])
    assert first[0] == 1.0 and np.all(first[1:] < 1)
    assert np.all(second > 0)
    assert np.all(np.diff(first) < 0) and np.all(np.diff(second) < 0)


def test_large_k_asymptote():
    assert expected_grad_sq_norm(50) * 3 * 50 == pytest.approx(1.0, abs=1e-12)
    assert math.isclose(expected_grad_sq_norm(200) * 600, 1.0, rel_tol=1e-12)


def test_export_and_verify(tmp_path):
    path = export_theory_curves(1, 10, 25, tmp_path / "curves.csv", provenance="config_hash=x seed=0")
    lines = path.read_text().splitlines()
    assert lines[0].startswith("#")
    assert lines[1].split(",") == list(CSV_COLUMNS)
    assert len(lines) == 2 + 25
    c = read_theory_curves(path)
    assert np.all(np.diff(c["e2_grad"]) < 0)
    assert np.all(c["e_grad_sq"] > 0)
    assert verify_theory_curves(path) == []


def test_verify_flags_tampering(tmp_path):
    path = export_theory_curves(1, 10, 10, tmp_path / "curves.csv")
    lines = path.read_text().splitlines()
    cells = lines[3].split(",")
    cells[2] = "5.0"
    lines[3] = ",".join(cells)
    path.write_text("\n".join(lines) + "\n")
    assert verify_theory_curves(path)


def test_export_rejects_bad_range(tmp_path):
    with pytest.raises(ConfigError):
        export_theory_curves(5, 2, 10, tmp_path / "x.csv")

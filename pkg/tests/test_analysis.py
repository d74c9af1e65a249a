import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sctransfer.analysis import (balanced_norm, contraction_matrix, convergence_to_equilibrium,
                                 critical_delta, equilibrium_decay, estimate_coupling_constant,
                                 fit_ly_coefficients, frozen_family, leading_eigenvalue,
                                 random_test_functions, sequential_ly_check)
from sctransfer.densities import midpoints, norm
from sctransfer.errors import DomainError
from sctransfer.maps import doubling, get_kernel
from sctransfer.self_consistent import SelfConsistentModel, picard_fixed_point
from sctransfer.transfer_ops import NoiseKernel, convolution_matrix, ulam_matrix

n = 512
x = midpoints(n)
H = get_kernel("one-plus-cos-times-sin")


# ---------------------------------------------------------------- Lasota-Yorke

def test_ly_doubling():
    ly = fit_ly_coefficients(ulam_matrix(doubling(), n), "W11", "L1")
    assert abs(ly.lambda1 - 0.5) <= 0.1
    assert 0 < ly.B < 5
    assert ly.regime_ok and ly.violations == 0


def test_ly_noise_is_smoothing():
    K = convolution_matrix(NoiseKernel.gaussian(0.1).on_grid(n), n)
    ly = fit_ly_coefficients(K, "C1", "L1")
    assert ly.lambda1 < 0.1


def test_ly_identity_flags_regime():
    ly = fit_ly_coefficients(np.eye(64), "L1", "L1")
    assert not ly.regime_ok
    assert ly.lambda1 >= 1.0


def test_ly_family_and_sequential_check():
    m = SelfConsistentModel("expanding", doubling(), H, 0.01, 256)
    ly = fit_ly_coefficients(frozen_family(m, 10), "W11", "L1")
    assert ly.regime_ok
    assert sequential_ly_check(m, ly, steps=6, trials=5) <= 1.0


# ---------------------------------------------------------------- decay

def test_decay_doubling_chain():
    L = ulam_matrix(doubling(), n)
    c1, c2 = np.cos(2 * np.pi * x), np.cos(4 * np.pi * x)
    d1 = convergence_to_equilibrium(L, c1, N=3)
    assert d1.a[0] <= 1e-8 and d1.flag == "annihilated"
    d2 = convergence_to_equilibrium(L, c2, N=3)
    assert d2.a[1] <= 1e-8
    assert d2.a[0] == pytest.approx(norm(c1, "L1") / norm(c2, "W11"), rel=1e-3)


def test_decay_identity_is_flagged():
    g = np.cos(2 * np.pi * midpoints(64))
    d = convergence_to_equilibrium(np.eye(64), g, N=10)
    assert d.flag == "no-decay" and abs(d.gamma) < 1e-6


def test_decay_rejects_nonzero_mean():
    with pytest.raises(DomainError):
        convergence_to_equilibrium(np.eye(8), np.ones(8))


def test_coupled_equilibrium_decay():
    m = SelfConsistentModel("expanding", doubling(), H, 0.05, n)
    f, _ = picard_fixed_point(m, tol=1e-13)
    d = equilibrium_decay(m, 1 + 0.5 * np.cos(2 * np.pi * x), f, N=30)
    assert d.flag == "ok" and d.gamma > 0


# ---------------------------------------------------------------- contraction

def test_contraction_zero_coupling():
    rep = contraction_matrix((0.5, 1.0), 1, 1, 1, 0.0, 0.0, 10)
    assert rep.rho == pytest.approx(0.5 ** 10)
    assert rep.regime_ok


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 0.9), st.floats(0.0, 3.0), st.floats(0.0, 2.0), st.integers(1, 30),
       st.floats(0.0, 1.0))
def test_closed_form_eigenvalue(lam, B, delta, n1, a):
    rep = contraction_matrix((lam, B), 1.0, 1.0, 1.0, a, delta, n1)
    assert rep.rho == pytest.approx(np.max(np.linalg.eigvals(rep.matrix_M).real), abs=1e-12, rel=1e-12)


def test_eigvec_balances():
    rep = contraction_matrix((0.5, 1.0), 1, 1, 1, 2.0 ** -10, 0.01, 10)
    a, b = rep.eigvec_ab
    v = np.array([a, b])
    assert a + b == pytest.approx(1.0)
    assert np.allclose(rep.matrix_M.T @ v, rep.rho * v)


def test_rho_monotone_and_critical_delta_stable():
    ds = np.linspace(0, 2, 41)
    rhos = [contraction_matrix((0.5, 1.0), 1, 1, 1, 2.0 ** -10, d, 10).rho for d in ds]
    assert np.all(np.diff(rhos) >= 0)
    d1 = critical_delta((0.5, 1.0), 1, 1, 1, 2.0 ** -10, 10, grid_points=200)
    d2 = critical_delta((0.5, 1.0), 1, 1, 1, 2.0 ** -10, 10, grid_points=2000)
    assert contraction_matrix((0.5, 1.0), 1, 1, 1, 2.0 ** -10, d1, 10).rho == pytest.approx(1.0)
    assert float(f"{d1:.3g}") == float(f"{d2:.3g}")


def test_report_json():
    rep = contraction_matrix((0.5, 1.0), 1, 1, 1, 0.001, 0.01, 10)
    d = json.loads(rep.to_json())
    assert list(d) == ["n1", "matrix_M", "rho", "eigvec_ab", "regime_ok", "delta"]


def test_leading_eigenvalue_complex_spectrum_is_nan():
    assert np.isnan(leading_eigenvalue([[0, -1], [1, 0]]))


# ---------------------------------------------------------------- helpers

def test_balanced_norm_examples():
    g = np.cos(2 * np.pi * x)
    assert balanced_norm(g, 1, 0) == norm(g, "W11")
    assert balanced_norm(g, 0, 1) == norm(g, "L1")
    assert balanced_norm(np.ones(n), 0.5, 0.5) == pytest.approx(1.0)


def test_coupling_constant_positive_and_zero_at_zero_delta():
    m = SelfConsistentModel("expanding", doubling(), H, 0.02, 128)
    assert estimate_coupling_constant(m, samples=5) > 0
    assert estimate_coupling_constant(m.with_delta(0.0)) == 0.0


def test_random_test_functions_shapes():
    F = random_test_functions(64, 7, np.random.default_rng(0), zero_mean=True)
    assert F.shape == (7, 64)
    assert np.allclose(F.mean(axis=1), 0.0)

import numpy as np
import pytest

from sctransfer.densities import midpoints
from sctransfer.errors import ConfigurationError
from sctransfer.maps import doubling, get_kernel, perturbed_doubling
from sctransfer.optimal_coupling import (ConvexConstraint, PerturbationBasis, certificate,
                                         kkt_ball_box, optimize_ball, optimize_box,
                                         optimize_convex, projected_ascent, response_gradient)
from sctransfer.response import linear_response
from sctransfer.self_consistent import SelfConsistentModel
from sctransfer.transfer_ops import NoiseKernel

n = 256
x = midpoints(n)
c1 = np.cos(2 * np.pi * x)
H = get_kernel("sine-difference")  # placeholder: the gradient ignores the model's own coupling


@pytest.fixture(scope="module")
def model():
    return SelfConsistentModel("expanding", perturbed_doubling(0.1), H, 0.0, n)


@pytest.fixture(scope="module")
def basis():
    return PerturbationBasis(degree=3, s=7.0)


# ---------------------------------------------------------------- gradient

def test_constant_observable_gives_zero_gradient(model, basis):
    g = response_gradient(np.ones(n), model, basis).g
    assert np.abs(g).max() < 1e-12


def test_zero_y_average_modes_vanish_for_uniform_density(basis):
    m = SelfConsistentModel("expanding", doubling(), H, 0.0, n)
    g = response_gradient(c1, m, basis).g
    zero_y = np.array([b != "1" for _, _, b, _ in basis.labels])
    assert np.abs(g[zero_y]).max() < 1e-12


def test_gradient_entry_matches_response(model, basis):
    g = response_gradient(c1, model, basis).g
    rng = np.random.default_rng(0)
    for m in rng.choice(basis.size, 5, replace=False):
        e = np.zeros(basis.size)
        e[m] = 1.0
        mm = SelfConsistentModel("expanding", perturbed_doubling(0.1), basis.kernel(e), 0.0, n)
        assert g[m] == pytest.approx(linear_response(mm, c1).observable_value, abs=1e-10)


def test_doubling_single_mode_neumann_value(basis):
    # e = sqrt2 sin(2 pi x) * 1: S = sqrt2 sin, term = -2 pi sqrt2 cos, killed by one step of L0
    m = SelfConsistentModel("expanding", doubling(), H, 0.0, 1024)
    xm = midpoints(1024)
    g = response_gradient(np.cos(2 * np.pi * xm), m, basis).g
    k = basis.labels.index(("sin", 1, "1", 0))
    assert g[k] == pytest.approx(-np.pi * np.sqrt(2.0), rel=1e-4)


def test_adjoint_matches_per_mode(model, basis):
    a = response_gradient(c1, model, basis, "adjoint").g
    b = response_gradient(c1, model, basis, "per-mode").g
    assert np.abs(a - b).max() <= 1e-9


def test_noise_class_gradient_paths_agree(basis):
    m = SelfConsistentModel("additive-noise-circle", perturbed_doubling(0.1), H, 0.0, 128,
                            NoiseKernel.gaussian(0.1))
    c = np.cos(2 * np.pi * midpoints(128))
    a = response_gradient(c, m, basis, "adjoint").g
    b = response_gradient(c, m, basis, "per-mode").g
    assert np.abs(a - b).max() <= 1e-9


def test_objective_linearity_end_to_end(model, basis):
    g = response_gradient(c1, model, basis).g
    rng = np.random.default_rng(1)
    h1, h2 = rng.standard_normal((2, basis.size)) * 0.01
    J = lambda h: linear_response(SelfConsistentModel("expanding", perturbed_doubling(0.1),
                                                      basis.kernel(h), 0.0, n), c1).observable_value
    a = 0.3
    assert J(a * h1 + (1 - a) * h2) == pytest.approx(a * J(h1) + (1 - a) * J(h2), abs=1e-10)
    assert J(h1) == pytest.approx(g @ h1, abs=1e-10)


def test_unknown_gradient_method(model, basis):
    with pytest.raises(ConfigurationError):
        response_gradient(c1, model, basis, "magic")


# ---------------------------------------------------------------- ball and box

def test_ball_zero_gradient_flag():
    out = optimize_ball(np.zeros(5), 1.0)
    assert out.flag == "all-feasible-optimal" and not np.any(out.coeffs)


def test_ball_single_coordinate():
    g = np.zeros(6)
    g[2] = 3.5
    out = optimize_ball(g, 1.0)
    assert np.array_equal(out.coeffs, np.eye(6)[2])
    assert out.J == 3.5


def test_ball_dominates_random_samples():
    g = np.random.default_rng(2).standard_normal(20)
    P = ConvexConstraint("ball", radius=2.0)
    out = optimize_ball(g, 2.0)
    cert = certificate(g, out.coeffs, P, np.ones(20), samples=10_000, seed=3)
    assert cert["dominates"] and cert["J_opt"] > cert["J_sample_max"]


def test_ball_scaling_covariance():
    g = np.random.default_rng(4).standard_normal(10)
    w = 1 + np.arange(10.0)
    assert np.allclose(optimize_ball(7.5 * g, 1.0, w).coeffs, optimize_ball(g, 1.0, w).coeffs,
                       atol=1e-15)


def test_ball_rejects_nonpositive_radius():
    with pytest.raises(ConfigurationError):
        optimize_ball(np.ones(3), 0.0)


def test_box_example():
    out = optimize_box(np.array([2.0, -3.0]), -1.0, 1.0)
    assert np.array_equal(out.coeffs, [1.0, -1.0])
    assert out.J == 5.0


def test_convex_ball_delegates_bitwise():
    g = np.random.default_rng(5).standard_normal(12)
    w = 1 + np.arange(12.0)
    a = optimize_convex(g, ConvexConstraint("ball", radius=1.0), w).coeffs
    assert np.array_equal(a, optimize_ball(g, 1.0, w).coeffs)


def test_constraint_must_contain_zero():
    with pytest.raises(ConfigurationError):
        ConvexConstraint("box", lower=0.5, upper=1.0)
    with pytest.raises(ConfigurationError):
        ConvexConstraint("shape")


# ---------------------------------------------------------------- intersection

def test_ball_inside_box_gives_ball_solution():
    g = np.random.default_rng(6).standard_normal(15)
    w = 1 + np.arange(15.0)
    P = ConvexConstraint("ball-box", radius=0.5, lower=-10.0, upper=10.0)
    out = optimize_convex(g, P, w)
    assert np.allclose(out.coeffs, optimize_ball(g, 0.5, w).coeffs, atol=1e-10)
    assert out.certificate["dominates"]


def test_projected_ascent_matches_kkt():
    rng = np.random.default_rng(7)
    g = rng.standard_normal(25)
    w = 1 + rng.random(25)
    P = ConvexConstraint("ball-box", radius=1.0, lower=-0.3, upper=0.3)
    a = projected_ascent(g, P, w)
    b = kkt_ball_box(g, P, w)
    assert np.abs(a.coeffs - b.coeffs).max() < 1e-8
    assert a.J == pytest.approx(b.J, rel=1e-10)
    assert certificate(g, a.coeffs, P, w)["dominates"]


def test_ascent_unique_from_random_starts():
    rng = np.random.default_rng(8)
    g = rng.standard_normal(25)
    w = 1 + rng.random(25)
    P = ConvexConstraint("ball-box", radius=1.0, lower=-0.3, upper=0.3)
    a = projected_ascent(g, P, w, start=rng.standard_normal(25))
    b = projected_ascent(g, P, w, start=rng.standard_normal(25))
    assert np.abs(a.coeffs - b.coeffs).max() <= 1e-8


# ---------------------------------------------------------------- export

def test_basis_kernel_and_csv(tmp_path, basis):
    coeffs = np.zeros(basis.size)
    coeffs[basis.labels.index(("sin", 1, "cos", 1))] = 0.5
    h = basis.kernel(coeffs)
    X, Y = 0.13, 0.71
    assert h.eval(X, Y) == pytest.approx(0.5 * 2 * np.sin(2 * np.pi * X) * np.cos(2 * np.pi * Y))
    basis.to_csv(tmp_path / "c.csv", coeffs)
    basis.surface_csv(tmp_path / "s.csv", coeffs, n=8)
    rows = (tmp_path / "c.csv").read_text().splitlines()
    assert rows[0] == "k,l,x_kind,y_kind,coefficient" and len(rows) == basis.size + 1
    assert len((tmp_path / "s.csv").read_text().splitlines()) == 65

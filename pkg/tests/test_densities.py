import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linprog

from sctransfer.densities import (AtomicMeasure, GridDensity, SignedGridFunction,
                                  cyclic_derivative, hat_atom_project, interp,
                                  load_density_csv, midpoints, norm, save_density_csv,
                                  ulam_project, wasserstein1_circle)
from sctransfer.errors import ConfigurationError, DomainError


# ---------------------------------------------------------------- types

def test_grid_density_rejects_bad_mass_and_sign():
    with pytest.raises(DomainError):
        GridDensity(np.full(8, 2.0))
    v = np.ones(8)
    v[0], v[1] = -0.5, 2.5
    with pytest.raises(DomainError):
        GridDensity(v)


def test_grid_density_is_immutable():
    f = GridDensity.uniform(8)
    with pytest.raises(ValueError):
        f.values[0] = 3.0


def test_signed_function_zero_mean_flag():
    g = SignedGridFunction.centered(np.arange(8.0))
    assert abs(g.values.mean()) < 1e-15
    assert g.zero_mean


# ---------------------------------------------------------------- norms

def test_norms_of_constant():
    f = np.ones(64)
    assert norm(f, "L1") == pytest.approx(1.0)
    assert norm(f, "W11") == pytest.approx(1.0)


def test_l1_of_cosine():
    n = 1024
    assert abs(norm(np.cos(2 * np.pi * midpoints(n)), "L1") - 2 / np.pi) < 1e-3


@pytest.mark.parametrize("kind", ["L1", "L2", "sup", "W11", "W21", "dual_lip"])
def test_zero_function_has_zero_norm(kind):
    assert norm(np.zeros(32), kind) == 0.0


def test_dual_lip_requires_zero_mean():
    with pytest.raises(DomainError):
        norm(np.ones(16), "dual_lip")


def _dual_lip_lp(v, m=16):
    # sup of int g f over 1-Lipschitz periodic g, with g piecewise linear on a
    # grid m times finer than the cells of f: an LP lower bound that converges
    n = v.size
    N = n * m
    h = 1.0 / N
    # trapezoid weights of the fine node values inside each cell
    c = np.zeros(N)
    for i in range(n):
        for k in range(m):
            a, b = i * m + k, (i * m + k + 1) % N
            c[a] += v[i] * h / 2
            c[b] += v[i] * h / 2
    A, b = [], []
    for i in range(N):
        row = np.zeros(N)
        row[(i + 1) % N], row[i] = 1, -1
        A += [row, -row]
        b += [h, h]
    bounds = [(None, None)] * N
    bounds[0] = (0, 0)
    res = linprog(-c, A_ub=np.array(A), b_ub=np.array(b), bounds=bounds, method="highs")
    return -res.fun


def test_dual_lip_matches_lp():
    rng = np.random.default_rng(1)
    v = rng.standard_normal(24)
    v -= v.mean()
    ours, lp = norm(v, "dual_lip"), _dual_lip_lp(v)
    assert lp <= ours + 1e-12
    assert ours - lp <= 1e-3 * ours


def test_w11_uses_forward_difference():
    v = np.array([0.0, 1.0, 0.0, 1.0])
    d = cyclic_derivative(v)
    assert np.allclose(d, 4 * np.array([1, -1, 1, -1]))
    assert norm(v, "W11") == pytest.approx(0.5 + 4.0)


# ---------------------------------------------------------------- projections

def test_project_uniform():
    for n in (3, 16, 100):
        assert np.allclose(ulam_project(lambda x: np.ones_like(x), n), 1.0)


def test_block_average_preserves_integral():
    rng = np.random.default_rng(0)
    fine = rng.random(4 * 64)
    fine /= fine.mean()
    coarse = ulam_project(fine, 64)
    assert abs(coarse.mean() - fine.mean()) < 1e-15


def test_project_cosine_cell_integral():
    n = 64
    out = ulam_project(lambda x: 1 + np.cos(2 * np.pi * x), n, q=4096)
    e = np.arange(n + 1) / n
    exact = 1 + n / (2 * np.pi) * (np.sin(2 * np.pi * e[1:]) - np.sin(2 * np.pi * e[:-1]))
    assert np.max(np.abs(out - exact)) < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_projection_idempotent_and_l1_contraction(seed):
    rng = np.random.default_rng(seed)
    fine = rng.standard_normal(8 * 32)
    p = ulam_project(fine, 32)
    assert np.allclose(ulam_project(p, 32), p)
    assert norm(p, "L1") <= norm(fine, "L1") + 1e-14


def test_resolution_mismatch():
    with pytest.raises(ConfigurationError):
        ulam_project(np.ones(10), 4)


def test_hat_projection_examples():
    n = 8
    out = hat_atom_project(AtomicMeasure.point(3 / n), n)
    assert np.allclose(out.weights[np.isclose(out.positions, 3 / n)], 1.0)
    assert out.weights.sum() == pytest.approx(1.0)
    out = hat_atom_project(AtomicMeasure.point(3.5 / n), n)
    nz = out.weights > 0
    assert np.allclose(np.sort(out.positions[nz]), [3 / n, 4 / n])
    assert np.allclose(out.weights[nz], 0.5)
    out = hat_atom_project(GridDensity.uniform(16), 8)
    assert np.allclose(out.weights, 1 / 8) and out.weights.size == 8


def test_hat_projection_preserves_mass_and_mean_position():
    rng = np.random.default_rng(2)
    mu = AtomicMeasure.empirical(rng.uniform(0.1, 0.8, size=50))
    out = hat_atom_project(mu, 64)
    assert out.weights.sum() == pytest.approx(1.0)
    # hats reproduce linear functions away from the wrap point
    assert (out.positions * out.weights).sum() == pytest.approx((mu.positions * mu.weights).sum())


# ---------------------------------------------------------------- Wasserstein

def test_w1_examples():
    a = AtomicMeasure.point(0.0)
    assert wasserstein1_circle(a, a) == 0.0
    assert wasserstein1_circle(a, AtomicMeasure.point(0.1)) == pytest.approx(0.1)
    assert wasserstein1_circle(a, AtomicMeasure.point(0.9)) == pytest.approx(0.1)


def _brute_w1_two_atoms(p, wp, q, wq):
    # transport plans between two 2-atom measures form a 1-parameter family
    d = lambda a, b: min(abs(a - b), 1 - abs(a - b))
    best = np.inf
    lo = max(0.0, wp[0] - wq[1])
    hi = min(wp[0], wq[0])
    for t in np.linspace(lo, hi, 20001):
        plan = np.array([[t, wp[0] - t], [wq[0] - t, wp[1] - wq[0] + t]])
        cost = sum(plan[i, j] * d(p[i], q[j]) for i, j in itertools.product(range(2), repeat=2))
        best = min(best, cost)
    return best


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0, 0.999), min_size=4, max_size=4), st.floats(0.05, 0.95),
       st.floats(0.05, 0.95))
def test_w1_matches_brute_force(pos, a, b):
    p, q = pos[:2], pos[2:]
    mu = AtomicMeasure(np.array(p), np.array([a, 1 - a]))
    nu = AtomicMeasure(np.array(q), np.array([b, 1 - b]))
    assert wasserstein1_circle(mu, nu) == pytest.approx(_brute_w1_two_atoms(p, [a, 1 - a], q, [b, 1 - b]),
                                                        abs=1e-4)


def test_dual_lip_of_atomic_difference_equals_w1():
    rng = np.random.default_rng(4)
    mu = AtomicMeasure.empirical(rng.random(7))
    nu = AtomicMeasure.empirical(rng.random(5))
    assert norm(mu - nu, "dual_lip") == pytest.approx(wasserstein1_circle(mu, nu), abs=1e-12)


# ---------------------------------------------------------------- misc

def test_interp_reproduces_midpoint_values_and_wraps():
    v = np.arange(8.0)
    x = midpoints(8)
    assert np.allclose(interp(v, x), v)
    assert interp(v, np.array([0.0]))[0] == pytest.approx(3.5)


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    f = GridDensity.normalized(rng.random(32))
    p = tmp_path / "f.csv"
    save_density_csv(p, f)
    g = load_density_csv(p, GridDensity)
    assert np.array_equal(f.values, g.values)
    assert open(p, "rb").read().split(b"\r\n")[0] == b"cell_index,x_left,value"

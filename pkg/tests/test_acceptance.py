"""The twelve acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line; the lines are repeated in the
terminal summary under "acceptance criteria".
"""
import time

import numpy as np
import pytest

from sctransfer.analysis import (contraction_matrix, convergence_to_equilibrium, critical_delta,
                                 equilibrium_decay)
from sctransfer.densities import midpoints, ulam_project
from sctransfer.maps import CouplingKernel, doubling, get_kernel, perturbed_doubling, tent
from sctransfer.optimal_coupling import (ConvexConstraint, PerturbationBasis, optimize_convex,
                                         projected_ascent, response_gradient)
from sctransfer.particle_sim import ParticleEnsemble, simulate
from sctransfer.response import (Resolvent, finite_difference_response, linear_response,
                                 neumann_series)
from sctransfer.self_consistent import (SelfConsistentModel, apply_self_consistent, l1_distance,
                                        picard_fixed_point, thm_existence_iteration)
from sctransfer.transfer_ops import NoiseKernel, ulam_matrix

H = get_kernel("one-plus-cos-times-sin")
PRODUCT = CouplingKernel.product(("sin", 1), ("cos", 1))


def crit3_model(delta=0.05, n=1024):
    return SelfConsistentModel("expanding", doubling(), H, delta, n)


def test_criterion_01_uncoupled_ground_truth(verdict):
    t0 = time.perf_counter()
    m = crit3_model(0.0)
    fp, _ = picard_fixed_point(m, tol=1e-12)
    ft, _ = thm_existence_iteration(m, tol=1e-12)
    dt = time.perf_counter() - t0
    gap = max(np.abs(fp - 1).max(), np.abs(ft - 1).max())
    verdict("01 uncoupled ground truth", gap <= 1e-10 and dt < 1.0,
            f"sup gap {gap:.1e}, {dt:.2f} s")


def test_criterion_02_zero_coupling_reduction(verdict):
    n = 128
    rng = np.random.default_rng(0)
    models = [
        SelfConsistentModel("expanding", perturbed_doubling(0.1), H, 0.0, n),
        SelfConsistentModel("additive-noise-circle", perturbed_doubling(0.1), H, 0.0, n,
                            NoiseKernel.gaussian(0.1)),
        SelfConsistentModel("reflecting-kernel-interval", tent(), (), 0.0, n,
                            NoiseKernel.truncated_gaussian(0.1)),
        SelfConsistentModel("two-population", (doubling(), perturbed_doubling(0.1)), (H, PRODUCT),
                            0.0, n),
    ]
    worst = 0.0
    for m in models:
        Ls = [m.uncoupled_matrix(k) for k in range(m.populations)]
        for _ in range(100):
            f = rng.random((m.populations, n)) + 0.05
            f /= f.mean(axis=1, keepdims=True)
            if m.populations == 1:
                out, ref = apply_self_consistent(m, f[0]), Ls[0] @ f[0]
                worst = max(worst, l1_distance(out, ref))
            else:
                out = apply_self_consistent(m, f)
                worst = max(worst, *(l1_distance(out[k], Ls[k] @ f[k]) for k in range(2)))
    verdict("02 zero-coupling reduction", worst <= 1e-12, f"max L1 {worst:.1e}")


@pytest.mark.xfail(strict=True, reason="outer ratio is not proportional to delta at delta=0.05; "
                   "see the project decision log")
def test_criterion_03_solver_cross_agreement(verdict):
    t0 = time.perf_counter()
    m = crit3_model()
    fp, tp = picard_fixed_point(m, tol=1e-11)
    ft, tt = thm_existence_iteration(m, tol=1e-11)
    _, th = thm_existence_iteration(m.with_delta(0.025), tol=1e-11)
    dt = time.perf_counter() - t0
    gap = l1_distance(fp, ft)
    rp, rt, rh = tp.rate(), tt.rate(), th.rate()
    factor = rt / rh
    ok = gap <= 1e-8 and 0 < rp < 1 and 0 < rt < 1 and 1.7 <= factor <= 2.3 and dt < 30
    verdict("03 solver cross-agreement", ok,
            f"L1 gap {gap:.1e}, ratios {rp:.3f}/{rt:.3f}, halving factor {factor:.2f}, {dt:.1f} s")


def test_criterion_04_first_order_law(verdict):
    t0 = time.perf_counter()
    m = crit3_model(0.0)
    R = linear_response(m).response
    fd = finite_difference_response(m, [1e-2, 5e-3, 2.5e-3], tol=1e-12)
    g = fd.gaps(R)
    factors = g[:-1] / g[1:]
    rel = np.abs(fd.limit - R).mean() / np.abs(R).mean()
    dt = time.perf_counter() - t0
    ok = np.all((factors >= 1.5) & (factors <= 3)) and rel <= 0.02 and dt < 120
    verdict("04 linear response first-order law", ok,
            f"factors {np.round(factors, 3).tolist()}, Richardson gap {rel:.2%}, {dt:.1f} s")


def test_criterion_05_zero_response_symmetry(verdict):
    m = SelfConsistentModel("expanding", doubling(), get_kernel("sine-difference"), 0.0, 1024)
    res = linear_response(m)
    fd = finite_difference_response(m, [1e-2, 5e-3, 2.5e-3], tol=1e-12)
    d = np.abs(res.derivative_term).mean()
    r = np.abs(res.response).mean()
    q = max(np.abs(v).mean() for v in fd.quotients)
    verdict("05 zero-response symmetry", d <= 1e-8 and r <= 1e-8 and q <= 1e-6,
            f"term {d:.1e}, R {r:.1e}, quotients {q:.1e}")


def test_criterion_06_noise_regularization_bound(verdict):
    n = 512
    worst = -np.inf
    for sigma in (0.05, 0.1):
        rho = NoiseKernel.truncated_gaussian(sigma)
        m = SelfConsistentModel("reflecting-kernel-interval", tent(), (), 0.1, n, rho)
        f, _ = thm_existence_iteration(m, tol=1e-11)
        worst = max(worst, f.max() - rho.sup)
        rho = NoiseKernel.gaussian(sigma)
        m = SelfConsistentModel("additive-noise-circle", perturbed_doubling(0.1), H, 0.1, n, rho)
        f, _ = thm_existence_iteration(m, tol=1e-11)
        worst = max(worst, f.max() - rho.on_grid(n).sup)
    verdict("06 noise regularization bound", worst <= 1e-6, f"max(sup f - sup rho) {worst:.3f}")


def test_criterion_07_convergence_to_equilibrium(verdict):
    n = 1024
    x = midpoints(n)
    L = ulam_matrix(doubling(), n)
    a1 = np.abs(L @ np.cos(2 * np.pi * x)).mean()
    a2 = np.abs(L @ (L @ np.cos(4 * np.pi * x))).mean()
    m = crit3_model()
    f, _ = picard_fixed_point(m, tol=1e-13)
    d = equilibrium_decay(m, 1 + 0.5 * np.cos(2 * np.pi * x), f, N=30)
    dd = convergence_to_equilibrium(L, np.cos(4 * np.pi * x), N=3)
    ok = a1 <= 1e-8 and a2 <= 1e-8 and dd.a[1] <= 1e-8 and d.gamma > 0
    verdict("07 convergence to equilibrium", ok,
            f"|L cos 2pi x| {a1:.1e}, |L^2 cos 4pi x| {a2:.1e}, coupled gamma {d.gamma:.3f}")


def test_criterion_08_contraction_matrix(verdict):
    ly = (0.5, 1.0)
    err = 0.0
    for delta in np.linspace(0.0, 1.0, 10):
        for n1 in range(1, 11):
            rep = contraction_matrix(ly, 1, 1, 1, 2.0 ** -n1, delta, n1)
            brute = np.max(np.linalg.eigvals(rep.matrix_M).real)
            err = max(err, abs(rep.rho - brute))
    ds = np.linspace(0, 2, 201)
    rhos = np.array([contraction_matrix(ly, 1, 1, 1, 2.0 ** -10, d, 10).rho for d in ds])
    mono = bool(np.all(np.diff(rhos) >= 0))
    d1 = critical_delta(ly, 1, 1, 1, 2.0 ** -10, 10, grid_points=200)
    d2 = critical_delta(ly, 1, 1, 1, 2.0 ** -10, 10, grid_points=4000)
    stable = f"{d1:.3g}" == f"{d2:.3g}"
    verdict("08 contraction matrix", err <= 1e-12 and mono and stable,
            f"eig err {err:.1e}, monotone {mono}, delta* {d1:.6g} vs {d2:.6g}")


def test_criterion_09_particle_oracle(verdict):
    t0 = time.perf_counter()
    bins = 64
    rho = NoiseKernel.truncated_gaussian(0.1)
    m = SelfConsistentModel("reflecting-kernel-interval", tent(), (), 0.1, 512, rho)
    f, _ = thm_existence_iteration(m, tol=1e-12)
    ref = ulam_project(f, bins)
    errs = []
    for seed in range(5):
        sim = simulate(ParticleEnsemble.uniform(200_000, seed), tent(), None, 0.1, steps=100,
                       bins=bins, burn_in=200, noise=rho, mode="interval")
        errs.append(np.abs(sim.averaged - ref).mean())
    dt = time.perf_counter() - t0
    verdict("09 particle-oracle consistency", max(errs) <= 0.02 and dt < 120,
            f"max L1 {max(errs):.4f} over 5 seeds, {dt:.1f} s")


def test_criterion_10_optimal_coupling_certificate(verdict):
    n = 512
    m = SelfConsistentModel("expanding", perturbed_doubling(0.1), H, 0.0, n)
    c = np.cos(2 * np.pi * midpoints(n))
    basis = PerturbationBasis()
    ga = response_gradient(c, m, basis, "adjoint")
    gm = response_gradient(c, m, basis, "per-mode")
    adj = np.abs(ga.g - gm.g).max()
    P = ConvexConstraint("ball", radius=1.0)
    out = optimize_convex(gm.g, P, gm.weights, samples=10_000, seed=1)
    again = optimize_convex(ga.g, P, ga.weights, samples=10_000, seed=2)
    rng = np.random.default_rng(3)
    asc = projected_ascent(gm.g, P, gm.weights, start=0.1 * rng.standard_normal(basis.size))
    agree = max(np.abs(out.coeffs - again.coeffs).max(), np.abs(out.coeffs - asc.coeffs).max())
    dom = out.certificate["dominates"] and again.certificate["dominates"]
    verdict("10 optimal coupling certificate", dom and agree <= 1e-8 and adj <= 1e-9,
            f"dominates {dom}, run gap {agree:.1e}, adjoint gap {adj:.1e}")


def test_criterion_11_two_population(verdict):
    n = 512
    maps = (doubling(), perturbed_doubling(0.1))
    m = SelfConsistentModel("two-population", maps, (PRODUCT, PRODUCT), 0.0, n)
    f0, _ = thm_existence_iteration(m, tol=1e-13)
    single = [thm_existence_iteration(SelfConsistentModel("expanding", T, PRODUCT, 0.0, n),
                                      tol=1e-13)[0] for T in maps]
    red = max(np.abs(f0[k] - single[k]).mean() for k in range(2))
    ds = np.array([0.03, 0.015, 0.0075])
    gaps, converged = [], True
    for d in ds:
        f, tr = thm_existence_iteration(m.with_delta(d), f0, tol=1e-12)
        converged &= tr.converged
        gaps.append(np.abs(f - f0).mean(axis=1).sum())
    slope = np.polyfit(np.log(ds), np.log(gaps), 1)[0]
    verdict("11 two-population reduction", red <= 1e-10 and converged and slope >= 0.9,
            f"reduction gap {red:.1e}, slope {slope:.3f}")


def test_criterion_12_resolvent(verdict):
    n = 256
    L = ulam_matrix(perturbed_doubling(0.1), n).toarray()
    res = Resolvent(L)
    rng = np.random.default_rng(0)
    worst_res, worst_neu, checked = 0.0, 0.0, 0
    for _ in range(100):
        v = rng.standard_normal(n)
        v -= v.mean()
        u = res.solve(v)
        worst_res = max(worst_res, np.abs(u - L @ u - v).mean())
        un, _, tail = neumann_series(L, v, tol=1e-13)
        if tail <= 1e-9:
            checked += 1
            worst_neu = max(worst_neu, np.abs(un - u).mean())
    ok = worst_res <= 1e-8 and worst_neu <= 1e-8 and checked > 0
    verdict("12 resolvent correctness", ok,
            f"residual {worst_res:.1e}, Neumann gap {worst_neu:.1e} on {checked} cases")

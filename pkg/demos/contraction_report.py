"""Balanced-norm contraction for the coupled doubling map.

Fits the one-step inequality on a family of frozen operators, estimates the
coupling constant, and reports the largest delta for which the 2x2 matrix
still contracts.
"""
import numpy as np

from sctransfer.analysis import (contraction_matrix, convergence_to_equilibrium, critical_delta,
                                 estimate_coupling_constant, fit_ly_coefficients, frozen_family,
                                 random_test_functions)
from sctransfer.maps import doubling, get_kernel
from sctransfer.self_consistent import SelfConsistentModel

n, n1, delta = 256, 6, 0.01
m = SelfConsistentModel("expanding", doubling(), get_kernel("one-plus-cos-times-sin"), delta, n)
ly = fit_ly_coefficients(frozen_family(m, 10), "W11", "L1")
K = estimate_coupling_constant(m, samples=10)
L0 = m.uncoupled_matrix(0)
G = random_test_functions(n, 20, np.random.default_rng(0), zero_mean=True)
a_n1 = max(convergence_to_equilibrium(L0, g, N=n1).a[n1 - 1] for g in G)
print(f"lambda={ly.lambda1:.4f} B={ly.B:.4f} K={K:.3f} a_n1={a_n1:.2e}")
rep = contraction_matrix((ly.lambda1, ly.B), K, 1.0, 1.0, a_n1, delta, n1)
print(rep.to_json())
print("critical delta:", critical_delta((ly.lambda1, ly.B), K, 1.0, 1.0, a_n1, n1))

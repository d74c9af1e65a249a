"""Coupling direction that most increases the mean of cos(2 pi x)."""
import numpy as np

from sctransfer.densities import midpoints
from sctransfer.maps import get_kernel, perturbed_doubling
from sctransfer.optimal_coupling import (ConvexConstraint, PerturbationBasis, optimize_convex,
                                         response_gradient)
from sctransfer.self_consistent import SelfConsistentModel

n = 512
# the model's own coupling is irrelevant for the gradient; any kernel will do
m = SelfConsistentModel("expanding", perturbed_doubling(0.1), get_kernel("sine-difference"), 0.0, n)
basis = PerturbationBasis(degree=8, s=7.0)
grad = response_gradient(np.cos(2 * np.pi * midpoints(n)), m, basis, "adjoint")

for P in (ConvexConstraint("ball", radius=1.0),
          ConvexConstraint("ball-box", radius=1.0, lower=-0.05, upper=0.05)):
    out = optimize_convex(grad.g, P, grad.weights)
    top = np.argsort(-np.abs(out.coeffs))[:4]
    print(f"{P.kind}: J={out.J:.6f}  dominates 1e4 samples: {out.certificate['dominates']}")
    for k in top:
        print(f"   {basis.labels[k]}  {out.coeffs[k]:+.4f}")

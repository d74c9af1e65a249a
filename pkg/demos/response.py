"""Linear response of the coupled doubling map against finite differences."""
import numpy as np

from sctransfer.densities import midpoints
from sctransfer.maps import doubling, get_kernel
from sctransfer.response import finite_difference_response, linear_response
from sctransfer.self_consistent import SelfConsistentModel

n = 1024
x = midpoints(n)
m = SelfConsistentModel("expanding", doubling(), get_kernel("one-plus-cos-times-sin"), 0.0, n)
res = linear_response(m, np.cos(2 * np.pi * x))
R = res.response
print(f"resolvent residual {res.resolvent_residual:.1e}, condition {res.condition:.1f}")
print(f"d/d delta of the mean of cos(2 pi x): {res.observable_value:.6f}")

fd = finite_difference_response(m, [1e-2, 5e-3, 2.5e-3], tol=1e-12)
for d, g in zip(fd.deltas, fd.gaps(R)):
    print(f"delta={d:<7g} |quotient - R|_1 = {g:.4e}")
print(f"Richardson limit vs R: {np.abs(fd.limit - R).mean() / np.abs(R).mean():.3%} relative L1")

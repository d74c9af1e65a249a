"""Agent simulation of the noisy tent system against the operator fixed point."""
import time

import numpy as np

from sctransfer.densities import ulam_project
from sctransfer.maps import tent
from sctransfer.particle_sim import ParticleEnsemble, simulate
from sctransfer.self_consistent import SelfConsistentModel, thm_existence_iteration
from sctransfer.transfer_ops import NoiseKernel

rho = NoiseKernel.truncated_gaussian(0.1)
m = SelfConsistentModel("reflecting-kernel-interval", tent(), (), 0.1, 512, rho)
f, _ = thm_existence_iteration(m, tol=1e-12)
ref = ulam_project(f, 64)
for N in (10_000, 50_000, 200_000):
    t0 = time.perf_counter()
    sim = simulate(ParticleEnsemble.uniform(N, 0), tent(), None, 0.1, steps=100, bins=64,
                   noise=rho, mode="interval")
    print(f"N={N:>7d}  L1 to operator {np.abs(sim.averaged - ref).mean():.4f}  "
          f"({time.perf_counter() - t0:.1f} s)")

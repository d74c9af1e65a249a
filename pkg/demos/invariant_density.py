"""Fixed densities of the doubling map under mean-field coupling.

Runs both solvers for a few coupling strengths and writes the densities to
``invariant_density.csv`` (one column per delta).
"""
import sys

import numpy as np

from sctransfer.densities import midpoints
from sctransfer.io_utils import write_csv
from sctransfer.maps import doubling, get_kernel
from sctransfer.self_consistent import (SelfConsistentModel, l1_distance, picard_fixed_point,
                                        thm_existence_iteration)

n = 1024
deltas = [0.0, 0.02, 0.05, 0.1]
h = get_kernel("one-plus-cos-times-sin")
cols = []
for d in deltas:
    m = SelfConsistentModel("expanding", doubling(), h, d, n)
    fp, tp = picard_fixed_point(m, tol=1e-11)
    ft, tt = thm_existence_iteration(m, tol=1e-11)
    print(f"delta={d:<5} picard steps={len(tp.iterates):3d} rate={tp.rate():.3f}  "
          f"outer rate={tt.rate():.3f}  solver gap={l1_distance(fp, ft):.1e}  "
          f"distance to uniform={np.abs(fp - 1).mean():.4f}")
    cols.append(fp)

out = sys.argv[1] if len(sys.argv) > 1 else "invariant_density.csv"
write_csv(out, ["x"] + [f"delta={d:g}" for d in deltas],
          np.column_stack([midpoints(n)] + cols).tolist())
print("wrote", out)

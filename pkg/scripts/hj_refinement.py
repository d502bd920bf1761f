"""Grid refinement of the Hamilton-Jacobi solver against the Riccati ODE (scalar even case).

Usage: python3 scripts/hj_refinement.py
"""

import time

import numpy as np

from qeclosure.closure import NearEqMatrices
from qeclosure.reduced import ClosureConfig, InitialCondition, integrate_near_M
from qeclosure.verify import HJGrid, hj_solve_1d

EPS, B, LAM0 = 0.5, 1e3, 1.0

if __name__ == "__main__":
    mats = NearEqMatrices([[1.0]], [[0.0]], [[1.0]])
    t_grid = np.linspace(0, 4, 41)
    ref = integrate_near_M(mats, InitialCondition([LAM0], [[B]]),
                           ClosureConfig(EPS, regime="near_M", t_span=(0, 4), dt=1e-3, record_every=100))
    lam, M = ref.lambda_hat[:, 0], ref.M_hat[:, 0, 0]
    print(f"{'points':>7} {'minimizer':>11} {'curvature':>11} {'steps':>7} {'seconds':>8}")
    for n in (250, 500, 1000, 2000, 4000):
        t0 = time.perf_counter()
        hj = hj_solve_1d(mats, EPS, HJGrid((-0.5, 1.5), n, penalty_b=B), LAM0, t_grid)
        e_min = np.max(np.abs(hj.minimizer - lam) / np.abs(lam))
        e_curv = np.max(np.abs(hj.curvature - M) / M)
        print(f"{n:>7} {e_min:>11.3e} {e_curv:>11.3e} {hj.steps:>7} {time.perf_counter() - t0:>8.2f}")

"""Two-sided radial SLE through z and the two-point correlation F(z, w).

Run:  python demos/two_sided.py
"""
from slenat import SleParams
from slenat.conditioned import (
    estimate_F,
    estimate_two_point_green,
    sample_two_sided_radial,
)

params = SleParams(8 / 3)
z, w = 1j, 0.5 + 0.5j

run = sample_two_sided_radial(z, eps=0.01, seed=3, params=params)
print(f"stopped at capacity time {run.tau:.4f}; tip {run.trace.points[-1]:.4f} (target {z})")

F = estimate_F(z, w, eps=0.05, n=2000, seed=0, params=params, refine=True)
print(f"F(z, w) = {F.mean:.4f} +/- {F.stderr:.4f}  (eps/2 gives {F.extra['refined']:.4f})")

G2 = estimate_two_point_green(z, w, eps=0.05, n=2000, seed=0, params=params)
print(f"G(z, w) = {G2.mean:.4f} +/- {G2.stderr:.4f}")

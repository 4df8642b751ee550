"""Sample an SLE(8/3) driver, extract the curve and watch M_t(z) along it.

Run:  python demos/trace_and_green.py
"""
import numpy as np

from slenat import SleParams
from slenat.loewner import extract_trace, flow_point, sample_driving
from slenat.observables import green_one, martingale_one

params = SleParams(8 / 3)
drv = sample_driving(params, horizon=1.0, step=2 ** -12, seed=11)
trace = extract_trace(drv, params)
print(f"curve has {trace.points.size} points; tip at {trace.points[-1]:.4f}")

z = 0.3 + 0.8j
print(f"G({z}) = {green_one(params, z).value:.5f}")
fl = flow_point(drv, z, params)
for k in np.linspace(0, len(fl) - 1, 9).astype(int):
    if np.isfinite(fl.Z[k]):
        print(f"t = {fl.times[k]:.3f}  Upsilon = {fl.upsilon[k]:.4f}  M_t = {martingale_one(fl[k], params):.4f}")

# the mean of the stopped martingale stays at G(z)
from slenat.batch import run_batch

res = run_batch(params, [z], 4000, seed=1, eps=0.2, horizon=1.0)
m = res.martingale(0)
print(f"mean M over 4000 paths = {m.mean():.4f} +/- {m.std(ddof=1) / np.sqrt(m.size):.4f}")

"""Theta_{t,n}(D) on one driver, next to the Minkowski-type estimate.

Needs the cached phi grid:  slenat cache build
Run:  python demos/natural_parametrization.py
"""
from slenat import SleParams
from slenat.harness import PhiSpec, load_phi
from slenat.loewner import sample_driving
from slenat.natparam import BoxDomain, QuadGrid, Stepping, theta_levels

params = SleParams(8 / 3)
phi = load_phi(PhiSpec())
D = BoxDomain(-1.0, 1.0, 0.25, 1.25)
drv = sample_driving(params, 1.0, 2 ** -18, seed=5)

r = theta_levels(drv, D, 1.0, [4, 5, 6], phi, QuadGrid(40, 20), params, eps_list=[0.2, 0.1, 0.05],
                 stepping=Stepping())
for n, th in r["theta"].items():
    print(f"Theta_(1,{n}) = {th[-1]:.4f}")
print(f"Psi_0 = {r['psi'][0]:.4f}   Psi_1 = {r['psi'][-1]:.4f}")
for eps, v in r["minkowski"].items():
    print(f"Minkowski estimate, eps = {eps:<5}: {v:.4f}")

"""One-dimensional diffusions behind the radial parametrization.

The angle of a two-sided radial SLE in radial time solves

    dX = r cot(X) dt + dB,   r = 2a > 1/2,

which never leaves ``(0, pi)`` and has invariant density
``C_{2r} sin(x)^{2r}``.  Near either endpoint it behaves like the Bessel
process ``dX = r/X dt + dB``; the simulator uses the exact Bessel transition
(a scaled noncentral chi-square) there instead of an Euler step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy import integrate, special

from .core import McEstimate, SleParams

BOUNDARY_LAYER = 0.05


@dataclass(frozen=True)
class DiffusionConstants:
    C2r: float
    cstar: float
    quad_error: float


def constants(params: SleParams) -> DiffusionConstants:
    """``C_{2r} = 1/int sin^{2r}`` and ``c* = 2/int sin^{4a}`` on ``(0, pi)``."""
    val, err = integrate.quad(lambda y: math.sin(y) ** (2.0 * params.r), 0.0, math.pi,
                              epsabs=1e-13, epsrel=1e-13)
    c2r = 1.0 / val
    return DiffusionConstants(c2r, 2.0 * c2r, err * c2r * c2r)


def v_bound(t: float, x: float, params: SleParams) -> float:
    """Comparison function ``max(x, sqrt(min(t, 1)))^(1 - 4a)``."""
    if t < 0 or x <= 0:
        raise ValueError("need t >= 0 and x > 0")
    return max(x, math.sqrt(min(t, 1.0))) ** (1.0 - 4.0 * params.a)


def path_seeds(seed: int, n: int, stream: int = 0) -> np.ndarray:
    """32-bit seeds for numba kernels, one per path index."""
    return np.array([np.random.SeedSequence(int(seed), spawn_key=(int(stream), i)).generate_state(1)[0]
                     for i in range(n)], dtype=np.uint32)


@njit(cache=True)
def _bessel_exact(y, r, h):
    # exact transition of dY = r/Y dt + dB (dimension 2r + 1) over time h
    g = np.random.standard_normal() + y / math.sqrt(h)
    return math.sqrt(h * (g * g + np.random.chisquare(2.0 * r)))


@njit(cache=True)
def _cot_step(x, r, h, layer):
    y = min(x, math.pi - x)
    if y >= layer:
        prop = x + r / math.tan(x) * h + math.sqrt(h) * np.random.standard_normal()
        if 0.0 < prop < math.pi:
            return prop, False
        y_new = _bessel_exact(y, r, h)
        return (y_new if x < math.pi / 2 else math.pi - y_new), True
    y_new = _bessel_exact(y, r, h)
    return (y_new if x < math.pi / 2 else math.pi - y_new), True


@njit(cache=True)
def _cot_endpoints(x0, r, times, dt, seeds, layer):
    n = seeds.size
    out = np.empty((times.size, n))
    nb = 0
    for i in range(n):
        np.random.seed(seeds[i])
        x, s = x0, 0.0
        for j in range(times.size):
            while s < times[j] - 1e-13:
                h = min(dt, times[j] - s)
                x, used = _cot_step(x, r, h, layer)
                nb += used
                s += h
            out[j, i] = x
    return out, nb


@njit(cache=True)
def _cot_paths(x0, r, nsteps, dt, seeds, layer):
    n = seeds.size
    out = np.empty((n, nsteps + 1))
    for i in range(n):
        np.random.seed(seeds[i])
        x = x0
        out[i, 0] = x
        for k in range(nsteps):
            x, _ = _cot_step(x, r, dt, layer)
            out[i, k + 1] = x
    return out


def simulate_cot_sde(theta0: float, t: float, dt: float, seed: int, params: SleParams,
                     n: int = 1) -> np.ndarray:
    """Paths of ``dX = r cot X dt + dB`` on the grid ``0, dt, ..., t``.

    Returns an array of shape ``(n, nsteps + 1)``.
    """
    r = params.r
    if r <= 0.5:
        raise ValueError("the angle diffusion needs r = 2a > 1/2")
    if not 0 < theta0 < math.pi:
        raise ValueError("theta0 must lie in (0, pi)")
    nsteps = max(1, int(round(t / dt)))
    return _cot_paths(float(theta0), r, nsteps, t / nsteps, path_seeds(seed, n), BOUNDARY_LAYER)


def cot_sde_endpoints(theta0: float, times, dt: float, seed: int, params: SleParams, n: int):
    """Values of the angle diffusion at each of ``times`` (shape ``(len(times), n)``)."""
    if params.r <= 0.5:
        raise ValueError("the angle diffusion needs r = 2a > 1/2")
    times = np.atleast_1d(np.asarray(times, dtype=float))
    out, _ = _cot_endpoints(float(theta0), params.r, times, float(dt), path_seeds(seed, n),
                            BOUNDARY_LAYER)
    return out


def psi_estimate(t: float, x: float, n: int, seed: int, params: SleParams,
                 dt: float = 1e-4) -> McEstimate:
    """Monte Carlo estimate of ``psi(t, x) = E^x[sin(X_t)^(1 - 2r)]``."""
    if n < 1:
        raise ValueError("n must be positive")
    if not 0 < x < math.pi:
        raise ValueError("x must lie in (0, pi)")
    expo = 1.0 - 2.0 * params.r
    if t == 0:
        return McEstimate(math.sin(x) ** expo, 0.0, n, (seed,))
    xt = cot_sde_endpoints(x, [t], dt, seed, params, n)[0]
    return McEstimate.from_samples(np.sin(xt) ** expo, (seed,), t=t, x=x, dt=dt)


def psi_series(t, x, params: SleParams, tol: float = 1e-17, nmax: int = 4000):
    """Eigenfunction expansion of ``psi(t, x)`` (reference values, ``t > 0``).

    The generator ``(1/2) d^2 + r cot(x) d`` has eigenfunctions
    ``C_n^{(r)}(cos x)`` (Gegenbauer) with eigenvalues ``-n (n + 2r) / 2``, and
    against the invariant density the initial function pairs to
    ``int_{-1}^{1} C_n^{(r)}(u) du``.  Only even ``n`` contribute.
    """
    r = params.r
    x = np.asarray(x, dtype=float)
    if t <= 0:
        return np.sin(x) ** (1.0 - 2.0 * r)
    u = np.cos(x)
    total = np.zeros_like(u)
    top = 0
    while top + 2 <= nmax and math.exp(-(top + 2) * (top + 2 + 2 * r) * t / 2.0) >= tol:
        top += 2
    # exact for the polynomial pairings up to degree top
    nodes, weights = np.polynomial.legendre.leggauss(top // 2 + 2)
    for n in range(0, top + 1, 2):
        decay = math.exp(-n * (n + 2 * r) * t / 2.0)
        num = float(np.dot(weights, special.eval_gegenbauer(n, r, nodes)))
        lognorm = (math.log(math.pi) + (1 - 2 * r) * math.log(2.0) + special.gammaln(n + 2 * r)
                   - special.gammaln(n + 1) - math.log(n + r) - 2 * special.gammaln(r))
        total += decay * num * math.exp(-lognorm) * special.eval_gegenbauer(n, r, u)
    return total[()] if total.ndim == 0 else total


@njit(cache=True)
def _bessel_hits(x0, r, t, dt, seeds, c_step):
    n = seeds.size
    hit = np.full(n, np.inf)
    inv_int = np.zeros(n)
    xmax = np.zeros(n)
    for i in range(n):
        np.random.seed(seeds[i])
        x, s, acc, top = x0, 0.0, 0.0, x0
        while s < t:
            h = min(dt, c_step * x * x, t - s)
            h = max(h, 1e-14)
            acc += h / x
            x = x + r / x * h + math.sqrt(h) * np.random.standard_normal()
            s += h
            if x <= 0.0:
                hit[i] = s
                break
            top = max(top, x)
        inv_int[i] = acc
        xmax[i] = top
    return hit, inv_int, xmax


@dataclass
class BesselRun:
    hit_time: np.ndarray
    inv_integral: np.ndarray
    sup: np.ndarray

    @property
    def hit(self) -> np.ndarray:
        return np.isfinite(self.hit_time)


def simulate_bessel(r: float, x0: float, t: float, dt: float, seed: int, n: int = 1,
                    c_step: float = 0.01) -> BesselRun:
    """Euler paths of ``dX = r/X dt + dB`` run until ``t`` or the first hit of 0.

    Steps shrink as ``c_step * X^2`` near the origin.  Reports the hitting
    time (``inf`` if none), ``int_0^{T} ds / X_s`` and ``sup X``.
    """
    if x0 <= 0:
        raise ValueError("x0 must be positive")
    hit, acc, top = _bessel_hits(float(x0), float(r), float(t), float(dt), path_seeds(seed, n),
                                 float(c_step))
    return BesselRun(hit, acc, top)


@njit(cache=True)
def _bm_weights(x0, r, t, dt, seeds, sine):
    n = seeds.size
    nsteps = int(round(t / dt))
    logw = np.full((n, nsteps + 1), -np.inf)
    xs = np.full((n, nsteps + 1), np.nan)
    c = r * (r - 1.0) / 2.0
    for i in range(n):
        np.random.seed(seeds[i])
        x, integ = x0, 0.0
        for k in range(nsteps + 1):
            s = k * dt
            if sine:
                if not (0.0 < x < math.pi):
                    break
                sx = math.sin(x)
                logw[i, k] = r * math.log(sx) - c * integ + 0.5 * r * r * s
                integ += dt / (sx * sx)
            else:
                if not x > 0.0:
                    break
                logw[i, k] = r * math.log(x) - c * integ
                integ += dt / (x * x)
            xs[i, k] = x
            x = x + math.sqrt(dt) * np.random.standard_normal()
    return xs, logw


def girsanov_weight_paths(mode: str, x0: float, t: float, dt: float, seed: int,
                          params: SleParams, n: int = 1):
    """Brownian paths with their log-weights.

    ``mode="sine"``: ``log M_t = r log sin X - r(r-1)/2 int sin^-2 + r^2 t/2``;
    ``mode="bessel"``: ``log N_t = r log X - r(r-1)/2 int X^-2``.
    Paths that leave the domain get weight 0 (log-weight ``-inf``) from then on.
    Returns ``(X, logw)`` of shape ``(n, nsteps + 1)``.
    """
    if mode not in ("sine", "bessel"):
        raise ValueError("mode must be 'sine' or 'bessel'")
    return _bm_weights(float(x0), params.r, float(t), float(dt), path_seeds(seed, n, stream=7),
                       mode == "sine")


def psi_table_csv(rows, path) -> None:
    """Write ``(t, x, McEstimate)`` rows as ``t,x,psi,stderr,n``."""
    with open(path, "w") as fh:
        fh.write("t,x,psi,stderr,n\n")
        for t, x, est in rows:
            fh.write(f"{float(t)!r},{float(x)!r},{float(est.mean)!r},{float(est.stderr)!r},{est.n}\n")

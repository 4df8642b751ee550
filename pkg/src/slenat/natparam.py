"""The function phi, the discretized natural parametrization and the
Minkowski-type estimator.

``phi(z)`` is the deficiency of ``M`` over unit capacity time,
``E[M_1(z)] = G(z) (1 - phi(z))``.  Under two-sided radial SLE through ``z``
it equals ``P*{T_z <= 1}``, and scaling gives
``phi(r e^{i theta}) = P*{T_{e^{i theta}} <= 1/r^2}``, so one hitting-time
sample per angle determines ``phi`` along the whole ray.

The discretized natural parametrization at level ``n`` adds, at every
``s = (j-1) 2^-n``, the expected loss of ``Psi(D)`` over the next dyadic
interval.  By the Markov property and scaling this loss is

    int_D M_s(w) phi(Z_s(w) 2^(n/2)) dA(w),

which is what :func:`theta_tn` integrates on a grid over ``D`` (the
``pullback`` route).  The ``zspace`` route evaluates the same quantity in
the mapped coordinates through the inverse Loewner maps.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .batch import STOPPED, run_batch
from .conditioned import STREAM_PLAIN, STREAM_RADIAL, radial_batch
from .core import McEstimate, NotComputedError, SleParams, combined_z
from .loewner import DrivingPath, extract_trace, inverse_map
from .observables import green

PHI_FORMAT = 1


# ---------------------------------------------------------------- domains --

@dataclass(frozen=True)
class BoxDomain:
    """Rectangle ``[x0, x1] x [y0, y1]`` with ``y0 > 0``."""

    x0: float
    x1: float
    y0: float
    y1: float

    def __post_init__(self):
        if not (self.x0 < self.x1 and 0 < self.y0 < self.y1):
            raise ValueError("need x0 < x1 and 0 < y0 < y1")

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def contains(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=complex)
        return (z.real >= self.x0) & (z.real <= self.x1) & (z.imag >= self.y0) & (z.imag <= self.y1)

    def scaled(self, r: float) -> "BoxDomain":
        return BoxDomain(r * self.x0, r * self.x1, r * self.y0, r * self.y1)


@dataclass(frozen=True)
class QuadGrid:
    """Tensor Gauss-Legendre rule on ``nx * ny`` cells (``order=1`` is the midpoint rule)."""

    nx: int
    ny: int
    order: int = 1

    def nodes(self, D: BoxDomain):
        g, wg = np.polynomial.legendre.leggauss(self.order)
        hx, hy = (D.x1 - D.x0) / self.nx, (D.y1 - D.y0) / self.ny
        xs = (D.x0 + hx * (np.arange(self.nx)[:, None] + (g[None, :] + 1) / 2)).ravel()
        ys = (D.y0 + hy * (np.arange(self.ny)[:, None] + (g[None, :] + 1) / 2)).ravel()
        wx = np.tile(wg * hx / 2, self.nx)
        wy = np.tile(wg * hy / 2, self.ny)
        z = (xs[None, :] + 1j * ys[:, None]).ravel()
        w = (wy[:, None] * wx[None, :]).ravel()
        return z, w

    def spec(self) -> dict:
        return {"nx": self.nx, "ny": self.ny, "order": self.order}


# -------------------------------------------------------------- phi grid --

def _default_thetas() -> np.ndarray:
    return np.concatenate([np.geomspace(0.02, 0.3, 6), np.linspace(0.4, math.pi / 2, 10)])


@dataclass
class PhiGrid:
    """Tabulated ``phi`` on a log-polar grid over ``arg z in (0, pi/2]``.

    Values for ``arg z > pi/2`` use the reflection ``phi(-conj z) = phi(z)``.
    Lookup is bilinear in ``(log|z|, arg z)``; outside the radial range the
    nearest row is used, except that ``phi = 0`` exactly once
    ``Im z > sqrt(2a)`` (the curve needs capacity ``y^2/(2a)`` to reach height
    ``y``).
    """

    kappa: float
    eps: float
    thetas: np.ndarray
    logr: np.ndarray
    values: np.ndarray
    se: np.ndarray
    n_paths: int
    seeds: tuple
    extra: dict = field(default_factory=dict)

    @property
    def params(self) -> SleParams:
        return SleParams(self.kappa)

    @staticmethod
    def key_for(kappa: float, eps: float, thetas, logr) -> str:
        spec = {"kappa": round(float(kappa), 12), "eps": round(float(eps), 12),
                "thetas": [round(float(t), 12) for t in thetas], "logr": [round(float(v), 12) for v in logr]}
        return hashlib.sha256(json.dumps(spec, sort_keys=True).encode()).hexdigest()[:16]

    @property
    def key(self) -> str:
        return self.key_for(self.kappa, self.eps, self.thetas, self.logr)

    def __call__(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=complex)
        th = np.angle(z)
        th = np.minimum(th, math.pi - th)
        lr = np.log(np.abs(z))
        ti = np.clip(th, self.thetas[0], self.thetas[-1])
        ri = np.clip(lr, self.logr[0], self.logr[-1])
        i = np.clip(np.searchsorted(self.thetas, ti) - 1, 0, self.thetas.size - 2)
        j = np.clip(np.searchsorted(self.logr, ri) - 1, 0, self.logr.size - 2)
        ft = (ti - self.thetas[i]) / (self.thetas[i + 1] - self.thetas[i])
        fr = (ri - self.logr[j]) / (self.logr[j + 1] - self.logr[j])
        v = self.values
        out = ((1 - ft) * (1 - fr) * v[i, j] + ft * (1 - fr) * v[i + 1, j]
               + (1 - ft) * fr * v[i, j + 1] + ft * fr * v[i + 1, j + 1])
        out = np.where(z.imag ** 2 > 2 * self.params.a, 0.0, out)
        out = np.where(z.imag > 0, out, 0.0)
        return out[()] if out.ndim == 0 else out

    def to_json(self, path) -> None:
        doc = {"format": PHI_FORMAT, "key": self.key,
               "header": {"kappa": self.kappa, "eps": self.eps, "thetas": self.thetas.tolist(),
                          "logr": self.logr.tolist(), "n_paths": self.n_paths, "seeds": list(self.seeds),
                          "extra": self.extra},
               "body": {"values": self.values.ravel().tolist(), "se": self.se.ravel().tolist()}}
        doc["digest"] = _body_digest(doc["body"])
        with open(path, "w") as fh:
            json.dump(doc, fh)

    @classmethod
    def from_json(cls, path) -> "PhiGrid":
        with open(path) as fh:
            doc = json.load(fh)
        h, b = doc["header"], doc["body"]
        shape = (len(h["thetas"]), len(h["logr"]))
        grid = cls(h["kappa"], h["eps"], np.array(h["thetas"]), np.array(h["logr"]),
                   np.array(b["values"]).reshape(shape), np.array(b["se"]).reshape(shape),
                   h["n_paths"], tuple(h["seeds"]), h.get("extra", {}))
        if doc.get("key") != grid.key:
            raise ValueError("phi grid file does not match its cache key (stale or corrupted)")
        if doc.get("digest") != _body_digest(b):
            raise ValueError("phi grid values do not match their digest (corrupted)")
        return grid


def _body_digest(body: dict) -> str:
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]


def hitting_times(theta: float, n: int, eps: float, seed: int, params: SleParams,
                  stream: int = STREAM_RADIAL) -> np.ndarray:
    """``tau`` of two-sided radial runs to ``e^{i theta}`` with ``Upsilon <= eps sin(theta)``.

    Half of the runs go to ``e^{i(pi - theta)}``; by reflection they sample
    the same law.  Runs that fail to stop hold ``inf``.
    """
    out = []
    for k, th in enumerate((theta, math.pi - theta)):
        m = n // 2 + (n % 2 if k == 0 else 0)
        if m == 0:
            continue
        z = complex(math.cos(th), math.sin(th))
        res = radial_batch(z, eps * z.imag, m, seed, params, stream=stream + 100 * k)
        out.append(np.where(res.status == STOPPED, res.t, np.inf))
    return np.concatenate(out)


def build_phi_grid(params: SleParams, n_paths: int, seed: int, eps: float = 0.02, thetas=None,
                   n_r: int = 64, r_min: float = 1 / 16, se_cap: float = None) -> PhiGrid:
    """Tabulate ``phi`` from hitting-time samples of two-sided radial SLE."""
    thetas = _default_thetas() if thetas is None else np.asarray(thetas, dtype=float)
    if np.any(thetas <= 0) or np.any(thetas > math.pi / 2) or np.any(np.diff(thetas) <= 0):
        raise ValueError("thetas must increase within (0, pi/2]")
    r_max = math.sqrt(2 * params.a) / math.sin(thetas[0])
    logr = np.linspace(math.log(r_min), math.log(r_max), n_r)
    vals = np.empty((thetas.size, n_r))
    unstopped = 0
    for i, th in enumerate(thetas):
        T = np.sort(hitting_times(th, n_paths, eps, seed + i, params))
        unstopped += int(np.sum(~np.isfinite(T)))
        vals[i] = np.searchsorted(T, np.exp(-2 * logr), side="right") / T.size
    se = np.sqrt(vals * (1 - vals) / n_paths)
    cap = 0.5 / math.sqrt(n_paths) if se_cap is None else se_cap
    grid = PhiGrid(params.kappa, eps, thetas, logr, vals, se, n_paths, (seed,),
                   {"unstopped": unstopped, "se_cap": cap, "max_se": float(se.max())})
    if se.max() > cap:
        grid.extra["partial"] = True
    return grid


def verify_phi_cells(grid: PhiGrid, cells: int = 5, factor: int = 4, seed: int = 0) -> dict:
    """Recompute ``cells`` random grid cells with ``factor`` times the paths.

    A cell passes when the two values agree within 3 combined standard errors.
    """
    rng = np.random.default_rng(seed)
    params = grid.params
    rows = []
    ok = True
    for _ in range(cells):
        i, j = int(rng.integers(grid.thetas.size)), int(rng.integers(grid.logr.size))
        n = factor * grid.n_paths
        T = hitting_times(grid.thetas[i], n, grid.eps, 10_000 + seed * 97 + i * 31 + j, params)
        v = float(np.mean(T <= math.exp(-2 * grid.logr[j])))
        se = math.sqrt(v * (1 - v) / n)
        tot = math.hypot(se, grid.se[i, j])
        z = 0.0 if tot == 0 else (v - grid.values[i, j]) / tot
        good = abs(v - grid.values[i, j]) <= 3 * tot + 1e-12
        ok &= good
        rows.append({"theta": float(grid.thetas[i]), "logr": float(grid.logr[j]), "cached": float(grid.values[i, j]),
                     "fresh": v, "z": z, "ok": bool(good)})
    return {"ok": bool(ok), "cells": rows}


def estimate_phi(z: complex, n: int, eps: float, seed: int, params: SleParams,
                 horizon: float = 1.0) -> McEstimate:
    """``P*_z{tau_eps <= horizon}`` under two-sided radial SLE, cross-checked.

    The cross-check is the plain-SLE estimate ``1 - E[M_h 1{tau_eps > h}] / G(z)``
    of the same quantity; ``extra["cross_ok"]`` records agreement within 3
    combined standard errors.  ``horizon = t`` gives the deficiency of
    ``E[M_t(z)]``, which by scaling is ``phi(z / sqrt(t))``.
    """
    z = complex(z)
    if not z.imag > 0:
        raise ValueError("z must lie in the upper half plane")
    rad = radial_batch(z, eps, n, seed, params)
    hit = ((rad.status == STOPPED) & (rad.t <= horizon)).astype(float)
    est = McEstimate.from_samples(hit, (seed,))
    plain = run_batch(params, [z], n, seed, mode="plain", eps=eps, horizon=horizon, stream=STREAM_PLAIN)
    g = float(green(params, z))
    m = np.where(plain.status == STOPPED, 0.0, plain.martingale(0))
    direct = McEstimate.from_samples(1.0 - m / g, (seed,))
    zc = combined_z(est, direct)
    est.extra.update(direct=direct.mean, direct_se=direct.stderr, cross_z=zc, cross_ok=bool(abs(zc) <= 3),
                     eps=eps, horizon=horizon)
    return est


# --------------------------------------------------------- grid flow core --

@njit(cache=True)
def _passage(m, p, lams, FP):
    for l in range(lams.size):
        if FP[l, p] == 0.0 and m >= lams[l]:
            FP[l, p] = m


@njit(cache=True)
def _grid_flow(values, dts, z0, two_a, ge, ae, ck, Zout, Mout, Sout, lams, FP):
    P = z0.size
    K = min(dts.size, ck[-1])
    Z = z0.copy()
    lg = np.zeros(P)
    alive = np.ones(P, dtype=np.bool_)
    sup = np.zeros(P)
    for p in range(P):
        y = Z[p].imag
        sup[p] = math.exp(ge * math.log(y) + ae * (math.log(y) - math.log(abs(Z[p]))))
        _passage(sup[p], p, lams, FP)
    c = 0
    for k in range(K + 1):
        while c < ck.size and ck[c] == k:
            for p in range(P):
                if alive[p]:
                    y = Z[p].imag
                    Zout[c, p] = Z[p]
                    Mout[c, p] = math.exp(ge * (math.log(y) - lg[p]) + ae * (math.log(y) - math.log(abs(Z[p]))))
                else:
                    Zout[c, p] = np.nan
                    Mout[c, p] = 0.0
                Sout[c, p] = sup[p]
            c += 1
        if k == K:
            break
        du = values[k + 1] - values[k]
        h2 = two_a * dts[k]
        for p in range(P):
            if not alive[p]:
                continue
            w = Z[p]
            if w.real * w.real + w.imag * w.imag < 8.0 * h2:
                # the slit passes close by: M can peak inside the cell
                f = 0.5
                for _ in range(10):
                    s = np.sqrt(w * w + f * h2)
                    if s.imag < 0.0:
                        s = -s
                    y = s.imag
                    if y > 0.0:
                        m = math.exp(ge * (math.log(y) - lg[p] - math.log(abs(w) / abs(s)))
                                     + ae * (math.log(y) - math.log(abs(s))))
                        if m > sup[p]:
                            sup[p] = m
                    f *= 0.5
            s = np.sqrt(w * w + h2)
            if s.imag < 0.0 or (s.imag == 0.0 and s.real * w.real < 0.0):
                s = -s
            lg[p] += math.log(abs(w) / abs(s))
            w = s - du
            if not (w.imag > 1e-12 * abs(w)):
                alive[p] = False
                continue
            Z[p] = w
            y = w.imag
            m = math.exp(ge * (math.log(y) - lg[p]) + ae * (math.log(y) - math.log(abs(w))))
            if m > sup[p]:
                sup[p] = m
            _passage(m, p, lams, FP)


@njit(cache=True)
def _block(k, kmax, bmax, step, two_a, c_step, absz2):
    """Largest dyadic block ``b <= bmax`` aligned at ``k`` with ``2a b step <= c |Z|^2``."""
    b = bmax
    while b > 1 and (k % b != 0 or k + b > kmax or two_a * b * step > c_step * absz2):
        b //= 2
    return b


@njit(cache=True)
def _grid_flow_adaptive(values, step, z0, two_a, ge, ae, ck, bmax, c_step, Zout, Mout, Sout, lams, FP):
    P = z0.size
    K = ck[-1]
    for p in range(P):
        Z = z0[p]
        lg = 0.0
        alive = True
        y = Z.imag
        sup = math.exp(ge * math.log(y) + ae * (math.log(y) - math.log(abs(Z))))
        _passage(sup, p, lams, FP)
        c = 0
        k = 0
        while True:
            while c < ck.size and ck[c] == k:
                if alive:
                    y = Z.imag
                    Zout[c, p] = Z
                    Mout[c, p] = math.exp(ge * (math.log(y) - lg) + ae * (math.log(y) - math.log(abs(Z))))
                else:
                    Zout[c, p] = np.nan
                    Mout[c, p] = 0.0
                Sout[c, p] = sup
                c += 1
            if k >= K or not alive:
                break
            nxt = ck[c] if c < ck.size else K
            az2 = Z.real * Z.real + Z.imag * Z.imag
            b = _block(k, nxt, bmax, step, two_a, c_step, az2)
            h2 = two_a * b * step
            if az2 < 8.0 * h2:
                f = 0.5
                for _ in range(10):
                    s = np.sqrt(Z * Z + f * h2)
                    if s.imag < 0.0:
                        s = -s
                    if s.imag > 0.0:
                        m = math.exp(ge * (math.log(s.imag) - lg - math.log(abs(Z) / abs(s)))
                                     + ae * (math.log(s.imag) - math.log(abs(s))))
                        if m > sup:
                            sup = m
                    f *= 0.5
            s = np.sqrt(Z * Z + h2)
            if s.imag < 0.0 or (s.imag == 0.0 and s.real * Z.real < 0.0):
                s = -s
            lg += math.log(abs(Z) / abs(s))
            w = s - (values[k + b] - values[k])
            k += b
            if not (w.imag > 1e-12 * abs(w)):
                alive = False
                continue
            Z = w
            y = w.imag
            m = math.exp(ge * (math.log(y) - lg) + ae * (math.log(y) - math.log(abs(w))))
            if m > sup:
                sup = m
            _passage(m, p, lams, FP)
        while c < ck.size:
            Zout[c, p] = np.nan
            Mout[c, p] = 0.0
            Sout[c, p] = sup
            c += 1


@dataclass
class GridFlow:
    """Flow of quadrature nodes sampled at checkpoint times.

    ``Z``, ``M`` and ``supM`` have shape ``(len(times), P)``; ``supM`` is the
    running maximum of ``M`` so far.  Within a cell the driver is constant
    and the flow is explicit, so for nodes close to the growing slit ``M`` is
    also sampled at the sub-times ``2^-k`` of the cell (``k = 1..10``).

    ``passage[l]`` holds ``M`` at the first cell end where it reaches
    ``levels[l]`` (0 if it never does before the last checkpoint).  Cell
    ends are where the discrete chain is a martingale, so optional stopping
    holds exactly for this stopping time.
    """

    times: np.ndarray
    nodes: np.ndarray
    weights: np.ndarray
    Z: np.ndarray
    M: np.ndarray
    supM: np.ndarray
    levels: np.ndarray = field(default_factory=lambda: np.zeros(0))
    passage: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))


@dataclass(frozen=True)
class Stepping:
    """Adaptive use of a fine uniform driver.

    A point advances by aligned dyadic blocks of driver cells, the largest
    with ``2a dt <= c_step |Z|^2`` and ``dt <= dt_max``; each block is one
    exact slit step with the driver held at its left end.  Points near the
    tip therefore see the full resolution while distant points move in
    coarse blocks.
    """

    c_step: float = 0.01
    dt_max: float = 2.0 ** -10

    def bmax(self, driving: DrivingPath) -> int:
        step = _uniform_step(driving)
        return max(1, 2 ** int(math.floor(math.log2(self.dt_max / step) + 1e-9)))


def _uniform_step(driving: DrivingPath) -> float:
    d = driving.dts
    if d.size == 0 or np.ptp(d) > 1e-12 * d[0]:
        raise ValueError("adaptive stepping needs a uniform driving grid")
    return float(d[0])


def grid_flow(driving: DrivingPath, D: BoxDomain, quad: QuadGrid, times, params: SleParams,
              levels=(), stepping: Stepping = None) -> GridFlow:
    times = np.atleast_1d(np.asarray(times, dtype=float))
    ck = np.array([driving.index_of(t) for t in times], dtype=np.int64)
    if np.any(np.diff(ck) < 0):
        raise ValueError("checkpoint times must be increasing")
    z, w = quad.nodes(D)
    Zout = np.empty((times.size, z.size), dtype=complex)
    Mout = np.empty((times.size, z.size))
    Sout = np.empty((times.size, z.size))
    lams = np.asarray(levels, dtype=float).reshape(-1)
    FP = np.zeros((lams.size, z.size))
    if stepping is None:
        _grid_flow(np.ascontiguousarray(driving.values), np.ascontiguousarray(driving.dts), z, 2 * params.a,
                   params.green_exponent, params.angle_exponent, ck, Zout, Mout, Sout, lams, FP)
    else:
        _grid_flow_adaptive(np.ascontiguousarray(driving.values), _uniform_step(driving), z, 2 * params.a,
                            params.green_exponent, params.angle_exponent, ck, stepping.bmax(driving),
                            stepping.c_step, Zout, Mout, Sout, lams, FP)
    return GridFlow(times, z, w, Zout, Mout, Sout, lams, FP)


# ------------------------------------------------------- natural param --

def psi_integral(driving: DrivingPath, t: float, D: BoxDomain, quad: QuadGrid, params: SleParams) -> float:
    """``Psi_t(D) = int_D M_t dA``; swallowed nodes contribute 0."""
    fl = grid_flow(driving, D, quad, [t], params)
    return float(fl.M[0] @ fl.weights)


def green_integral(D: BoxDomain, params: SleParams) -> float:
    """``int_D G dA`` by adaptive quadrature (reference for ``Psi_0``)."""
    from scipy import integrate
    f = lambda y, x: float(green(params, complex(x, y)))
    val, _ = integrate.dblquad(f, D.x0, D.x1, D.y0, D.y1, epsabs=1e-13, epsrel=1e-12)
    return val


@dataclass
class NatParamEstimate:
    """``Theta_{t,n}(D)`` on the dyadic times ``t = k 2^-n`` plus ``Psi`` on the same times."""

    n: int
    times: np.ndarray
    theta: np.ndarray
    psi: np.ndarray
    quad: dict
    seed: int = 0

    def at(self, t: float) -> float:
        """Linear interpolation between dyadic times."""
        return float(np.interp(t, self.times, self.theta))

    def to_csv(self, path) -> None:
        np.savetxt(path, np.column_stack([self.times, self.theta, np.full(self.times.size, self.n)]),
                   delimiter=",", header="t,theta,n", comments="", fmt="%.17g")


def _check_dyadic(driving: DrivingPath, t: float, n: int) -> int:
    m = t * 2 ** n
    if abs(m - round(m)) > 1e-9:
        raise ValueError(f"t={t} is not on the dyadic grid of level {n}")
    if t > driving.horizon + 1e-12:
        raise ValueError("t exceeds the driving horizon")
    for k in range(int(round(m)) + 1):
        driving.index_of(k / 2 ** n)
    return int(round(m))


def _require_phi(phi: PhiGrid, params: SleParams):
    if phi is None:
        raise NotComputedError("no phi grid: build one with build_phi_grid or the cache command")
    if not math.isclose(phi.kappa, params.kappa):
        raise ValueError(f"phi grid was built for kappa={phi.kappa}, not {params.kappa}")


def theta_from_flow(fl: GridFlow, n: int, phi: PhiGrid) -> np.ndarray:
    """Cumulative ``Theta_{t,n}`` at ``fl.times`` (which must be the level-``n`` dyadic times from 0)."""
    scale = 2.0 ** (n / 2)
    inc = np.empty(fl.times.size)
    inc[0] = 0.0
    for k in range(1, fl.times.size):
        Zs, Ms = fl.Z[k - 1], fl.M[k - 1]
        ok = Ms > 0
        vals = np.zeros_like(Ms)
        vals[ok] = Ms[ok] * phi(Zs[ok] * scale)
        inc[k] = vals @ fl.weights
    return np.cumsum(inc)


def _cutoff(t):
    """Smooth step: 1 for ``t <= 1``, 0 for ``t >= 2``."""
    x = np.clip(np.asarray(t, dtype=float) - 1.0, 0.0, 1.0)
    return 1.0 - x ** 3 * (10.0 - 15.0 * x + 6.0 * x * x)


@njit(cache=True)
def _pull_back(values, dts, k, two_a, z, x0, x1, y0, y1, d):
    """``1{f(z) in D} |f'(z)|^d`` for ``f`` the inverse of ``g_s - U_s`` at grid index ``k``."""
    out = np.zeros(z.size)
    for i in range(z.size):
        c = z[i]
        ld = 0.0
        prod = 1.0
        cr, ci = c.real, c.imag
        for j in range(k - 1, -1, -1):
            sr = cr + (values[j + 1] - values[j])
            si = ci
            # upper-branch root of s^2 - 2a dt
            A = sr * sr - si * si - two_a * dts[j]
            B = 2.0 * sr * si
            m = math.sqrt(A * A + B * B)
            if A >= 0.0:
                qr = math.sqrt(0.5 * (m + A))
                qi = abs(B) / (2.0 * qr) if qr > 0.0 else 0.0
            else:
                qi = math.sqrt(0.5 * (m - A))
                qr = abs(B) / (2.0 * qi)
            if B < 0.0 or (B == 0.0 and sr < 0.0):
                qr = -qr
            # |f'|^2 as a running product of |s|^2 / |q|^2, logged in blocks
            prod *= (sr * sr + si * si) / m
            if (j & 31) == 0:
                ld += math.log(prod)
                prod = 1.0
            cr, ci = qr, qi
        ld += math.log(prod)
        w = complex(cr, ci) + values[0]
        if x0 <= w.real <= x1 and y0 <= w.imag <= y1 and math.isfinite(ld):
            out[i] = math.exp(0.5 * d * ld)
    return out


@njit(cache=True)
def _pull_back_adaptive(values, step, k, two_a, bmax, c_step, z, x0, x1, y0, y1, d):
    """:func:`_pull_back` with the inverse steps taken in aligned dyadic blocks."""
    out = np.zeros(z.size)
    for i in range(z.size):
        cr, ci = z[i].real, z[i].imag
        ld = 0.0
        j = k
        while j > 0:
            b = bmax
            while b > 1 and (j % b != 0 or two_a * b * step > c_step * (cr * cr + ci * ci)):
                b //= 2
            sr = cr + (values[j] - values[j - b])
            si = ci
            A = sr * sr - si * si - two_a * b * step
            B = 2.0 * sr * si
            m = math.sqrt(A * A + B * B)
            if A >= 0.0:
                qr = math.sqrt(0.5 * (m + A))
                qi = abs(B) / (2.0 * qr) if qr > 0.0 else 0.0
            else:
                qi = math.sqrt(0.5 * (m - A))
                qr = abs(B) / (2.0 * qi)
            if B < 0.0 or (B == 0.0 and sr < 0.0):
                qr = -qr
            ld += math.log((sr * sr + si * si) / m)
            cr, ci = qr, qi
            j -= b
        w = complex(cr, ci) + values[0]
        if x0 <= w.real <= x1 and y0 <= w.imag <= y1 and math.isfinite(ld):
            out[i] = math.exp(0.5 * d * ld)
    return out


@dataclass(frozen=True)
class TipRule:
    """Polar Gauss-Legendre rule on the half disk ``|zeta| < 2`` used near the tip.

    With ``zeta = z 2^(n/2)`` the part of the level-``n`` increment carried by
    ``|Z_s| < 2^(1 - n/2)`` is ``2^(-nd/2) int |f'|^d G(zeta) phi(zeta) cutoff(|zeta|)``
    over ``zeta``; in the variable ``u = |zeta|^d`` the factor ``|zeta|^(d-2)``
    of ``G`` is absorbed and the integrand is smooth away from the real axis.
    """

    n_u: int = 16
    n_theta: int = 24

    def nodes(self, phi: PhiGrid, params: SleParams):
        d, q = params.d, params.green_exponent + params.angle_exponent
        gu, wu = np.polynomial.legendre.leggauss(self.n_u)
        gt, wt = np.polynomial.legendre.leggauss(self.n_theta)
        umax = 2.0 ** d
        u, wu = umax * (gu + 1) / 2, wu * umax / 2
        th, wt = math.pi * (gt + 1) / 2, wt * math.pi / 2
        r = u ** (1.0 / d)
        zeta = (r[:, None] * np.exp(1j * th[None, :])).ravel()
        base = (wu[:, None] * wt[None, :] * np.sin(th[None, :]) ** q / d * _cutoff(r)[:, None]).ravel()
        base = base * phi(zeta)
        keep = base > 0
        return zeta[keep], base[keep]


def _split_increments(driving: DrivingPath, D: BoxDomain, fl: GridFlow, n: int, phi: PhiGrid,
                      params: SleParams, rule: TipRule, stepping: Stepping = None) -> np.ndarray:
    """Level-``n`` increments at ``fl.times[:-1]``: pullback away from the tip plus the tip rule."""
    scale = 2.0 ** (n / 2)
    zeta, base = rule.nodes(phi, params)
    z = zeta / scale
    vals = np.ascontiguousarray(driving.values)
    dts = np.ascontiguousarray(driving.dts)
    inc = np.empty(fl.times.size - 1)
    for c in range(fl.times.size - 1):
        Zs, Ms = fl.Z[c], fl.M[c]
        ok = Ms > 0
        v = np.zeros_like(Ms)
        v[ok] = Ms[ok] * phi(Zs[ok] * scale) * (1.0 - _cutoff(np.abs(Zs[ok]) * scale))
        k = driving.index_of(fl.times[c])
        if stepping is None:
            jac = _pull_back(vals, dts, k, 2 * params.a, z, D.x0, D.x1, D.y0, D.y1, params.d)
        else:
            jac = _pull_back_adaptive(vals, float(dts[0]), k, 2 * params.a, stepping.bmax(driving),
                                      stepping.c_step, z, D.x0, D.x1, D.y0, D.y1, params.d)
        inc[c] = v @ fl.weights + scale ** (-params.d) * (base @ jac)
    return inc


def theta_tn(driving: DrivingPath, D: BoxDomain, t: float, n: int, phi: PhiGrid, quad: QuadGrid,
             params: SleParams, method: str = "split", rule: TipRule = TipRule(),
             stepping: Stepping = None, **zkw) -> NatParamEstimate:
    """``Theta_{s,n}(D)`` for the dyadic times ``s <= t``.

    ``method="pullback"`` integrates over ``D`` with the forward flow.  Its
    integrand has an ``|w - tip|^(d-2)`` singularity, so ``method="split"``
    (the default) hands the region ``|Z_s| < 2^(1 - n/2)`` to a
    :class:`TipRule` evaluated through the inverse maps, with a smooth cutoff
    between the two parts.
    ``method="zspace"`` integrates ``|f'|^d phi(z 2^(n/2)) G(z) 1{f(z) in D}``
    over a box that provably contains the support (slower, used to
    cross-check).  ``stepping`` switches the flows to adaptive blocks of a
    fine uniform driver (see :class:`Stepping`).
    """
    _require_phi(phi, params)
    m = _check_dyadic(driving, t, n)
    times = np.arange(m + 1) / 2 ** n
    fl = grid_flow(driving, D, quad, times, params, stepping=stepping)
    psi = fl.M @ fl.weights
    if method == "pullback":
        th = theta_from_flow(fl, n, phi)
    elif method == "split":
        th = np.concatenate([[0.0], np.cumsum(_split_increments(driving, D, fl, n, phi, params, rule,
                                                                stepping))])
    elif method == "zspace":
        th = np.concatenate([[0.0], np.cumsum([_zspace_increment(driving, D, s, n, phi, params, **zkw)
                                               for s in times[:-1]])])
    else:
        raise ValueError(f"unknown method {method!r}")
    return NatParamEstimate(n, times, th, psi, quad.spec(), driving.seed)


def _zspace_increment(driving: DrivingPath, D: BoxDomain, s: float, n: int, phi: PhiGrid,
                      params: SleParams, nx: int = 300, ny: int = 300, y_floor: float = 1e-5) -> float:
    k = driving.index_of(s)
    u = driving.values[k]
    if k == 0:
        R = 0.0
    else:
        R = float(np.max(np.abs(extract_trace(driving.truncated(s), params).points)))
    # |g_s(w) - w| <= 3 rad(K_s) and Im g_s(w) <= Im w
    xa, xb = D.x0 - 3 * R - u, D.x1 + 3 * R - u
    ly = np.linspace(math.log(y_floor * D.y1), math.log(D.y1), ny + 1)
    ym = np.exp((ly[:-1] + ly[1:]) / 2)
    dy = np.diff(np.exp(ly))
    xe = np.linspace(xa, xb, nx + 1)
    xm = (xe[:-1] + xe[1:]) / 2
    z = (xm[None, :] + 1j * ym[:, None]).ravel()
    wts = (dy[:, None] * np.diff(xe)[None, :]).ravel()
    f, df = inverse_map(driving, s, z, params)
    ind = D.contains(f)
    val = np.where(ind, df ** params.d * phi(z * 2.0 ** (n / 2)) * green(params, z), 0.0)
    return float(val @ wts)


def theta_levels(driving: DrivingPath, D: BoxDomain, T: float, n_list, phi: PhiGrid, quad: QuadGrid,
                 params: SleParams, eps_list=(), method: str = "split", rule: TipRule = TipRule(),
                 stepping: Stepping = None) -> dict:
    """``Theta_{T,n}`` for several ``n`` and ``Psi``, plus Minkowski values, from one flow.

    The flow is sampled on the finest dyadic grid; coarser levels use its
    sub-grids.  Returns a dict with keys ``theta`` (``n -> array over the
    level-n times``), ``times``, ``psi``, ``minkowski`` and
    ``minkowski_area`` (``eps -> value at T`` in the two forms of
    :func:`minkowski_estimate`).
    """
    _require_phi(phi, params)
    nmax = max(n_list)
    m = _check_dyadic(driving, T, nmax)
    times = np.arange(m + 1) / 2 ** nmax
    eps_list = list(eps_list)
    fl = grid_flow(driving, D, quad, times, params, levels=[_level(e, params) for e in eps_list],
                   stepping=stepping)
    out = {"times": times, "psi": fl.M @ fl.weights, "theta": {}, "minkowski": {}, "minkowski_area": {}}
    for n in n_list:
        stride = 2 ** (nmax - n)
        sub = GridFlow(times[::stride], fl.nodes, fl.weights, fl.Z[::stride], fl.M[::stride], fl.supM[::stride])
        if method == "split":
            out["theta"][n] = np.concatenate([[0.0], np.cumsum(_split_increments(driving, D, sub, n, phi,
                                                                                 params, rule, stepping))])
        elif method == "pullback":
            out["theta"][n] = theta_from_flow(sub, n, phi)
        else:
            raise ValueError(f"unknown method {method!r}")
    for l, eps in enumerate(eps_list):
        out["minkowski"][eps] = _minkowski(fl, l, "passage")
        out["minkowski_area"][eps] = _minkowski(fl, l, "area")
    return out


def _level(eps, params):
    if not eps > 0:
        raise ValueError("eps must be positive")
    return eps ** params.green_exponent


def _minkowski(fl: GridFlow, l: int, form: str) -> float:
    if form == "area":
        thr = fl.levels[l]
        return float(thr * np.sum(fl.weights[fl.supM[-1] >= thr]))
    if form == "passage":
        return float(fl.passage[l] @ fl.weights)
    raise ValueError(f"unknown form {form!r}")


def minkowski_set(driving: DrivingPath, D: BoxDomain, eps: float, T: float, quad: QuadGrid,
                  params: SleParams, stepping: Stepping = None) -> np.ndarray:
    """Quadrature nodes of ``D`` in ``{sup_{s <= T} M_s >= eps^(d-2)}`` (boolean mask)."""
    fl = grid_flow(driving, D, quad, [T], params, stepping=stepping)
    return fl.supM[0] >= _level(eps, params)


def minkowski_estimate(driving: DrivingPath, D: BoxDomain, eps: float, T: float, quad: QuadGrid,
                       params: SleParams, form: str = "passage", stepping: Stepping = None) -> float:
    """Conformal Minkowski estimate of the curve's content in ``D`` up to ``T``.

    With ``lam = eps^(d-2)`` and ``tau(z)`` the first time ``M_s(z) >= lam``:

    * ``form="area"``: ``lam * Area(D and {tau <= T})``;
    * ``form="passage"``: ``int_D M_tau(z) 1{tau <= T} dA(z)``.

    For continuous paths ``M_tau = lam`` and the two agree.  On a
    piecewise-constant driver ``M`` jumps across ``lam``: the area form then
    loses about ``0.25 sqrt(step) / eps`` of its value while the passage form
    keeps the overshoot.  Both need steps well below ``eps^2`` near the
    curve, which ``stepping`` provides.
    """
    fl = grid_flow(driving, D, quad, [T], params, levels=[_level(eps, params)], stepping=stepping)
    return _minkowski(fl, 0, form)


def theta_convergence_diag(drivings, D: BoxDomain, T: float, n_list, phi: PhiGrid, quad: QuadGrid,
                           params: SleParams, stepping: Stepping = None) -> dict:
    """Ensemble diagnostics of ``Theta_{T,n}`` across levels ``n``.

    Reports the mean and standard error of ``|Theta_{T,n+1} - Theta_{T,n}|``
    for consecutive levels, the mean of ``Theta_{T,n}`` and the mean of
    ``Psi_T + Theta_{T,n}`` at the finest level for each dyadic ``T' <= T``
    on the coarsest grid.
    """
    n_list = sorted(n_list)
    rows = [theta_levels(d, D, T, n_list, phi, quad, params, stepping=stepping) for d in drivings]
    final = np.array([[r["theta"][n][-1] for n in n_list] for r in rows])
    diffs = np.abs(np.diff(final, axis=1))
    nmax, n0 = n_list[-1], n_list[0]
    stride = 2 ** (nmax - n0)
    ms = np.array([r["psi"][::stride] + r["theta"][nmax][::stride] for r in rows])
    return {
        "n_list": n_list,
        "diff_mean": diffs.mean(axis=0), "diff_se": diffs.std(axis=0, ddof=1) / math.sqrt(len(rows)),
        "theta_mean": final.mean(axis=0), "theta_se": final.std(axis=0, ddof=1) / math.sqrt(len(rows)),
        "times": rows[0]["times"][::stride], "mart_mean": ms.mean(axis=0),
        "mart_se": ms.std(axis=0, ddof=1) / math.sqrt(len(rows)),
    }

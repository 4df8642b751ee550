"""Green's function, the one- and two-point local martingales, harmonic
measure bounds and the L-shape predicates."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import McEstimate, NotComputedError, SleParams, SwallowedPointError, path_rng
from .geometry import (
    dist_to_boundary,
    dist_to_polyline,
    dist_to_segments,
    side_of_polyline,
)
from .loewner import DrivingPath, Trace, TrackedPoint, extract_trace, flow_points


@dataclass(frozen=True)
class GreenValue:
    value: float
    at: complex
    params: SleParams


def green(params: SleParams, z):
    """``G(z) = Im(z)^(d-2) sin(arg z)^(4a-1)``, vectorized; 0 off the half plane."""
    z = np.asarray(z, dtype=complex)
    y = z.imag
    with np.errstate(invalid="ignore", divide="ignore"):
        val = np.where(y > 0, y ** params.green_exponent * (y / np.abs(z)) ** params.angle_exponent, 0.0)
    return val[()] if val.ndim == 0 else val


def green_one(params: SleParams, z: complex) -> GreenValue:
    z = complex(z)
    if not z.imag > 0:
        raise ValueError(f"Green's function needs Im z > 0, got {z!r}")
    return GreenValue(float(green(params, z)), z, params)


def martingale_values(params: SleParams, Z, dg):
    """``M_t = Upsilon^(d-2) S^(4a-1)`` from flow states (arrays); 0 where swallowed."""
    Z = np.asarray(Z, dtype=complex)
    absdg = np.abs(dg)
    with np.errstate(invalid="ignore", divide="ignore"):
        ups = Z.imag / absdg
        m = ups ** params.green_exponent * (Z.imag / np.abs(Z)) ** params.angle_exponent
    return np.where(np.isfinite(m), m, 0.0)


def martingale_one(point: TrackedPoint, params: SleParams, rtol: float = 1e-10) -> float:
    """One-point local martingale, computed two ways and cross-checked.

    ``|g'|^(2-d) G(Z)`` and ``Upsilon^(d-2) S^(4a-1)`` must agree to ``rtol``.
    """
    if point.swallowed or not np.isfinite(point.Z):
        raise SwallowedPointError(f"point {point.z0!r} is swallowed at t={point.t}")
    first = abs(point.dg) ** (2.0 - params.d) * float(green(params, point.Z))
    second = point.upsilon ** params.green_exponent * point.sinangle ** params.angle_exponent
    if not math.isclose(first, second, rel_tol=rtol):
        raise ArithmeticError(f"martingale forms disagree: {first!r} vs {second!r}")
    return second


def martingale_two(pz: TrackedPoint, pw: TrackedPoint, ghat, params: SleParams) -> float:
    """Two-point local martingale ``|g'(z)|^(2-d) |g'(w)|^(2-d) G(Z_t(z), Z_t(w))``.

    ``ghat(z, w)`` supplies the two-point Green's function (a float or an
    :class:`McEstimate`); there is no closed form for it.
    """
    for p in (pz, pw):
        if p.swallowed or not np.isfinite(p.Z):
            raise SwallowedPointError(f"point {p.z0!r} is swallowed")
    val = ghat(pz.Z, pw.Z)
    if val is None:
        raise NotComputedError("two-point Green value not available")
    if isinstance(val, McEstimate):
        val = val.mean
    if not val > 0:
        raise NotComputedError(f"two-point Green value must be positive, got {val!r}")
    e = 2.0 - params.d
    return abs(pz.dg) ** e * abs(pw.dg) ** e * float(val)


def harmonic_q(z: complex, n_walkers: int, seed: int, params: SleParams, driving: DrivingPath = None,
               time: float = None, delta: float = 1e-4, max_steps: int = 4000,
               trace: Trace = None, sample_empty: bool = False, refine: int = 16) -> McEstimate:
    """Walk-on-spheres estimate of ``q = min(h(z, side+), h(z, side-))``.

    The domain is the upper half plane minus the curve up to ``time``.
    Boundary sides are split at the tip: the ``+`` side is the right side of
    the curve with the positive half line, which ``g_t - U_t`` sends to
    ``(0, inf)``.  A walker stopped within ``delta`` of the curve is assigned
    by the side of the nearest polyline segment, so the curve must be simple
    (``kappa <= 4``); it is sampled ``refine`` times per driver cell.  The
    estimate is of the ``+`` side harmonic measure ``p``;
    the returned mean is ``min(p, 1 - p)``.  Without a curve the exact value
    ``min(arg z, pi - arg z) / pi`` is returned unless ``sample_empty``.
    """
    z = complex(z)
    if not z.imag > 0:
        raise ValueError("z must lie in the upper half plane")
    if driving is None and not sample_empty:
        th = math.atan2(z.imag, z.real)
        return McEstimate(min(th, math.pi - th) / math.pi, 0.0, n_walkers, (seed,), {"exact": True})
    rng = path_rng(seed, stream=11)
    if driving is not None and params.kappa > 4:
        raise ValueError("side classification needs a simple curve (kappa <= 4)")
    if driving is not None:
        dpath = driving.truncated(time if time is not None else driving.horizon)
        if trace is None:
            trace = extract_trace(dpath.subdivided(refine), params)
        tpts = trace.points
        Zz, _ = flow_points(dpath, [z], params, times=[dpath.horizon])
        if not np.isfinite(Zz[0, 0]):
            raise ValueError("z is swallowed by the curve")
    else:
        dpath, tpts = None, np.zeros(1, dtype=complex)
    w = np.full(n_walkers, z)
    done = np.zeros(n_walkers, dtype=bool)
    for _ in range(max_steps):
        live = np.flatnonzero(~done)
        if live.size == 0:
            break
        r = dist_to_boundary(w[live], tpts) if dpath is not None else w[live].imag
        stop = r < delta
        done[live[stop]] = True
        go = live[~stop]
        ang = rng.uniform(0.0, 2 * math.pi, go.size)
        w[go] = w[go] + r[~stop] * np.exp(1j * ang)
    unfinished = int(np.sum(~done))
    plus = w.real > 0
    if dpath is not None and tpts.size > 1:
        # the curve is simple for kappa <= 4: its right side and R_+ form the + side
        near = dist_to_polyline(w, tpts) < w.imag
        if near.any():
            plus[near] = side_of_polyline(w[near], tpts) > 0
    p = float(plus.mean())
    se = math.sqrt(max(p * (1 - p), 1.0 / n_walkers) / n_walkers)
    return McEstimate(min(p, 1 - p), se, n_walkers, (seed,), {"p_plus": p, "unfinished": unfinished})


@dataclass(frozen=True)
class LShape:
    """``L_z = [0, x] U [x, x + iy]`` and its corridor of width ``rho |z|``."""

    z: complex
    rho: float

    def __post_init__(self):
        if not complex(self.z).imag > 0:
            raise ValueError("apex must lie in the upper half plane")
        if not self.rho > 0:
            raise ValueError("rho must be positive")

    @property
    def width(self) -> float:
        return self.rho * abs(self.z)

    def distance(self, pts) -> np.ndarray:
        z = complex(self.z)
        a = np.array([0.0, z.real], dtype=complex)
        b = np.array([z.real, z], dtype=complex)
        return dist_to_segments(np.atleast_1d(np.asarray(pts, dtype=complex)), a, b)

    def contains(self, pts, slack: float = 0.0) -> np.ndarray:
        return self.distance(pts) <= self.width * (1.0 + slack)


def lshape_contains(shape: LShape, trace, slack: float = 0.0) -> bool:
    """True iff every curve point lies within ``rho |z|`` of ``L_z``."""
    pts = trace.points if isinstance(trace, Trace) else np.asarray(trace)
    return bool(np.all(shape.contains(pts, slack)))


def event_e_z_delta(z: complex, delta: float, driving: DrivingPath, swallow_time: float,
                    params: SleParams) -> bool:
    """Driver event confining the curve near ``L_z``.

    True iff ``T_z <= y^2/(2a) + delta``, ``-delta <= U <= x + delta`` on
    ``[0, delta]`` and ``|U - x| <= delta`` on ``[delta, T_z]``, evaluated on
    the grid points.  For ``x < 0`` the mirrored event is used.
    """
    z = complex(z)
    x, y = z.real, z.imag
    grid, U = driving.grid, driving.values
    if x < 0:
        x, U = -x, -U
    if not swallow_time <= y * y / (2 * params.a) + delta:
        return False
    early = grid <= delta
    if np.any(U[early] < -delta) or np.any(U[early] > x + delta):
        return False
    late = (grid >= delta) & (grid <= swallow_time)
    return not np.any(np.abs(U[late] - x) > delta)


def lshape_map_bounds(driving: DrivingPath, z: complex, rho: float, w: complex,
                      params: SleParams, trace: Trace = None) -> tuple:
    """``(G(g(w) - U_T) / G(w), |g'(w)|)`` at the end ``T`` of ``driving``.

    The curve must stay in ``L_{z, rho}`` and ``w`` must lie outside
    ``L_{z, 2 rho}``.
    """
    shape = LShape(z, rho)
    trace = extract_trace(driving, params) if trace is None else trace
    if not lshape_contains(shape, trace):
        raise ValueError("precondition failed: curve leaves the corridor L_{z,rho}")
    if LShape(z, 2 * rho).contains([w])[0]:
        raise ValueError("precondition failed: w lies inside L_{z,2rho}")
    Z, dg = flow_points(driving, [w], params, times=[driving.horizon])
    Zw, dgw = Z[0, 0], dg[0, 0]
    if not np.isfinite(Zw):
        raise SwallowedPointError("w was swallowed")
    return float(green(params, Zw) / green(params, w)), float(abs(dgw))


def green_grid_csv(params: SleParams, zs, path, driving: DrivingPath = None, times=()) -> None:
    """Write ``re, im, G`` and one ``M_t`` column per requested time."""
    zs = np.asarray(zs, dtype=complex).ravel()
    cols = [zs.real, zs.imag, green(params, zs)]
    names = ["re", "im", "G"]
    if driving is not None and len(times):
        Z, dg = flow_points(driving, zs, params, times=list(times))
        for t, Zt, dgt in zip(times, Z, dg):
            cols.append(martingale_values(params, Zt, dgt))
            names.append(f"M_{t:g}")
    data = np.column_stack(cols)
    np.savetxt(path, data, delimiter=",", header=",".join(names), comments="", fmt="%.17g")

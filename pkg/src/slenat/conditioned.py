"""Two-sided radial and two-sided chordal SLE and the estimators built on them.

Two-sided radial SLE through ``z`` is SLE weighted by ``M_t(z)``; on the
driver it adds the drift ``(4a - 1) X_t / |Z_t|^2``.  Two-sided chordal SLE
through ``x > 0`` is SLE weighted by ``Z_t(x)^(1 - 4a)`` and adds the drift
``(4a - 1) / Z_t(x)``.  Both are simulated by :func:`slenat.batch.run_batch`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .batch import (
    STATUS_NAMES,
    STOPPED,
    BatchResult,
    padded_cells,
    replay_cells,
    run_batch,
)
from .core import McEstimate, SleParams, combined_z
from .diffusions import cot_sde_endpoints, psi_estimate
from .loewner import DrivingPath, Trace, TrackedPoint, tips_from_cells
from .observables import LShape, green

# streams keep the different estimators' randomness disjoint for one seed
STREAM_RADIAL, STREAM_CHORDAL, STREAM_PLAIN, STREAM_F_SWAP = 1, 2, 3, 4


@dataclass
class ConditionedRun:
    """One conditioned path with its target state at termination."""

    driving: DrivingPath
    target: complex
    tracked: TrackedPoint
    trace: Trace
    tau: float
    status: str
    extra: dict = field(default_factory=dict)


def _driving_of(res: BatchResult, i: int, tag: tuple) -> DrivingPath:
    dts = res.dts[i]
    grid = np.concatenate([[0.0], np.cumsum(dts)])
    values = np.concatenate([res.us[i], [res.U[i]]])
    return DrivingPath(grid, values, seed=res.seed, measure_tag=tag)


def batch_traces(res: BatchResult, rows=None):
    """Curve points of recorded paths, one array per row (endpoint included)."""
    rows = range(res.n) if rows is None else rows
    out = []
    for r in rows:
        us = np.append(res.us[r], res.U[r])
        dts = np.append(res.dts[r], 0.0)
        pts = np.atleast_1d(tips_from_cells(us, dts, res.params))
        pts[0] = 0.0
        out.append(pts)
    return out


def _single(res: BatchResult, target: complex, tag: tuple) -> ConditionedRun:
    drv = _driving_of(res, 0, tag)
    pts = batch_traces(res)[0]
    Z, lg = res.Z[0, 0], res.logdg[0, 0]
    dg = complex(math.exp(lg)) if np.isfinite(lg) else complex(np.nan)
    tracked = TrackedPoint(complex(target), float(res.t[0]), complex(Z), dg, not np.isfinite(Z))
    # the trailing padding cell has zero length, so its time repeats the horizon
    times = np.concatenate([drv.grid, [drv.horizon]])
    return ConditionedRun(drv, complex(target), tracked, Trace(pts, times), float(res.t[0]),
                          STATUS_NAMES[int(res.status[0])], {"steps": int(res.steps[0])})


def sample_two_sided_radial(z: complex, eps: float, seed: int, params: SleParams, index: int = 0,
                            dt_max: float = 0.01, c_step: float = 0.01,
                            max_steps: int = 10**7) -> ConditionedRun:
    """One two-sided radial run through ``z`` stopped when ``Upsilon_t(z) <= eps``."""
    z = complex(z)
    if not z.imag > 0:
        raise ValueError("z must lie in the upper half plane")
    if not 0 < eps < z.imag:
        raise ValueError("need 0 < eps < Im z")
    res = run_batch(params, [z], 1, seed, mode="radial", eps=eps, dt_max=dt_max, c_step=c_step,
                    max_steps=max_steps, record=True, indices=[index], stream=STREAM_RADIAL)
    return _single(res, z, ("two_sided_radial", z, eps))


def sample_two_sided_chordal(x: float, eps: float, seed: int, params: SleParams, index: int = 0,
                             horizon: float = math.inf, dt_max: float = 0.01, c_step: float = 0.01,
                             max_steps: int = 10**7) -> ConditionedRun:
    """One two-sided chordal run through ``x > 0``.

    Stops when ``Z_t(x) / g_t'(x) <= eps`` or at the capacity ``horizon``.
    """
    if not x > 0:
        raise ValueError("x must be positive")
    res = run_batch(params, [complex(x)], 1, seed, mode="chordal", eps=eps, horizon=horizon,
                    dt_max=dt_max, c_step=c_step, max_steps=max_steps, record=True,
                    indices=[index], stream=STREAM_CHORDAL)
    return _single(res, complex(x), ("two_sided_chordal", x))


def radial_batch(z: complex, eps: float, n: int, seed: int, params: SleParams, others=(),
                 record: bool = False, **kw) -> BatchResult:
    """``n`` two-sided radial runs through ``z`` tracking ``others`` as extra points."""
    z = complex(z)
    if not 0 < eps < z.imag:
        raise ValueError("need 0 < eps < Im z")
    kw.setdefault("stream", STREAM_RADIAL)
    return run_batch(params, [z, *others], n, seed, mode="radial", eps=eps, record=record, **kw)


def chordal_batch(x: float, eps: float, n: int, seed: int, params: SleParams, others=(),
                  record: bool = False, **kw) -> BatchResult:
    if not x > 0:
        raise ValueError("x must be positive")
    kw.setdefault("stream", STREAM_CHORDAL)
    return run_batch(params, [complex(x), *others], n, seed, mode="chordal", eps=eps,
                     record=record, **kw)


def one_point_prediction(z: complex, eps: float, params: SleParams, n: int, seed: int,
                         dt: float = 1e-4) -> McEstimate:
    """``eps^(2-d) G(z) psi(log(y/eps)/(2a), arg z)`` with ``psi`` from the angle SDE."""
    z = complex(z)
    t = math.log(z.imag / eps) / (2 * params.a)
    ps = psi_estimate(t, math.atan2(z.imag, z.real), n, seed, params, dt=dt)
    return ps.scaled(eps ** (2 - params.d) * float(green(params, z)))


def hit_probability(z: complex, eps: float, n: int, seed: int, params: SleParams,
                    horizon: float = None, dt_max: float = math.inf, c_step: float = 0.01) -> McEstimate:
    """Plain-SLE estimate of ``P{tau_eps(z) < inf}``.

    Paths run to capacity ``horizon`` (default ``64 y^2``).  The estimate at
    half the horizon is also reported; if the two differ by more than one
    standard error the result is flagged ``horizon_biased``.
    """
    z = complex(z)
    if not 0 < eps <= z.imag:
        raise ValueError("need 0 < eps <= Im z")
    horizon = 64.0 * z.imag ** 2 if horizon is None else horizon
    res = run_batch(params, [z], n, seed, mode="plain", eps=eps, horizon=horizon, dt_max=dt_max,
                    c_step=c_step, stream=STREAM_PLAIN)
    hit = res.status == STOPPED
    half = hit & (res.t <= horizon / 2)
    est = McEstimate.from_samples(hit.astype(float), (seed,))
    gap = float(hit.mean() - half.mean())
    est.extra.update(horizon=horizon, half_horizon_mean=float(half.mean()), horizon_gap=gap,
                     horizon_biased=bool(gap > est.stderr), counts=res.counts())
    return est


def estimate_F(z: complex, w: complex, eps: float, n: int, seed: int, params: SleParams,
               refine: bool = False, stream: int = STREAM_RADIAL, **kw) -> McEstimate:
    """``F(z, w) ~ E*_z[M_{tau_eps(z)}(w)] / G(w)`` under two-sided radial to ``z``.

    Paths on which ``w`` is swallowed contribute 0.  With ``refine`` the
    estimate is repeated at ``eps/2`` and the change is reported.
    """
    z, w = complex(z), complex(w)
    if z == w:
        raise ValueError("z and w must differ")
    res = radial_batch(z, eps, n, seed, params, others=[w], stream=stream, **kw)
    vals = res.martingale(1) / float(green(params, w))
    est = McEstimate.from_samples(vals, (seed,), eps=eps, swallowed_w=int(np.sum(~np.isfinite(res.Z[:, 1]))),
                                  counts=res.counts())
    if refine:
        fine = estimate_F(z, w, eps / 2, n, seed + 1, params, refine=False, stream=stream, **kw)
        est.extra.update(refined=fine.mean, refined_se=fine.stderr,
                         refine_z=combined_z(est, fine), refine_ok=abs(est.mean - fine.mean) < fine.stderr)
    return est


def estimate_two_point_green(z: complex, w: complex, eps: float, n: int, seed: int,
                             params: SleParams, **kw) -> McEstimate:
    """``G(z, w) = G(z) G(w) [F(z, w) + F(w, z)]``, symmetric in ``z, w``."""
    z, w = complex(z), complex(w)
    # order the pair so that swapping arguments reuses the same random streams
    a, b = sorted([z, w], key=lambda c: (c.real, c.imag))
    fab = estimate_F(a, b, eps, n, seed, params, stream=STREAM_RADIAL, **kw)
    fba = estimate_F(b, a, eps, n, seed, params, stream=STREAM_F_SWAP, **kw)
    gg = float(green(params, z) * green(params, w))
    tot = fab + fba
    return McEstimate(gg * tot.mean, gg * tot.stderr, n, (seed,),
                      {"F_zw": fab.mean if a == z else fba.mean, "F_wz": fba.mean if a == z else fab.mean,
                       "F_sum": tot.mean, "F_sum_se": tot.stderr})


def lshape_probability(z: complex, rho: float, eps: float, n: int, seed: int, params: SleParams, **kw) -> McEstimate:
    """Frequency of ``gamma[0, tau_eps] in L_{z, rho}`` under two-sided radial to ``z``."""
    if not 0 < rho <= 0.5:
        raise ValueError("rho must lie in (0, 1/2]")
    shape = LShape(complex(z), rho)
    res = radial_batch(z, eps, n, seed, params, record=True, **kw)
    inside = np.zeros(n)
    end_dist = np.zeros(n)
    for r, pts in enumerate(batch_traces(res)):
        inside[r] = float(np.all(shape.contains(pts)))
        end_dist[r] = abs(pts[-1] - complex(z))
    return McEstimate.from_samples(inside, (seed,), rho=rho, eps=eps, counts=res.counts(),
                                   koebe_frac=float(np.mean(end_dist <= 4 * eps * 1.2)))


def radon_nikodym_check(z: complex, eps: float, n: int, seed: int, params: SleParams,
                        band: float = None, chunk: int = 200, **kw) -> dict:
    """Ratio of the two-sided radial and two-sided chordal weights up to ``sigma``.

    Paths are two-sided chordal to ``x = Re z``; ``sigma`` is the first time
    the curve comes within ``2 eps`` of ``x``.  The radial weight is
    normalized as ``|Z|^(1-4a) (Upsilon/y)^(1/(4a)-1) (Y/y)^(4a-1)`` so both
    weights start near ``x^(1-4a)``.  Reports per-path ratio extremes and,
    if ``band`` is given, the fraction of paths with the ratio in
    ``[1/band, band]``.
    """
    z = complex(z)
    x, y = z.real, z.imag
    if not (abs(z - x) <= eps <= x / 2):
        raise ValueError("need |z - x| <= eps <= x/2")
    a = params.a
    res = chordal_batch(x, eps / 4, n, seed, params, others=[z], record=True, **kw)
    lo, hi, reached = np.full(n, np.nan), np.full(n, np.nan), np.zeros(n, dtype=bool)
    for i in range(0, n, chunk):
        rows = list(range(i, min(n, i + chunk)))
        U, D = padded_cells(res, rows)
        Zs, lg = replay_cells(U, D, [complex(x), z], params)
        tips = np.atleast_2d(tips_from_cells(U, D, params))
        tips[:, 0] = 0.0
        near = np.abs(tips - x) <= 2 * eps
        for k, r in enumerate(rows):
            kk = np.flatnonzero(near[k])
            stop = kk[0] if kk.size else Zs.shape[1] - 1
            reached[r] = kk.size > 0
            Xt, lx = Zs[k, : stop + 1, 0].real, lg[k, : stop + 1, 0]
            Zz, lz = Zs[k, : stop + 1, 1], lg[k, : stop + 1, 1]
            ok = np.isfinite(Xt) & np.isfinite(Zz)
            Yz = Zz.imag
            logM = ((1 - 4 * a) * np.log(np.abs(Zz)) + (1 / (4 * a) - 1) * (np.log(Yz) - lz - math.log(y))
                    + (4 * a - 1) * (np.log(Yz) - math.log(y)))
            logN = (1 - 4 * a) * np.log(Xt) + (4 * a - 1) * lx
            ratio = np.exp(logM - logN)[ok]
            if ratio.size:
                lo[r], hi[r] = ratio.min(), ratio.max()
    out = {"n": n, "reached_sigma": float(reached.mean()), "ratio_min": lo, "ratio_max": hi,
           "initial_ratio": (abs(z) / x) ** (1 - 4 * a), "counts": res.counts()}
    if band is not None:
        out["band"] = band
        out["in_band_frac"] = float(np.mean((lo >= 1 / band) & (hi <= band)))
    return out


def tilt_unbiasedness(z: complex, eps: float, n: int, seed: int, params: SleParams,
                      t_cut: float, horizon: float = None) -> tuple:
    """Compare ``P{tau_eps <= t_cut}`` two ways.

    Directly under SLE, and as ``G(z) E*[1{tau_eps <= t_cut} / M_{tau_eps}]``
    under two-sided radial.  Returns ``(direct, reweighted)``.
    """
    rad = radial_batch(z, eps, n, seed, params)
    m = rad.martingale(0)
    phi = (rad.t <= t_cut) & (rad.status == STOPPED)
    rew = McEstimate.from_samples(np.where(phi, float(green(params, z)) / np.where(m > 0, m, 1.0), 0.0),
                                  (seed,))
    plain = run_batch(params, [complex(z)], n, seed, mode="plain", eps=eps, horizon=t_cut,
                      stream=STREAM_PLAIN)
    direct = McEstimate.from_samples((plain.status == STOPPED).astype(float), (seed,))
    return direct, rew


def radial_angle_samples(z: complex, s: float, n: int, seed: int, params: SleParams,
                         dt: float = 1e-3) -> tuple:
    """Angle of two-sided radial SLE when ``Upsilon = y e^(-2 a s)``, and the
    matching marginal of the angle SDE in radial time ``s``."""
    z = complex(z)
    eps = z.imag * math.exp(-2 * params.a * s)
    rad = radial_batch(z, eps, n, seed, params)
    theta = np.angle(rad.Z[:, 0])
    ref = cot_sde_endpoints(math.atan2(z.imag, z.real), [s], dt, seed + 1, params, n)[0]
    return theta[rad.status == STOPPED], ref


def delta_statistic(x: float, x1: float, x2: float, eps: float, n: int, seed: int,
                    params: SleParams, chunk: int = 200) -> np.ndarray:
    """``max_t Z_t(x2) / Z_t(x1)`` under two-sided chordal to ``x`` (``x < x1 < x2``)."""
    if not 0 < x < x1 < x2:
        raise ValueError("need 0 < x < x1 < x2")
    res = chordal_batch(x, eps, n, seed, params, others=[complex(x1), complex(x2)], record=True)
    out = np.empty(n)
    for i in range(0, n, chunk):
        rows = list(range(i, min(n, i + chunk)))
        U, D = padded_cells(res, rows)
        Zs, _ = replay_cells(U, D, [complex(x), complex(x1), complex(x2)], params)
        out[i:i + len(rows)] = np.nanmax((Zs[:, :, 2] / Zs[:, :, 1]).real, axis=1)
    return out


def driver_confinement(z: complex, rvals, eps: float, n: int, seed: int, params: SleParams) -> list:
    """Frequency of ``{tau <= r|z|^2, sup|U| <= r|z|}`` under two-sided radial for each ``r``."""
    z = complex(z)
    res = radial_batch(z, eps, n, seed, params, record=True)
    supu = np.array([max(np.max(np.abs(u)) if len(u) else 0.0, abs(U)) for u, U in zip(res.us, res.U)])
    az = abs(z)
    return [float(np.mean((res.t <= r * az * az) & (supu <= r * az) & (res.status == STOPPED))) for r in rvals]


def write_run_archive(res: BatchResult, prefix, estimates: dict = None) -> None:
    """``<prefix>.csv`` with one row per path and ``<prefix>.json`` manifest."""
    Z0 = res.Z[:, 0]
    cols = np.column_stack([res.indices, res.status, res.t, Z0.real, Z0.imag, res.logdg[:, 0],
                            res.martingale(0), res.steps])
    np.savetxt(f"{prefix}.csv", cols, delimiter=",", comments="", fmt="%.17g",
               header="path,status,tau,re_Z,im_Z,log_absdg,M,steps")
    manifest = {"kappa": res.params.kappa, "seed": res.seed, "mode": res.mode,
                "points": [[p.real, p.imag] for p in res.z0], "counts": res.counts(),
                "status_codes": {str(k): v for k, v in STATUS_NAMES.items()},
                "estimates": {k: (v.to_dict() if isinstance(v, McEstimate) else v)
                              for k, v in (estimates or {}).items()}}
    with open(f"{prefix}.json", "w") as fh:
        json.dump(manifest, fh, indent=2, default=float)


__all__ = ["ConditionedRun", "sample_two_sided_radial", "sample_two_sided_chordal", "radial_batch",
           "chordal_batch", "hit_probability", "one_point_prediction", "estimate_F",
           "estimate_two_point_green", "lshape_probability", "radon_nikodym_check",
           "tilt_unbiasedness", "radial_angle_samples", "delta_statistic", "driver_confinement",
           "write_run_archive", "batch_traces"]

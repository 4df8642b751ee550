"""Chordal Loewner flow with a piecewise-constant driver.

Time is half-plane capacity time with the normalization
``d/dt g_t(z) = a / (g_t(z) - U_t)``.  On a cell where the driver is held at
``u`` the flow is solved exactly by the vertical slit map

    g(w) = u + sqrt((w - u)**2 + 2 a dt),

so composing slit maps over the cells of a driving grid gives the forward
flow of tracked points, the curve (tips pulled back through the earlier
maps) and the inverse maps ``f_s(z) = g_s^{-1}(z + U_s)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .core import SleParams, path_rng

SWALLOW_TOL = 1e-12


def _root_upper(q, ref):
    """Square root of ``q`` on the upper half plane.

    On the real axis the sign is taken from ``Re(ref)`` so that boundary
    points keep their side of the slit.
    """
    s = np.sqrt(q)
    flip = (s.imag < 0) | ((s.imag == 0) & (s.real * ref.real < 0))
    return np.where(flip, -s, s)


def slit_z(Z, two_a_dt):
    """One forward slit step in coordinates relative to the driver.

    Returns the new ``Z`` and the derivative factor ``Z / sqrt(Z**2 + 2a dt)``.
    """
    Z = np.asarray(Z, dtype=complex)
    s = _root_upper(Z * Z + two_a_dt, Z)
    with np.errstate(invalid="ignore", divide="ignore"):
        return s, Z / s


def slit_step(w, u, dt, params: SleParams, return_mask=False):
    """Exact Loewner map over one cell with the driver held at ``u``.

    Returns ``(g(w), g'(w))``.  Points pushed onto the slit are swallowed:
    their outputs are NaN and, with ``return_mask=True``, flagged in a third
    returned array.
    """
    if not (math.isfinite(dt) and dt >= 0):
        raise ValueError(f"dt must be finite and non-negative, got {dt!r}")
    w = np.asarray(w, dtype=complex)
    g, dg = slit_z(w - u, 2.0 * params.a * dt)
    g = g + u
    scale = np.maximum(np.abs(g - u), 1e-300)
    swallowed = (w.imag > 0) & (g.imag <= SWALLOW_TOL * scale)
    g = np.where(swallowed, np.nan + 0j, g)
    dg = np.where(swallowed, np.nan + 0j, dg)
    if g.ndim == 0:
        g, dg, swallowed = g[()], dg[()], bool(swallowed)
    if return_mask:
        return g, dg, swallowed
    return g, dg


def inverse_slit_step(z, u, dt, params: SleParams):
    """Inverse of :func:`slit_step`; returns ``(w, dw/dz, tip_contact)``."""
    z = np.asarray(z, dtype=complex)
    q = (z - u) ** 2 - 2.0 * params.a * dt
    s = _root_upper(q, z - u)
    with np.errstate(invalid="ignore", divide="ignore"):
        dw = (z - u) / s
    contact = (np.abs(q.imag) <= SWALLOW_TOL * np.maximum(np.abs(q), 1e-300)) & (q.real <= 0) & (dt > 0)
    return s + u, dw, contact


@dataclass(frozen=True)
class DrivingPath:
    """Driver values on an increasing grid of capacity times.

    ``values[k]`` is held on the cell ``[grid[k], grid[k+1])``.
    """

    grid: np.ndarray
    values: np.ndarray
    seed: int = 0
    measure_tag: tuple = ("plain",)

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if grid.ndim != 1 or grid.shape != values.shape or grid.size < 1:
            raise ValueError("grid and values must be 1-d arrays of equal length")
        if grid[0] != 0.0 or values[0] != 0.0:
            raise ValueError("driving paths start at t = 0 with U_0 = 0")
        if np.any(np.diff(grid) <= 0):
            raise ValueError("grid must be strictly increasing")
        if not (np.all(np.isfinite(grid)) and np.all(np.isfinite(values))):
            raise ValueError("grid and values must be finite")
        grid.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "measure_tag", tuple(self.measure_tag))

    @property
    def dts(self) -> np.ndarray:
        return np.diff(self.grid)

    @property
    def horizon(self) -> float:
        return float(self.grid[-1])

    def __len__(self):
        return self.grid.size

    def index_of(self, s: float) -> int:
        k = int(np.searchsorted(self.grid, s))
        for j in (k - 1, k):
            if 0 <= j < self.grid.size and math.isclose(self.grid[j], s, rel_tol=1e-12, abs_tol=1e-14):
                return j
        raise ValueError(f"time {s!r} is not on the driving grid")

    def value_at(self, s: float) -> float:
        """Driver value at grid time ``s``."""
        return float(self.values[self.index_of(s)])

    def scaled(self, r: float) -> "DrivingPath":
        """Brownian rescaling ``t -> r^2 t``, ``U -> r U``."""
        return DrivingPath(self.grid * r * r, self.values * r, self.seed, self.measure_tag)

    def subdivided(self, m: int) -> "DrivingPath":
        """Each cell split into ``m`` equal cells holding the same value.

        Slit maps with a common driver value compose exactly, so the flow is
        unchanged; the trace of the result samples the same curve ``m`` times
        more densely.
        """
        m = int(m)
        if m < 1:
            raise ValueError("m must be a positive integer")
        f = np.arange(m) / m
        grid = (self.grid[:-1, None] + f[None, :] * self.dts[:, None]).ravel()
        vals = np.repeat(self.values[:-1], m)
        return DrivingPath(np.append(grid, self.grid[-1]), np.append(vals, self.values[-1]), self.seed,
                           self.measure_tag)

    def reflected(self) -> "DrivingPath":
        return DrivingPath(self.grid, -self.values, self.seed, self.measure_tag)

    def truncated(self, t: float) -> "DrivingPath":
        k = self.index_of(t)
        return DrivingPath(self.grid[: k + 1], self.values[: k + 1], self.seed, self.measure_tag)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# seed={self.seed} measure={'|'.join(map(str, self.measure_tag))}\n")
            w = csv.writer(fh)
            w.writerow(["t", "U"])
            for t, u in zip(self.grid, self.values):
                w.writerow([repr(float(t)), repr(float(u))])

    @classmethod
    def from_csv(cls, path) -> "DrivingPath":
        seed, tag = 0, ("plain",)
        ts, us = [], []
        with open(path, newline="") as fh:
            first = fh.readline()
            if first.startswith("#"):
                for item in first[1:].split():
                    key, _, val = item.partition("=")
                    if key == "seed":
                        seed = int(val)
                    elif key == "measure":
                        tag = tuple(val.split("|"))
            else:
                fh.seek(0)
            for row in csv.DictReader(fh):
                ts.append(float(row["t"]))
                us.append(float(row["U"]))
        return cls(np.array(ts), np.array(us), seed, tag)


def sample_driving(params: SleParams, horizon: float, step: float, seed: int) -> DrivingPath:
    """Brownian driver on a uniform grid (last cell shortened to hit ``horizon``)."""
    if not (math.isfinite(horizon) and math.isfinite(step)):
        raise ValueError("horizon and step must be finite")
    if horizon <= 0 or step <= 0:
        raise ValueError("horizon and step must be positive")
    k = int(math.ceil(horizon / step - 1e-9))
    grid = np.minimum(np.arange(k + 1) * step, horizon)
    grid[-1] = horizon
    rng = path_rng(seed)
    inc = rng.standard_normal(k) * np.sqrt(np.diff(grid))
    values = np.concatenate([[0.0], np.cumsum(inc)])
    return DrivingPath(grid, values, int(seed), ("plain",))


def driving_from_function(f, horizon: float, step: float) -> DrivingPath:
    """Deterministic driver ``U_t = f(t) - f(0)`` sampled on a uniform grid."""
    k = int(math.ceil(horizon / step - 1e-9))
    grid = np.minimum(np.arange(k + 1) * step, horizon)
    grid[-1] = horizon
    values = np.array([f(t) for t in grid], dtype=float)
    return DrivingPath(grid, values - values[0], 0, ("deterministic",))


@dataclass
class TrackedPoint:
    """Flow state of one point at one time."""

    z0: complex
    t: float
    Z: complex
    dg: complex
    swallowed: bool = False
    swallow_time: float = math.inf

    @property
    def X(self) -> float:
        return self.Z.real

    @property
    def Y(self) -> float:
        return self.Z.imag

    @property
    def upsilon(self) -> float:
        return self.Z.imag / abs(self.dg)

    @property
    def sinangle(self) -> float:
        return self.Z.imag / abs(self.Z)

    @property
    def theta(self) -> float:
        return math.atan2(self.Z.imag, self.Z.real)


@dataclass
class PointFlow:
    """History of one tracked point along a driving path.

    Arrays are indexed by the driving grid; entries after swallowing are NaN.
    """

    z0: complex
    times: np.ndarray
    Z: np.ndarray
    dg: np.ndarray
    swallow_time: float = math.inf

    @property
    def alive(self) -> np.ndarray:
        return np.isfinite(self.Z)

    @property
    def upsilon(self) -> np.ndarray:
        return self.Z.imag / np.abs(self.dg)

    @property
    def sinangle(self) -> np.ndarray:
        return self.Z.imag / np.abs(self.Z)

    @property
    def theta(self) -> np.ndarray:
        return np.angle(self.Z)

    def __len__(self):
        return self.times.size

    def __getitem__(self, k) -> TrackedPoint:
        Z = complex(self.Z[k])
        return TrackedPoint(self.z0, float(self.times[k]), Z, complex(self.dg[k]),
                            not np.isfinite(Z), self.swallow_time)

    def snapshots(self) -> list:
        return [self[k] for k in range(len(self))]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "X", "Y", "absdg", "upsilon", "S"])
            for t, Z, dg in zip(self.times, self.Z, self.dg):
                w.writerow([repr(float(v)) for v in (t, Z.real, Z.imag, abs(dg), Z.imag / abs(dg),
                                                     Z.imag / abs(Z))])


def flow_point(driving: DrivingPath, z: complex, params: SleParams, refine: bool = False,
               refine_ratio: float = 0.1, max_split: int = 4096) -> PointFlow:
    """Forward flow of ``z`` through every cell of ``driving``.

    With ``refine=True`` a cell is split into sub-cells (driver linearly
    interpolated, held constant on each) whenever the driver increment is
    large next to the point: ``dU^2 > refine_ratio * |Z|^2``.
    """
    z = complex(z)
    if not z.imag > 0:
        raise ValueError("tracked points must lie in the upper half plane")
    grid, vals = driving.grid, driving.values
    K = grid.size
    Zs = np.full(K, np.nan + 0j)
    dgs = np.full(K, np.nan + 0j)
    Z, dg = z - vals[0], 1.0 + 0j
    Zs[0], dgs[0] = Z, dg
    two_a = 2.0 * params.a
    swallow_time = math.inf
    for k in range(K - 1):
        dt = grid[k + 1] - grid[k]
        du = vals[k + 1] - vals[k]
        m = 1
        if refine and abs(Z) > 0:
            m = min(max_split, max(1, int(math.ceil(du * du / (refine_ratio * abs(Z) ** 2)))))
        h, dv = dt / m, du / m
        for _ in range(m):
            s = complex(_root_upper(np.complex128(Z * Z + two_a * h), np.complex128(Z)))
            dg *= Z / s
            Z = s - dv
        if not Z.imag > SWALLOW_TOL * abs(Z):
            swallow_time = grid[k + 1]
            break
        Zs[k + 1], dgs[k + 1] = Z, dg
    return PointFlow(z, grid.copy(), Zs, dgs, swallow_time)


def flow_points(driving: DrivingPath, zs, params: SleParams, times=None):
    """Vectorized forward flow of many points.

    Returns ``(Z, dg)`` with shape ``(len(times), len(zs))``; ``times`` must be
    grid times (default: the whole grid).  Swallowed points are NaN.
    """
    zs = np.asarray(zs, dtype=complex).ravel()
    grid, vals = driving.grid, driving.values
    idx = np.arange(grid.size) if times is None else np.array([driving.index_of(t) for t in times])
    want = np.zeros(grid.size, dtype=bool)
    want[idx] = True
    Z = zs - vals[0]
    dg = np.ones_like(Z)
    out_Z, out_dg = {}, {}
    two_a = 2.0 * params.a
    for k in range(grid.size):
        if want[k]:
            out_Z[k], out_dg[k] = Z.copy(), dg.copy()
        if k == grid.size - 1:
            break
        s, f = slit_z(Z, two_a * (grid[k + 1] - grid[k]))
        dg = dg * f
        Z = s - (vals[k + 1] - vals[k])
        dead = ~(Z.imag > SWALLOW_TOL * np.abs(Z))
        if dead.any():
            Z = np.where(dead, np.nan + 0j, Z)
            dg = np.where(dead, np.nan + 0j, dg)
    return np.array([out_Z[k] for k in idx]), np.array([out_dg[k] for k in idx])


@dataclass
class Trace:
    """Curve points ``gamma(t_k)`` at the driving grid times."""

    points: np.ndarray
    times: np.ndarray
    extra: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "re", "im"])
            for t, p in zip(self.times, self.points):
                w.writerow([repr(float(t)), repr(float(p.real)), repr(float(p.imag))])

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.points)))


@njit(cache=True)
def _tips_path(us, dts, two_a, out):
    K = us.size
    out[0] = 0.0
    for k in range(K):
        w = us[k] + 1j * math.sqrt(two_a * dts[k])
        for j in range(k - 1, -1, -1):
            d = w - us[j]
            s = np.sqrt(d * d - two_a * dts[j])
            if s.imag < 0.0 or (s.imag == 0.0 and s.real * d.real < 0.0):
                s = -s
            w = s + us[j]
        out[k + 1] = w


def tips_from_cells(us, dts, params: SleParams) -> np.ndarray:
    """Curve points for driver values ``us`` held over cells of length ``dts``.

    Works on a single path (1-d inputs) or a batch (2-d, one row per path;
    zero-length cells are identity maps and can be used as padding).
    Returns ``gamma(t_k)`` for ``k = 0..K``.
    """
    us = np.atleast_2d(np.asarray(us, dtype=float))
    dts = np.atleast_2d(np.asarray(dts, dtype=float))
    n, K = us.shape
    tips = np.zeros((n, K + 1), dtype=complex)
    for i in range(n):
        _tips_path(np.ascontiguousarray(us[i]), np.ascontiguousarray(dts[i]), 2.0 * params.a, tips[i])
    return tips[0] if n == 1 else tips


def extract_trace(driving: DrivingPath, params: SleParams) -> Trace:
    """Curve ``gamma(t_k) = g_{t_k}^{-1}`` (tip) at every grid time."""
    pts = tips_from_cells(driving.values[:-1], driving.dts, params)
    pts = np.atleast_1d(pts)
    pts[0] = 0.0
    return Trace(pts, driving.grid.copy())


def inverse_map(driving: DrivingPath, s: float, z, params: SleParams, return_contact=False):
    """``f_s(z) = g_s^{-1}(z + U_s)`` and ``|f_s'(z)|``.

    ``s`` must be a grid time.  Points that land on a slit tip are reported
    through the optional contact mask.
    """
    k = driving.index_of(s)
    z = np.asarray(z, dtype=complex)
    w = z + driving.values[k]
    logd = np.zeros(w.shape)
    contact = np.zeros(w.shape, dtype=bool)
    us, dts = driving.values, driving.dts
    for j in range(k - 1, -1, -1):
        w, dw, c = inverse_slit_step(w, us[j], dts[j], params)
        with np.errstate(divide="ignore"):
            logd += np.log(np.abs(dw))
        contact |= c
    out = (w[()] if w.ndim == 0 else w, np.exp(logd)[()] if logd.ndim == 0 else np.exp(logd))
    if return_contact:
        return out + (contact[()] if contact.ndim == 0 else contact,)
    return out


def forward_map(driving: DrivingPath, s: float, w, params: SleParams):
    """``g_s(w) - U_s`` and ``g_s'(w)`` for points still in the domain."""
    Z, dg = flow_points(driving.truncated(s), w, params, times=[s])
    return Z[0], dg[0]

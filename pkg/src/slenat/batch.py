"""Vectorized Monte Carlo driver for many independent Loewner chains.

Every path carries its own driver, its own clock and its own adaptive step
``dt = min(dt_max, c_step * min_p |Z_p|^2)`` where ``Z_p`` runs over the
tracked points still in the domain.  The driver increment over a step is
``drift * dt + sqrt(dt) * xi``; the drift selects the measure:

* ``plain``    -- SLE itself (no drift),
* ``radial``   -- two-sided radial SLE through tracked point 0,
  drift ``(4a - 1) X / |Z|^2``,
* ``chordal``  -- two-sided chordal SLE through the real tracked point 0,
  drift ``(4a - 1) / X``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import PathStreams, SleParams
from .loewner import SWALLOW_TOL, _root_upper

RUNNING, STOPPED, SWALLOWED, BUDGET = 0, 1, 2, 3
STATUS_NAMES = {RUNNING: "horizon", STOPPED: "stopped", SWALLOWED: "swallowed", BUDGET: "budget"}


@dataclass
class BatchResult:
    """Terminal state of a batch of chains.

    ``Z`` and ``logdg`` have shape ``(n, P)``; dead points hold NaN.  With
    ``record=True`` the per-path cell sequences are kept in ``us``/``dts``
    (lists of arrays) so traces can be rebuilt.
    """

    params: SleParams
    z0: np.ndarray
    Z: np.ndarray
    logdg: np.ndarray
    U: np.ndarray
    t: np.ndarray
    status: np.ndarray
    steps: np.ndarray
    seed: int
    indices: np.ndarray
    mode: str
    us: list = field(default=None, repr=False)
    dts: list = field(default=None, repr=False)
    history: dict = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.Z.shape[0]

    def upsilon(self, p: int = 0) -> np.ndarray:
        return self.Z[:, p].imag / np.exp(self.logdg[:, p])

    def sinangle(self, p: int = 0) -> np.ndarray:
        return self.Z[:, p].imag / np.abs(self.Z[:, p])

    def martingale(self, p: int = 0) -> np.ndarray:
        """``M_t(z_p)`` at the terminal time; zero for dead points."""
        prm = self.params
        ups, s = self.upsilon(p), self.sinangle(p)
        with np.errstate(invalid="ignore", divide="ignore"):
            m = ups ** prm.green_exponent * s ** prm.angle_exponent
        return np.where(np.isfinite(m), m, 0.0)

    def counts(self) -> dict:
        return {STATUS_NAMES[k]: int(np.sum(self.status == k)) for k in STATUS_NAMES}


def run_batch(params: SleParams, points, n: int, seed: int, mode: str = "plain", eps: float = None,
              horizon: float = math.inf, dt_max: float = 0.01, c_step: float = 0.01,
              max_steps: int = 10**7, record: bool = False, indices=None, stream: int = 0,
              dt_min: float = 1e-14, history_times=None) -> BatchResult:
    """Run ``n`` independent chains tracking ``points``.

    Chains stop when the target (point 0) reaches conformal radius ``eps``
    (``Y/|g'|`` for interior targets, ``X/g'`` for a real target), when the
    target is swallowed, at ``horizon`` or after ``max_steps`` steps.

    ``history_times`` (increasing) records ``Z`` and ``logdg`` of all points
    at the first step end at or after each listed time.
    """
    if mode not in ("plain", "radial", "chordal"):
        raise ValueError(f"unknown mode {mode!r}")
    z0 = np.atleast_1d(np.asarray(points, dtype=complex))
    P = z0.size
    real_pt = z0.imag == 0
    if mode == "radial" and real_pt[0]:
        raise ValueError("radial mode needs an interior target")
    if mode == "chordal" and not (real_pt[0] and z0[0].real > 0):
        raise ValueError("chordal mode needs a target on the positive real axis")
    if np.any(z0.imag < 0):
        raise ValueError("points must lie in the closed upper half plane")
    indices = np.arange(n) if indices is None else np.asarray(indices)
    streams = PathStreams(seed, indices, stream=stream)
    a, two_a = params.a, 2.0 * params.a
    tilt = 4.0 * a - 1.0

    Z = np.tile(z0, (n, 1))
    side = np.sign(z0.real)
    logdg = np.zeros((n, P))
    U = np.zeros(n)
    t = np.zeros(n)
    steps = np.zeros(n, dtype=np.int64)
    status = np.full(n, RUNNING)
    active = np.ones(n, dtype=bool)
    rec_rows, rec_u, rec_dt = [], [], []
    hist_times = None if history_times is None else np.asarray(history_times, dtype=float)
    if hist_times is not None:
        H = hist_times.size
        hist = {"Z": np.full((H, n, P), np.nan + 0j), "logdg": np.full((H, n, P), np.nan),
                "t": np.full((H, n), np.nan)}
        hptr = np.zeros(n, dtype=np.int64)

    def target_radius(rows):
        Zt = Z[rows, 0]
        if mode == "chordal":
            return Zt.real / np.exp(logdg[rows, 0])
        return Zt.imag / np.exp(logdg[rows, 0])

    while True:
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        Zr = Z[rows]
        alive = np.isfinite(Zr)
        scale2 = np.where(alive, np.abs(Zr) ** 2, np.inf).min(axis=1)
        dt = np.minimum(dt_max, c_step * scale2)
        dt = np.minimum(dt, horizon - t[rows])
        dt = np.maximum(dt, dt_min)
        if mode == "radial":
            Zt = Zr[:, 0]
            drift = tilt * Zt.real / np.abs(Zt) ** 2
        elif mode == "chordal":
            drift = tilt / Zr[:, 0].real
        else:
            drift = 0.0
        du = drift * dt + np.sqrt(dt) * streams.normals(rows)
        if record:
            rec_rows.append(rows)
            rec_u.append(U[rows].copy())
            rec_dt.append(dt)
        with np.errstate(invalid="ignore", divide="ignore"):
            s = _root_upper(Zr * Zr + two_a * dt[:, None], Zr)
            logdg[rows] += np.log(np.abs(Zr / s))
        Znew = s - du[:, None]
        # a point dies when it reaches the real line (interior) or is passed
        # by the driver (boundary)
        dead = np.where(real_pt[None, :], Znew.real * side[None, :] <= 0,
                        ~(Znew.imag > SWALLOW_TOL * np.abs(Znew)))
        Znew = np.where(dead, np.nan + 0j, Znew)
        Z[rows] = Znew
        logdg[rows] = np.where(dead, np.nan, logdg[rows])
        U[rows] += du
        t[rows] += dt
        steps[rows] += 1

        if hist_times is not None:
            hp = hptr[rows]
            while True:
                ok = (hp < H)
                hit = np.zeros(rows.size, dtype=bool)
                hit[ok] = t[rows][ok] >= hist_times[hp[ok]] - 1e-12
                if not hit.any():
                    break
                rr, hh = rows[hit], hp[hit]
                hist["Z"][hh, rr] = Z[rr]
                hist["logdg"][hh, rr] = logdg[rr]
                hist["t"][hh, rr] = t[rr]
                hp[hit] += 1
            hptr[rows] = hp

        tgt_dead = ~np.isfinite(Z[rows, 0])
        with np.errstate(invalid="ignore"):
            reached = (~tgt_dead) & (target_radius(rows) <= eps) if eps is not None else np.zeros(rows.size, bool)
        done_h = t[rows] >= horizon - 1e-15
        over = steps[rows] >= max_steps
        status[rows[tgt_dead]] = SWALLOWED
        status[rows[reached]] = STOPPED
        status[rows[over & ~tgt_dead & ~reached & ~done_h]] = BUDGET
        active[rows[tgt_dead | reached | done_h | over]] = False

    res = BatchResult(params, z0, Z, logdg, U, t, status, steps, int(seed), indices, mode)
    if record:
        all_rows = np.concatenate(rec_rows)
        all_u = np.concatenate(rec_u)
        all_dt = np.concatenate(rec_dt)
        order = np.argsort(all_rows, kind="stable")
        all_rows, all_u, all_dt = all_rows[order], all_u[order], all_dt[order]
        bounds = np.searchsorted(all_rows, np.arange(n + 1))
        res.us = [all_u[bounds[i]:bounds[i + 1]] for i in range(n)]
        res.dts = [all_dt[bounds[i]:bounds[i + 1]] for i in range(n)]
    if hist_times is not None:
        res.history = hist
    return res


def padded_cells(result: BatchResult, rows=None):
    """Stack recorded cells of the selected paths.

    Every row gets at least one trailing zero-length cell held at the
    terminal driver value, so the last tip is the curve endpoint and
    :func:`replay_cells` reproduces the terminal state.
    """
    rows = range(result.n) if rows is None else rows
    rows = list(rows)
    us = [result.us[i] for i in rows]
    dts = [result.dts[i] for i in rows]
    K = max(len(u) for u in us) + 1
    U = np.zeros((len(us), K))
    D = np.zeros((len(us), K))
    for k, (i, u, d) in enumerate(zip(rows, us, dts)):
        U[k, : len(u)] = u
        U[k, len(u):] = result.U[i]
        D[k, : len(d)] = d
    return U, D


def replay_cells(U, D, points, params: SleParams):
    """Flow ``points`` through padded cells ``(U, D)`` of shape ``(n, K)``.

    Returns ``Z`` and ``logdg`` of shape ``(n, K + 1, P)``; column ``k`` is
    the state after ``k`` cells.  Zero-length cells act as the identity.
    Real points die once the driver passes them; interior points once they
    reach the real line.
    """
    U = np.asarray(U, dtype=float)
    D = np.asarray(D, dtype=float)
    n, K = U.shape
    z0 = np.atleast_1d(np.asarray(points, dtype=complex))
    real_pt = z0.imag == 0
    side = np.sign(z0.real)
    two_a = 2.0 * params.a
    Zs = np.empty((n, K + 1, z0.size), dtype=complex)
    logdg = np.zeros((n, K + 1, z0.size))
    Z = np.tile(z0, (n, 1))
    Zs[:, 0] = Z
    lg = np.zeros((n, z0.size))
    for k in range(K):
        du = (U[:, k + 1] - U[:, k]) if k + 1 < K else np.zeros(n)
        with np.errstate(invalid="ignore", divide="ignore"):
            s = _root_upper(Z * Z + two_a * D[:, k:k + 1], Z)
            lg = lg + np.log(np.abs(Z / s))
        Znew = s - du[:, None]
        dead = np.where(real_pt[None, :], Znew.real * side[None, :] <= 0,
                        ~(Znew.imag > SWALLOW_TOL * np.abs(Znew)))
        Z = np.where(dead, np.nan + 0j, Znew)
        lg = np.where(dead, np.nan, lg)
        Zs[:, k + 1] = Z
        logdg[:, k + 1] = lg
    return Zs, logdg

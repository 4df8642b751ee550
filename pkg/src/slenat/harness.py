"""Experiment runner: configurations, the registry of named experiments,
result records, plot data and the phi-grid cache.

Seeds
-----
Every random quantity derives from the single ``seed`` of the config via
:func:`derive_seed`, which feeds ``(seed, crc32(label), ...)`` into
``numpy.random.SeedSequence``.  Labels name the sub-task (``"kappa=2"``,
``"driver"``, ...), so adding a sub-task never shifts the streams of the
others.  Driver ``i`` of an ensemble uses ``derive_seed(seed, "driver", i)``.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import math
import os
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import conditioned, diffusions, natparam
from .batch import STOPPED, run_batch
from .core import McEstimate, NotComputedError, SleParams
from .loewner import driving_from_function, flow_point, sample_driving
from .observables import green

DEFAULT_CACHE = Path("~/.cache/slenat").expanduser()


class ConfigError(ValueError):
    """Invalid experiment configuration; ``problems`` lists one message per field."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config:\n  " + "\n  ".join(self.problems))


def derive_seed(seed: int, *labels) -> int:
    key = [zlib.crc32(str(lab).encode()) for lab in labels]
    return int(np.random.SeedSequence(int(seed), spawn_key=tuple(key)).generate_state(1)[0])


def workers() -> int:
    """Worker processes for ensemble fan-out (``SLENAT_WORKERS``, default 1)."""
    try:
        return max(1, int(os.environ.get("SLENAT_WORKERS", "1")))
    except ValueError:
        return 1


# ----------------------------------------------------------------- config --

def _cplx(v):
    if isinstance(v, (list, tuple)):
        if len(v) != 2:
            raise ValueError("complex numbers are [re, im]")
        return complex(float(v[0]), float(v[1]))
    if isinstance(v, str):
        return complex(v.replace(" ", "").replace("i", "j"))
    return complex(v)


def _jsonable(v):
    if isinstance(v, complex):
        return [v.real, v.imag]
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    return v


@dataclass
class ExperimentConfig:
    experiment: str
    kappas: list
    geometry: dict
    budgets: dict
    seed: int = 0
    out: str = "results"
    tolerances: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def hash(self) -> str:
        """Hash of everything that affects the numbers (the output directory does not)."""
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        name = d.get("experiment")
        if name not in REGISTRY:
            raise ConfigError([f"experiment: unknown name {name!r}; registered: {', '.join(REGISTRY)}"])
        base = copy.deepcopy(REGISTRY[name].defaults)
        unknown = set(d) - {"experiment", "kappas", "geometry", "budgets", "seed", "out", "tolerances", "options"}
        if unknown:
            raise ConfigError([f"{k}: unknown field" for k in sorted(unknown)])
        for sect in ("geometry", "budgets", "tolerances", "options"):
            extra = d.get(sect) or {}
            if not isinstance(extra, dict):
                raise ConfigError([f"{sect}: must be an object"])
            bad = set(extra) - set(base[sect])
            if bad:
                raise ConfigError([f"{sect}.{k}: not a parameter of {name}" for k in sorted(bad)])
            base[sect].update(extra)
        cfg = cls(name, list(d.get("kappas", base["kappas"])), base["geometry"], base["budgets"],
                  d.get("seed", 0), d.get("out", "results"), base["tolerances"], base["options"])
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    def validate(self) -> None:
        problems = []
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            problems.append(f"seed: must be a non-negative integer, got {self.seed!r}")
        if not self.kappas:
            problems.append("kappas: at least one value needed")
        for k in self.kappas:
            try:
                SleParams(k)
            except (ValueError, TypeError) as exc:
                problems.append(f"kappas: {exc}")
        problems += REGISTRY[self.experiment].check(self)
        if problems:
            raise ConfigError(problems)


def _need(problems, section, key, ok, what):
    if not ok:
        problems.append(f"{section}.{key}: {what}")


def _positive_int(v):
    return isinstance(v, int) and not isinstance(v, bool) and v > 0


def _check_upper(cfg, problems, key):
    try:
        z = _cplx(cfg.geometry[key])
        _need(problems, "geometry", key, z.imag > 0, "must lie in the upper half plane")
    except (ValueError, TypeError):
        problems.append(f"geometry.{key}: not a complex number")


def _check_paths(cfg, problems, *keys):
    for k in keys:
        _need(problems, "budgets", k, _positive_int(cfg.budgets.get(k)), "must be a positive integer")


def _check_box(cfg, problems):
    try:
        natparam.BoxDomain(*[float(v) for v in cfg.geometry["D"]])
    except (ValueError, TypeError) as exc:
        problems.append(f"geometry.D: {exc}")


def _check_natparam(cfg, problems):
    _check_box(cfg, problems)
    _check_paths(cfg, problems, "drivers")
    q = cfg.budgets.get("quadrature")
    _need(problems, "budgets", "quadrature", isinstance(q, list) and len(q) == 2 and all(map(_positive_int, q)),
          "must be [nx, ny]")
    tr = cfg.budgets.get("tip_rule")
    _need(problems, "budgets", "tip_rule", isinstance(tr, list) and len(tr) == 2 and all(map(_positive_int, tr)),
          "must be [n_u, n_theta]")
    m = cfg.budgets.get("step_log2")
    _need(problems, "budgets", "step_log2", _positive_int(m) and m <= 22, "must be an integer in [1, 22]")
    c = cfg.budgets.get("c_step")
    _need(problems, "budgets", "c_step", c is None or (isinstance(c, (int, float)) and 0 < c <= 1),
          "must be null (uniform steps) or in (0, 1]")
    T = cfg.geometry.get("T")
    _need(problems, "geometry", "T", isinstance(T, (int, float)) and T > 0, "must be positive")
    if len(cfg.kappas) != 1:
        problems.append("kappas: natural-parametrization experiments take a single kappa")
    elif not 0 < float(cfg.kappas[0]) <= 4:
        problems.append("kappas: the Theta estimator needs kappa <= 4 (points are never swallowed)")


# ----------------------------------------------------------------- record --

@dataclass
class ResultRecord:
    experiment: str
    config_hash: str
    seed: int
    estimates: dict
    verdicts: dict
    wall_clock: float
    partial: bool = False
    tables: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.verdicts) and all(self.verdicts.values()) and not self.partial

    def to_dict(self) -> dict:
        return _jsonable({"experiment": self.experiment, "config_hash": self.config_hash, "seed": self.seed,
                          "estimates": self.estimates, "verdicts": self.verdicts, "passed": self.passed,
                          "partial": self.partial, "wall_clock": self.wall_clock, "config": self.config,
                          "tables": {k: {"header": h, "rows": len(r)} for k, (h, r) in self.tables.items()}})

    def numbers(self) -> dict:
        """Everything numeric except the wall clock (for reproducibility checks)."""
        d = self.to_dict()
        d.pop("wall_clock")
        return d


def emit_plotdata(record: ResultRecord, out_dir) -> list:
    """Write each table of ``record`` as ``<experiment>-<table>.csv``; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, (header, rows) in record.tables.items():
        p = out / f"{record.experiment}-{name}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
        paths.append(p)
    return paths


def _est(e) -> dict:
    return {"mean": float(e.mean), "se": float(e.stderr), "n": int(e.n)}


class _Clock:
    def __init__(self, limit):
        self.t0 = time.perf_counter()
        self.limit = limit

    @property
    def elapsed(self) -> float:
        return time.perf_counter() - self.t0

    def out_of_time(self) -> bool:
        return self.limit is not None and self.elapsed > self.limit


# -------------------------------------------------------------- phi cache --

@dataclass(frozen=True)
class PhiSpec:
    kappa: float = 8 / 3
    eps: float = 0.02
    n_paths: int = 4000
    seed: int = 0
    n_r: int = 64

    def filename(self) -> str:
        g = natparam._default_thetas()
        logr_key = natparam.PhiGrid.key_for(self.kappa, self.eps, g, [self.n_r])
        return f"phi-k{self.kappa:.6g}-n{self.n_paths}-s{self.seed}-{logr_key}.json"


def _phi_paths(spec: PhiSpec, cache_dir):
    d = Path(cache_dir or DEFAULT_CACHE).expanduser()
    p = d / spec.filename()
    return d, p, p.with_suffix(".stale")


def load_phi(spec: PhiSpec, cache_dir=None) -> natparam.PhiGrid:
    """Cached phi grid for ``spec``; :class:`NotComputedError` when missing or stale."""
    _, p, stale = _phi_paths(spec, cache_dir)
    if not p.exists():
        raise NotComputedError(f"no cached phi grid at {p}; build it with `slenat cache build`")
    if stale.exists():
        raise NotComputedError(f"cached phi grid {p} is marked stale; rebuild it with `slenat cache build`")
    return natparam.PhiGrid.from_json(p)


def manage_cache(action: str, spec: PhiSpec = PhiSpec(), cache_dir=None, seed: int = 0) -> dict:
    """``build``, ``verify`` or ``purge`` the cached phi grid of ``spec``.

    ``verify`` checks the file's key and digest, then recomputes 5 random
    cells with 4 times the paths; any failure marks the cache stale.
    """
    d, p, stale = _phi_paths(spec, cache_dir)
    if action == "build":
        d.mkdir(parents=True, exist_ok=True)
        grid = natparam.build_phi_grid(SleParams(spec.kappa), spec.n_paths, spec.seed, eps=spec.eps, n_r=spec.n_r)
        grid.to_json(p)
        stale.unlink(missing_ok=True)
        return {"action": action, "status": "built", "path": str(p), "max_se": grid.extra["max_se"]}
    if action == "verify":
        if not p.exists():
            return {"action": action, "status": "missing", "path": str(p)}
        try:
            grid = natparam.PhiGrid.from_json(p)
        except (ValueError, KeyError) as exc:
            stale.write_text(str(exc))
            return {"action": action, "status": "stale", "path": str(p), "reason": str(exc)}
        rep = natparam.verify_phi_cells(grid, cells=5, factor=4, seed=seed)
        if not rep["ok"]:
            stale.write_text(json.dumps(rep["cells"]))
            return {"action": action, "status": "stale", "path": str(p), "cells": rep["cells"]}
        stale.unlink(missing_ok=True)
        return {"action": action, "status": "ok", "path": str(p), "cells": rep["cells"]}
    if action == "purge":
        existed = p.exists()
        p.unlink(missing_ok=True)
        stale.unlink(missing_ok=True)
        return {"action": action, "status": "purged" if existed else "missing", "path": str(p)}
    raise ValueError(f"unknown cache action {action!r}; use build, verify or purge")


# ------------------------------------------------------------ experiments --

@dataclass
class Experiment:
    name: str
    run: object
    defaults: dict
    check: object = lambda cfg: []
    summary: str = ""


REGISTRY: dict = {}


def register(name, defaults, check=None, summary=""):
    def deco(fn):
        full = {"kappas": defaults.get("kappas", [8 / 3]), "geometry": defaults.get("geometry", {}),
                "budgets": defaults.get("budgets", {}), "tolerances": defaults.get("tolerances", {}),
                "options": defaults.get("options", {})}
        REGISTRY[name] = Experiment(name, fn, full, check or (lambda cfg: []), summary)
        return fn
    return deco


def _z_ok(z_sigma):
    return bool(abs(z_sigma) <= 3)


@register("flow-oracle",
          {"kappas": [2, 8 / 3, 6], "geometry": {"z": [0, 1]}, "budgets": {"step_log2": 14},
           "tolerances": {"rel_err": 1e-8, "swallow": 1e-4}},
          check=lambda cfg: _check_flow(cfg), summary="slit-map flow against the closed form for U = 0")
def _flow_oracle(cfg, clock):
    z = _cplx(cfg.geometry["z"])
    step = 2.0 ** -cfg.budgets["step_log2"]
    est, ver, rows = {}, {}, []
    for k in cfg.kappas:
        prm = SleParams(k)
        t_sw = z.imag ** 2 / (2 * prm.a)
        drv = driving_from_function(lambda t: 0.0, 1.25 * t_sw, step)
        fl = flow_point(drv, z, prm)
        # the tip reaches z at t_sw, where the closed form vanishes
        alive = np.isfinite(fl.Z) & (fl.times < t_sw)
        exact = np.sqrt(z * z + 2 * prm.a * fl.times[alive])
        exact = np.where(exact.imag < 0, -exact, exact)
        rel = np.abs(fl.Z[alive] - exact) / np.abs(exact)
        err = float(rel.max())
        est[f"kappa={k:.6g}"] = {"max_rel_err": err, "swallow_time": fl.swallow_time, "swallow_exact": t_sw}
        ver[f"rel_err[kappa={k:.6g}]"] = err < cfg.tolerances["rel_err"]
        ver[f"swallow[kappa={k:.6g}]"] = abs(fl.swallow_time - t_sw) <= cfg.tolerances["swallow"]
        rows.append([k, err, fl.swallow_time, t_sw])
    return est, ver, {"oracle": (["kappa", "max_rel_err", "swallow_time", "swallow_exact"], rows)}


def _check_flow(cfg):
    p = []
    _check_upper(cfg, p, "z")
    _need(p, "budgets", "step_log2", _positive_int(cfg.budgets.get("step_log2")), "must be a positive integer")
    return p


@register("martingale-one",
          {"geometry": {"z": [0, 1], "eps": 0.2, "t": 1.0}, "budgets": {"paths": 20000}},
          check=lambda cfg: _check_mart(cfg), summary="stopped one-point martingale keeps its mean")
def _martingale_one(cfg, clock):
    z, eps, t = _cplx(cfg.geometry["z"]), cfg.geometry["eps"], cfg.geometry["t"]
    est, ver = {}, {}
    for k in cfg.kappas:
        prm = SleParams(k)
        res = run_batch(prm, [z], cfg.budgets["paths"], derive_seed(cfg.seed, "kappa", k), eps=eps, horizon=t)
        m = McEstimate.from_samples(res.martingale(0))
        G = float(green(prm, z))
        zs = m.zscore(G)
        est[f"kappa={k:.6g}"] = {**_est(m), "G": G, "z": zs, "stopped_frac": float(np.mean(res.status == STOPPED))}
        ver[f"mean_equals_G[kappa={k:.6g}]"] = _z_ok(zs)
    return est, ver, {}


def _check_mart(cfg):
    p = []
    _check_upper(cfg, p, "z")
    _check_paths(cfg, p, "paths")
    g = cfg.geometry
    try:
        _need(p, "geometry", "eps", 0 < g["eps"] <= _cplx(g["z"]).imag, "need 0 < eps <= Im z")
    except (TypeError, ValueError):
        p.append("geometry.eps: must be a number")
    _need(p, "geometry", "t", isinstance(g.get("t"), (int, float)) and g["t"] > 0, "must be positive")
    return p


@register("supermartingale-deficiency",
          {"geometry": {"z": [0, 1], "t": 1.0}, "budgets": {"paths": 20000, "phi_paths": 20000},
           "options": {"phi_eps": 0.01}},
          check=lambda cfg: _check_def(cfg), summary="unstopped one-point martingale loses mass phi * G")
def _deficiency(cfg, clock):
    z, t = _cplx(cfg.geometry["z"]), cfg.geometry["t"]
    est, ver = {}, {}
    for k in cfg.kappas:
        prm = SleParams(k)
        res = run_batch(prm, [z], cfg.budgets["paths"], derive_seed(cfg.seed, "kappa", k), horizon=t)
        m = McEstimate.from_samples(res.martingale(0))
        G = float(green(prm, z))
        deficit = McEstimate(G - m.mean, m.stderr, m.n)
        # phi(z / sqrt(t)) from hitting times of the two-sided radial process
        phi = natparam.estimate_phi(z / math.sqrt(t), cfg.budgets["phi_paths"], cfg.options["phi_eps"],
                                    derive_seed(cfg.seed, "phi", k), prm)
        pred = phi.scaled(G)
        zc = deficit.zscore(pred.mean, pred.stderr)
        est[f"kappa={k:.6g}"] = {"deficit": _est(deficit), "phi": _est(phi), "predicted": _est(pred), "z": zc}
        ver[f"deficit_positive[kappa={k:.6g}]"] = deficit.mean > 3 * deficit.stderr
        ver[f"deficit_matches_phi[kappa={k:.6g}]"] = _z_ok(zc)
    return est, ver, {}


def _check_def(cfg):
    p = []
    _check_upper(cfg, p, "z")
    _check_paths(cfg, p, "paths", "phi_paths")
    t = cfg.geometry.get("t")
    _need(p, "geometry", "t", isinstance(t, (int, float)) and t > 0, "must be positive")
    e = cfg.options.get("phi_eps")
    _need(p, "options", "phi_eps", isinstance(e, (int, float)) and 0 < e < 1, "must lie in (0, 1)")
    return p


@register("one-point",
          {"geometry": {"z": [0, 1], "eps": 0.5}, "budgets": {"paths": 20000, "sde_paths": 100000},
           "options": {"sde_dt": 4e-4}},
          check=lambda cfg: _check_one(cfg), summary="P{tau_eps < inf} against eps^(2-d) G psi")
def _one_point(cfg, clock):
    z, eps = _cplx(cfg.geometry["z"]), cfg.geometry["eps"]
    est, ver = {}, {}
    for k in cfg.kappas:
        prm = SleParams(k)
        direct = conditioned.hit_probability(z, eps, cfg.budgets["paths"], derive_seed(cfg.seed, "hit", k), prm)
        pred = conditioned.one_point_prediction(z, eps, prm, cfg.budgets["sde_paths"],
                                                derive_seed(cfg.seed, "sde", k), dt=cfg.options["sde_dt"])
        zc = direct.zscore(pred.mean, pred.stderr)
        est[f"kappa={k:.6g}"] = {"direct": _est(direct), "predicted": _est(pred), "z": zc,
                                 "horizon_gap": direct.extra["horizon_gap"]}
        ver[f"agree[kappa={k:.6g}]"] = _z_ok(zc)
    return est, ver, {}


def _check_one(cfg):
    p = []
    _check_upper(cfg, p, "z")
    _check_paths(cfg, p, "paths", "sde_paths")
    try:
        _need(p, "geometry", "eps", 0 < cfg.geometry["eps"] <= _cplx(cfg.geometry["z"]).imag,
              "need 0 < eps <= Im z")
    except (TypeError, ValueError):
        p.append("geometry.eps: must be a number")
    return p


@register("psi-limit",
          {"kappas": [2, 8 / 3], "geometry": {"t": 5.0, "xs": [0.3, math.pi / 2], "slope_window": [1.0, 4.0]},
           "budgets": {"paths": 20000}, "options": {"dt": 1e-3}, "tolerances": {"slope_margin": 0.3}},
          check=lambda cfg: _check_psi(cfg), summary="psi(t, x) tends to 2 C_2r")
def _psi_limit(cfg, clock):
    g = cfg.geometry
    est, ver, rows = {}, {}, []
    for k in cfg.kappas:
        prm = SleParams(k)
        lim = 2 * diffusions.constants(prm).C2r
        for x in g["xs"]:
            tag = f"kappa={k:.6g},x={x:.6g}"
            mc = diffusions.psi_estimate(g["t"], x, cfg.budgets["paths"], derive_seed(cfg.seed, "psi", k, x), prm,
                                         dt=cfg.options["dt"])
            zs = mc.zscore(lim)
            ts = np.linspace(g["slope_window"][0], g["slope_window"][1], 13)
            gap = np.abs(np.array([float(diffusions.psi_series(t, x, prm)) for t in ts]) - lim)
            slope = float(np.polyfit(ts, np.log(gap), 1)[0])
            est[tag] = {"psi": _est(mc), "limit": lim, "z": zs, "slope": slope, "slope_bound": -(prm.r + 0.3)}
            ver[f"limit[{tag}]"] = _z_ok(zs)
            ver[f"slope[{tag}]"] = slope <= -(prm.r + cfg.tolerances["slope_margin"])
            rows.append([g["t"], x, mc.mean, mc.stderr])
            rows += [[float(t), x, float(diffusions.psi_series(t, x, prm)), 0.0] for t in ts]
    return est, ver, {"psi": (["t", "x", "psi", "stderr"], rows)}


def _check_psi(cfg):
    p = []
    _check_paths(cfg, p, "paths")
    g = cfg.geometry
    _need(p, "geometry", "t", isinstance(g.get("t"), (int, float)) and g["t"] > 0, "must be positive")
    _need(p, "geometry", "xs", all(0 < x < math.pi for x in g.get("xs", [])) and g.get("xs"),
          "need values in (0, pi)")
    for k in cfg.kappas:
        if 2 * 2 / float(k) <= 0.5:
            p.append(f"kappas: the angle diffusion needs 4/kappa > 1/2 (kappa={k})")
    return p


@register("two-point-exponent",
          {"geometry": {"z": [0, 1], "s": [0.4, 0.2, 0.1, 0.05], "eps_ratio": 0.125},
           "budgets": {"paths": 2000}, "tolerances": {"slope": 0.15}},
          check=lambda cfg: _check_two(cfg), summary="G(z, w) ~ |z - w|^(d-2)")
def _two_point(cfg, clock):
    g = cfg.geometry
    z = _cplx(g["z"])
    est, ver, rows = {}, {}, []
    for k in cfg.kappas:
        prm = SleParams(k)
        vals = []
        for s in g["s"]:
            G2 = conditioned.estimate_two_point_green(z, z + s, g["eps_ratio"] * s, cfg.budgets["paths"],
                                                      derive_seed(cfg.seed, "pair", k, s), prm)
            vals.append(G2)
            rows.append([s, G2.mean, G2.stderr])
        y = np.log([v.mean for v in vals])
        wts = np.array([v.mean / v.stderr for v in vals])
        slope = float(np.polyfit(np.log(g["s"]), y, 1, w=wts)[0])
        est[f"kappa={k:.6g}"] = {"slope": slope, "target": prm.d - 2,
                                 "G": {f"{s:g}": _est(v) for s, v in zip(g["s"], vals)}}
        ver[f"slope[kappa={k:.6g}]"] = abs(slope - (prm.d - 2)) <= cfg.tolerances["slope"]
    return est, ver, {"two_point": (["dist", "Ghat", "stderr"], rows)}


def _check_two(cfg):
    p = []
    _check_upper(cfg, p, "z")
    _check_paths(cfg, p, "paths")
    s = cfg.geometry.get("s", [])
    _need(p, "geometry", "s", len(s) >= 2 and all(v > 0 for v in s), "need at least two positive separations")
    r = cfg.geometry.get("eps_ratio")
    _need(p, "geometry", "eps_ratio", isinstance(r, (int, float)) and 0 < r < 0.5, "must lie in (0, 1/2)")
    return p


@register("correlation-lower",
          {"geometry": {"zs": [[0, 1], [0.5, 1], [-0.5, 1.5]], "ws": [[0, 2], [1, 0.5], [-1, 1]], "eps": 0.05},
           "budgets": {"paths": 1000}},
          check=lambda cfg: _check_corr(cfg), summary="F(z, w) + F(w, z) is bounded below")
def _correlation(cfg, clock):
    g = cfg.geometry
    est, ver, rows = {}, {}, []
    for k in cfg.kappas:
        prm = SleParams(k)
        sums = []
        for zi in g["zs"]:
            for wi in g["ws"]:
                z, w = _cplx(zi), _cplx(wi)
                G2 = conditioned.estimate_two_point_green(z, w, g["eps"], cfg.budgets["paths"],
                                                          derive_seed(cfg.seed, "pair", k, z, w), prm)
                F, se = G2.extra["F_sum"], G2.extra["F_sum_se"]
                sums.append((F, se, z, w))
                rows.append([z.real, z.imag, w.real, w.imag, G2.extra["F_zw"], G2.extra["F_wz"], F, se])
        worst = min(sums, key=lambda r: r[0] - 3 * r[1])
        c = min(r[0] for r in sums)
        est[f"kappa={k:.6g}"] = {"calibrated_c": c, "calibrated_c_3se": float(worst[0] - 3 * worst[1]),
                                 "worst_pair": [worst[2], worst[3]], "min_z": float(min(r[0] / r[1] for r in sums))}
        ver[f"positive[kappa={k:.6g}]"] = all(r[0] > 3 * r[1] for r in sums)
    return est, ver, {"pairs": (["z_re", "z_im", "w_re", "w_im", "F_zw", "F_wz", "F_sum", "stderr"], rows)}


def _check_corr(cfg):
    p = []
    _check_paths(cfg, p, "paths")
    g = cfg.geometry
    try:
        zs = [_cplx(v) for v in g["zs"]]
        ws = [_cplx(v) for v in g["ws"]]
        if not all(c.imag > 0 for c in zs + ws):
            p.append("geometry.zs/ws: points must lie in the upper half plane")
        elif g["eps"] <= 0 or any(g["eps"] > min(z.imag, w.imag, abs(z - w) / 4) for z in zs for w in ws):
            p.append("geometry.eps: need 0 < eps <= min(Im z, Im w, |z - w|/4) for every pair")
    except (TypeError, ValueError, KeyError):
        p.append("geometry.zs/ws: lists of complex numbers needed")
    return p


@register("lshape",
          {"geometry": {"zs": [[0, 1], [math.sqrt(0.5), math.sqrt(0.5)], [0.95, 0.1]], "rho": 0.25,
                        "eps_ratio": 0.1},
           "budgets": {"paths": 2000}},
          check=lambda cfg: _check_lshape(cfg), summary="the curve stays near L_z with positive probability")
def _lshape(cfg, clock):
    g = cfg.geometry
    est, ver = {}, {}
    for k in cfg.kappas:
        prm = SleParams(k)
        for zi in g["zs"]:
            z = _cplx(zi)
            eps = min(g["eps_ratio"] * g["rho"] * abs(z), 0.5 * z.imag)
            p = conditioned.lshape_probability(z, g["rho"], eps, cfg.budgets["paths"],
                                               derive_seed(cfg.seed, "lshape", k, z), prm)
            tag = f"kappa={k:.6g},z={z:.4g}"
            est[tag] = {**_est(p), "eps": eps, "koebe_frac": p.extra["koebe_frac"]}
            ver[f"positive[{tag}]"] = p.mean > 3 * p.stderr
    return est, ver, {}


def _check_lshape(cfg):
    p = []
    _check_paths(cfg, p, "paths")
    g = cfg.geometry
    _need(p, "geometry", "rho", isinstance(g.get("rho"), (int, float)) and 0 < g["rho"] <= 0.5,
          "must lie in (0, 1/2]")
    _need(p, "geometry", "eps_ratio", isinstance(g.get("eps_ratio"), (int, float)) and 0 < g["eps_ratio"] < 1,
          "must lie in (0, 1)")
    try:
        _need(p, "geometry", "zs", all(_cplx(v).imag > 0 for v in g["zs"]), "points must lie in the upper half plane")
    except (TypeError, ValueError):
        p.append("geometry.zs: list of complex numbers needed")
    return p


# natural parametrization ensembles ------------------------------------

_NP_GEOM = {"D": [-1.0, 1.0, 0.25, 1.25], "T": 1.0}
_NP_BUD = {"quadrature": [40, 20], "tip_rule": [16, 24], "step_log2": 18, "c_step": 0.01, "phi_paths": 4000}


def _np_setup(cfg):
    prm = SleParams(cfg.kappas[0])
    D = natparam.BoxDomain(*[float(v) for v in cfg.geometry["D"]])
    quad = natparam.QuadGrid(*cfg.budgets["quadrature"])
    rule = natparam.TipRule(*cfg.budgets["tip_rule"])
    c = cfg.budgets.get("c_step")
    stepping = None if c is None else natparam.Stepping(float(c))
    spec = PhiSpec(kappa=prm.kappa, n_paths=cfg.budgets["phi_paths"])
    phi = load_phi(spec, cfg.options.get("cache_dir"))
    return prm, D, quad, (rule, stepping), phi


def _np_one(job):
    prm, D, quad, (rule, stepping), phi, T, step, seed, n_list, eps_list, scale = job
    drv = sample_driving(prm, T, step, seed)
    if scale != 1:
        drv = drv.scaled(scale)
        D, T = D.scaled(scale), T * scale * scale
        if stepping is not None:
            # keep the block rule the exact image of the unscaled one
            stepping = natparam.Stepping(stepping.c_step, stepping.dt_max * scale * scale)
    r = natparam.theta_levels(drv, D, T, n_list, phi, quad, prm, eps_list=eps_list, rule=rule,
                              stepping=stepping)
    return {"times": r["times"], "psi": r["psi"], "theta": r["theta"], "minkowski": r["minkowski"],
            "minkowski_area": r["minkowski_area"]}


def _np_ensemble(cfg, clock, n_list, eps_list=(), scale=1.0, label="driver"):
    prm, D, quad, rule, phi = _np_setup(cfg)
    T = float(cfg.geometry["T"])
    step = 2.0 ** -cfg.budgets["step_log2"]
    jobs = [(prm, D, quad, rule, phi, T, step, derive_seed(cfg.seed, label, i), n_list, tuple(eps_list), scale)
            for i in range(cfg.budgets["drivers"])]
    out, partial = [], False
    nw = workers()
    if nw > 1:
        with ProcessPoolExecutor(nw) as ex:
            for r in ex.map(_np_one, jobs, chunksize=4):
                out.append(r)
                if clock.out_of_time():
                    partial = True
                    break
    else:
        for j in jobs:
            out.append(_np_one(j))
            if clock.out_of_time():
                partial = True
                break
    return out, partial, prm, D


def _mean_se(x, axis=0):
    x = np.asarray(x, dtype=float)
    n = x.shape[axis]
    if n < 2:
        return x.mean(axis=axis), np.full_like(x.mean(axis=axis), np.inf)
    return x.mean(axis=axis), x.std(axis=axis, ddof=1) / math.sqrt(n)


@register("natparam-drift",
          {"geometry": dict(_NP_GEOM, T_list=[0.25, 0.5, 1.0]), "budgets": dict(_NP_BUD, drivers=500),
           "options": {"n": 6, "cache_dir": None, "max_seconds": 1800}},
          check=lambda cfg: _check_np(cfg), summary="Psi_T + Theta_{T,n} has constant mean; Theta increases")
def _np_drift(cfg, clock):
    n = cfg.options["n"]
    rows, partial, prm, D = _np_ensemble(cfg, clock, [n])
    Ts = cfg.geometry["T_list"]
    times = rows[0]["times"]
    idx = [int(np.argmin(np.abs(times - T))) for T in Ts]
    mono = [bool(np.all(np.diff(r["theta"][n]) >= 0)) for r in rows]
    mart = np.array([[r["psi"][i] + r["theta"][n][i] for i in idx] for r in rows])
    m, se = _mean_se(mart)
    diffs = mart[:, 1:] - mart[:, :1]
    dm, dse = _mean_se(diffs)
    th = np.array([r["theta"][n][-1] for r in rows])
    tm, tse = _mean_se(th)
    psi0 = float(rows[0]["psi"][0])
    est = {"drivers": len(rows), "monotone_paths": int(sum(mono)), "psi0": psi0,
           "mart_mean": dict(zip(map(str, Ts), m)), "mart_se": dict(zip(map(str, Ts), se)),
           "diff_vs_first": dict(zip(map(str, Ts[1:]), dm)), "diff_se": dict(zip(map(str, Ts[1:]), dse)),
           "theta_T": {"mean": tm, "se": tse}}
    ver = {"monotone": all(mono),
           "constant_mean": bool(np.all(np.abs(dm) <= 3 * dse)),
           "theta_positive": bool(tm > 3 * tse)}
    curve = [[float(t), n, float(v)] for t, v in zip(times, np.mean([r["theta"][n] for r in rows], axis=0))]
    return est, ver, {"theta_curve": (["t", "n", "theta"], curve)}, partial


def _check_np(cfg):
    p = []
    _check_natparam(cfg, p)
    o = cfg.options
    for key in ("n",):
        if key in o:
            _need(p, "options", key, _positive_int(o[key]) and o[key] <= cfg.budgets.get("step_log2", 0),
                  "level must be a positive integer not above step_log2")
    if "n_list" in o:
        _need(p, "options", "n_list", len(o["n_list"]) >= 2 and all(_positive_int(v) for v in o["n_list"])
              and max(o["n_list"]) <= cfg.budgets.get("step_log2", 0), "need levels within step_log2")
    if "T_list" in cfg.geometry:
        T = cfg.geometry.get("T", 0)
        _need(p, "geometry", "T_list", all(0 < t <= T for t in cfg.geometry["T_list"]), "need 0 < t <= T")
    if "eps" in cfg.geometry:
        _need(p, "geometry", "eps", all(e > 0 for e in cfg.geometry["eps"]), "need positive values")
    return p


@register("natparam-cauchy",
          {"geometry": dict(_NP_GEOM), "budgets": dict(_NP_BUD, drivers=150),
           "options": {"n_list": [4, 5, 6], "cache_dir": None, "max_seconds": None}},
          check=lambda cfg: _check_np(cfg), summary="mean |Theta_{T,n+1} - Theta_{T,n}| decreases in n")
def _np_cauchy(cfg, clock):
    ns = sorted(cfg.options["n_list"])
    rows, partial, prm, D = _np_ensemble(cfg, clock, ns)
    th = np.array([[r["theta"][n][-1] for n in ns] for r in rows])
    d = np.abs(np.diff(th, axis=1))
    dm, dse = _mean_se(d)
    tm, tse = _mean_se(th)
    est = {"drivers": len(rows), "levels": ns, "diff_mean": dm, "diff_se": dse, "theta_mean": tm, "theta_se": tse}
    ver = {"decreasing": bool(np.all(np.diff(dm) < 0))}
    table = [[n, float(a), float(b)] for n, a, b in zip(ns[:-1], dm, dse)]
    return est, ver, {"level_diffs": (["n", "mean_abs_diff", "stderr"], table)}, partial


@register("minkowski",
          {"geometry": dict(_NP_GEOM, eps=[0.2, 0.1, 0.05]), "budgets": dict(_NP_BUD, drivers=300),
           "options": {"n": 6, "form": "passage", "cache_dir": None, "max_seconds": None}},
          check=lambda cfg: _check_np(cfg) + _check_form(cfg),
          summary="Minkowski estimate approaches Theta as eps shrinks")
def _minkowski(cfg, clock):
    n = cfg.options["n"]
    eps = sorted(cfg.geometry["eps"], reverse=True)
    rows, partial, prm, D = _np_ensemble(cfg, clock, [n], eps_list=eps)
    th = np.array([r["theta"][n][-1] for r in rows])
    est = {"drivers": len(rows), "eps": eps, "theta_mean": _mean_se(th)}
    ver = {}
    table = []
    for form, key in (("passage", "minkowski"), ("area", "minkowski_area")):
        mk = np.array([[r[key][e] for e in eps] for r in rows])
        ad = np.abs(mk - th[:, None])
        am, ase = _mean_se(ad)
        mm, mse = _mean_se(mk)
        est[form] = {"mean": mm, "se": mse, "abs_diff_mean": am, "abs_diff_se": ase}
        ok = bool(np.all(np.diff(am) < 0))
        if form == cfg.options["form"]:
            ver["abs_diff_decreasing"] = ok
        else:
            est[form]["decreasing"] = ok
        table += [[form, e, float(a), float(s)] for e, a, s in zip(eps, am, ase)]
    return est, ver, {"abs_diff": (["form", "eps", "mean_abs_diff", "stderr"], table)}, partial


def _check_form(cfg):
    f = cfg.options.get("form")
    return [] if f in ("passage", "area") else ["options.form: must be 'passage' or 'area'"]


@register("dimension-scaling",
          {"geometry": dict(_NP_GEOM, r=[1, 2, 4]), "budgets": dict(_NP_BUD, drivers=40),
           "options": {"n": 5, "cache_dir": None, "max_seconds": None}, "tolerances": {"slope": 0.15}},
          check=lambda cfg: _check_np(cfg) + _check_scales(cfg), summary="Theta scales like r^d")
def _dimension(cfg, clock):
    n = cfg.options["n"]
    rs = cfg.geometry["r"]
    means, table = [], []
    partial = False
    for r in rs:
        rows, part, prm, D = _np_ensemble(cfg, clock, [n], scale=float(r))
        partial |= part
        th = np.array([row["theta"][n][-1] for row in rows])
        m, se = _mean_se(th)
        means.append(m)
        table.append([r, float(m), float(se)])
    slope = float(np.polyfit(np.log(rs), np.log(means), 1)[0])
    est = {"slope": slope, "d": prm.d, "theta_mean": dict(zip(map(str, rs), means))}
    ver = {"slope": abs(slope - prm.d) <= cfg.tolerances["slope"]}
    return est, ver, {"scaling": (["r", "theta_mean", "stderr"], table)}, partial


def _check_scales(cfg):
    r = cfg.geometry.get("r", [])
    return [] if len(r) >= 2 and all(v > 0 for v in r) else ["geometry.r: need at least two positive scales"]


# ------------------------------------------------------------------ driver --

def default_config(name: str, **over) -> ExperimentConfig:
    return ExperimentConfig.from_dict({"experiment": name, **over})


def run_experiment(config: ExperimentConfig, write: bool = True) -> ResultRecord:
    """Run one registered experiment; with ``write`` the JSON record and CSV tables go to ``config.out``."""
    config.validate()
    exp = REGISTRY[config.experiment]
    clock = _Clock(config.options.get("max_seconds"))
    out = exp.run(config, clock)
    est, ver, tables = out[:3]
    partial = bool(out[3]) if len(out) > 3 else False
    rec = ResultRecord(config.experiment, config.hash(), config.seed, _jsonable(est),
                       {k: bool(v) for k, v in ver.items()}, clock.elapsed, partial, tables, config.to_dict())
    if write:
        d = Path(config.out)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / f"{config.experiment}.json", "w") as fh:
            json.dump(rec.to_dict(), fh, indent=2)
        emit_plotdata(rec, d)
    return rec

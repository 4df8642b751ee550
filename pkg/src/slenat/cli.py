"""Command line entry point: ``slenat <subcommand> ...``.

Every subcommand writes CSV or JSON.  ``experiment`` exits 0 when all
verdicts pass, 1 when one fails and 2 on a usage or configuration error.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import conditioned, diffusions, harness, natparam, observables
from .core import NotComputedError, SleParams
from .loewner import DrivingPath, extract_trace, flow_point, sample_driving

EXIT_FAIL, EXIT_USAGE = 1, 2


def _complex_list(text):
    return [complex(v.replace(" ", "")) for v in text.split(",") if v.strip()]


def _float_list(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _driver(args, params):
    if args.driver:
        return DrivingPath.from_csv(args.driver)
    return sample_driving(params, args.horizon, args.step, args.seed)


def _add_driver_args(p, horizon=1.0):
    p.add_argument("--driver", help="driving path CSV (t,U); otherwise a Brownian driver is sampled")
    p.add_argument("--horizon", type=float, default=horizon)
    p.add_argument("--step", type=float, default=2.0 ** -12)
    p.add_argument("--seed", type=int, default=0)


def _write_json(obj, path):
    text = json.dumps(obj, indent=2, default=float)
    if path in (None, "-"):
        print(text)
    else:
        Path(path).write_text(text + "\n")


def cmd_simulate(args):
    drv = sample_driving(SleParams(args.kappa), args.horizon, args.step, args.seed)
    drv.to_csv(args.out)


def cmd_trace(args):
    params = SleParams(args.kappa)
    drv = _driver(args, params)
    if args.point is None:
        extract_trace(drv, params).to_csv(args.out)
    else:
        flow_point(drv, complex(args.point), params, refine=args.refine).to_csv(args.out)


def cmd_green(args):
    params = SleParams(args.kappa)
    if args.points:
        zs = _complex_list(args.points)
    else:
        x0, x1, y0, y1 = args.box
        xs, ys = np.linspace(x0, x1, args.nx), np.linspace(y0, y1, args.ny)
        zs = (xs[None, :] + 1j * ys[:, None]).ravel()
    times = _float_list(args.times) if args.times else []
    drv = _driver(args, params) if times else None
    observables.green_grid_csv(params, zs, args.out, driving=drv, times=times)


def cmd_psi(args):
    params = SleParams(args.kappa)
    rows = [(t, x, diffusions.psi_estimate(t, x, args.paths, args.seed, params, dt=args.dt))
            for t in _float_list(args.t) for x in _float_list(args.x)]
    diffusions.psi_table_csv(rows, args.out)


def cmd_twosided(args):
    params = SleParams(args.kappa)
    if (args.z is None) == (args.x is None):
        raise SystemExit("twosided: give exactly one of --z (radial) or --x (chordal)")
    if args.z is not None:
        res = conditioned.radial_batch(complex(args.z), args.eps, args.paths, args.seed, params)
    else:
        res = conditioned.chordal_batch(args.x, args.eps, args.paths, args.seed, params)
    conditioned.write_run_archive(res, args.out)


def cmd_fzw(args):
    params = SleParams(args.kappa)
    z, w = complex(args.z), complex(args.w)
    est = conditioned.estimate_F(z, w, args.eps, args.paths, args.seed, params, refine=args.refine)
    out = {"kappa": params.kappa, "z": [z.real, z.imag], "w": [w.real, w.imag], "eps": args.eps,
           "seed": args.seed, "F": est.to_dict()}
    if args.symmetric:
        est2 = conditioned.estimate_F(w, z, args.eps, args.paths, args.seed + 1, params)
        out["F_reverse"] = est2.to_dict()
    _write_json(out, args.out)


def cmd_natparam(args):
    params = SleParams(args.kappa)
    drv = _driver(args, params)
    spec = harness.PhiSpec(kappa=params.kappa, n_paths=args.phi_paths)
    phi = harness.load_phi(spec, args.cache_dir)
    D = natparam.BoxDomain(*args.box)
    quad = natparam.QuadGrid(args.nx, args.ny)
    stepping = None if args.c_step is None else natparam.Stepping(args.c_step)
    est = natparam.theta_tn(drv, D, args.T, args.n, phi, quad, params, stepping=stepping)
    est.to_csv(args.out)


def cmd_experiment(args):
    if args.list:
        for name, exp in harness.REGISTRY.items():
            print(f"{name:28s} {exp.summary}")
        return 0
    if not args.name:
        raise harness.ConfigError(["experiment: name required; registered: " + ", ".join(harness.REGISTRY)])
    d = json.loads(Path(args.config).read_text()) if args.config else {}
    d.setdefault("experiment", args.name)
    if d["experiment"] != args.name:
        raise harness.ConfigError([f"experiment: config names {d['experiment']!r}, command line {args.name!r}"])
    if args.seed is not None:
        d["seed"] = args.seed
    if args.out is not None:
        d["out"] = args.out
    if args.cache_dir is not None:
        d.setdefault("options", {})["cache_dir"] = args.cache_dir
    cfg = harness.ExperimentConfig.from_dict(d)
    rec = harness.run_experiment(cfg)
    for k, v in rec.verdicts.items():
        print(f"{k:24s} {'pass' if v else 'FAIL'}")
    print(f"{'partial' if rec.partial else 'complete'} in {rec.wall_clock:.1f}s -> {cfg.out}")
    return 0 if rec.passed else EXIT_FAIL


def cmd_cache(args):
    spec = harness.PhiSpec(kappa=args.kappa, n_paths=args.paths, seed=args.seed)
    status = harness.manage_cache(args.action, spec, args.cache_dir, seed=args.seed)
    _write_json(status, None)
    return EXIT_FAIL if args.action == "verify" and status["status"] != "ok" else 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="slenat", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="sample a Brownian driver and write it as CSV (t,U)")
    p.add_argument("--kappa", type=float, default=8 / 3)
    p.add_argument("--horizon", type=float, default=1.0)
    p.add_argument("--step", type=float, default=2.0 ** -12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("trace", help="trace CSV (t,re,im), or with --point the flow of one point")
    p.add_argument("--kappa", type=float, default=8 / 3)
    _add_driver_args(p)
    p.add_argument("--point", help="complex z; writes t,X,Y,absdg,upsilon,S")
    p.add_argument("--refine", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_trace)

    p = sub.add_parser("green", help="G on points or a grid, optionally with M_t columns")
    p.add_argument("--kappa", type=float, default=8 / 3)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--points", help="comma separated complex numbers, e.g. 1j,0.5+0.5j")
    g.add_argument("--box", type=float, nargs=4, metavar=("X0", "X1", "Y0", "Y1"))
    p.add_argument("--nx", type=int, default=21)
    p.add_argument("--ny", type=int, default=11)
    p.add_argument("--times", help="comma separated times for M_t columns")
    _add_driver_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_green)

    p = sub.add_parser("psi", help="Monte Carlo psi(t, x) table (t,x,psi,stderr,n)")
    p.add_argument("--kappa", type=float, default=8 / 3)
    p.add_argument("--t", required=True, help="comma separated times")
    p.add_argument("--x", required=True, help="comma separated angles in (0, pi)")
    p.add_argument("--paths", type=int, default=10000)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_psi)

    p = sub.add_parser("twosided", help="two-sided radial (--z) or chordal (--x) run archive")
    p.add_argument("--kappa", type=float, default=8 / 3)
    p.add_argument("--z")
    p.add_argument("--x", type=float)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--paths", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="prefix for <out>.csv and <out>.json")
    p.set_defaults(fn=cmd_twosided)

    p = sub.add_parser("fzw", help="estimate F(z, w) under two-sided radial SLE to z")
    p.add_argument("--kappa", type=float, default=8 / 3)
    p.add_argument("--z", required=True)
    p.add_argument("--w", required=True)
    p.add_argument("--eps", type=float, default=0.05)
    p.add_argument("--paths", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--refine", action="store_true", help="repeat at eps/2 and report the change")
    p.add_argument("--symmetric", action="store_true", help="also estimate F(w, z)")
    p.add_argument("--out", default="-")
    p.set_defaults(fn=cmd_fzw)

    p = sub.add_parser("natparam", help="Theta_{t,n}(D) curve as CSV (t,theta,n)")
    p.add_argument("--kappa", type=float, default=8 / 3)
    _add_driver_args(p)
    p.set_defaults(step=2.0 ** -18)
    p.add_argument("--box", type=float, nargs=4, default=[-1.0, 1.0, 0.25, 1.25],
                   metavar=("X0", "X1", "Y0", "Y1"))
    p.add_argument("--T", type=float, default=1.0)
    p.add_argument("--n", type=int, default=6)
    p.add_argument("--nx", type=int, default=40)
    p.add_argument("--ny", type=int, default=20)
    p.add_argument("--c-step", type=float, default=0.01, help="adaptive block constant (0 for uniform steps)")
    p.add_argument("--phi-paths", type=int, default=4000)
    p.add_argument("--cache-dir")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_natparam)

    p = sub.add_parser("experiment", help="run a registered acceptance experiment")
    p.add_argument("name", nargs="?")
    p.add_argument("--config", help="JSON config; missing fields take the registry defaults")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--cache-dir")
    p.add_argument("--list", action="store_true", help="list registered experiments")
    p.set_defaults(fn=cmd_experiment)

    p = sub.add_parser("cache", help="build, verify or purge the cached phi grid")
    p.add_argument("action", choices=["build", "verify", "purge"])
    p.add_argument("--kappa", type=float, default=8 / 3)
    p.add_argument("--paths", type=int, default=4000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cache-dir")
    p.set_defaults(fn=cmd_cache)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if getattr(args, "c_step", None) == 0:
        args.c_step = None
    try:
        rc = args.fn(args)
    except harness.ConfigError as e:
        for line in e.problems:
            print(f"config error: {line}", file=sys.stderr)
        return EXIT_USAGE
    except NotComputedError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())

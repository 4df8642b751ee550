import json
import math

import numpy as np
import pytest

from slenat.conditioned import (
    chordal_batch,
    delta_statistic,
    driver_confinement,
    estimate_F,
    estimate_two_point_green,
    hit_probability,
    lshape_probability,
    radial_batch,
    sample_two_sided_chordal,
    sample_two_sided_radial,
    write_run_archive,
)
from slenat.core import SleParams
from slenat.observables import green

K83 = SleParams(8 / 3)


def test_radial_run_stops_at_eps_near_target():
    z, eps = 0.3 + 1j, 0.02
    run = sample_two_sided_radial(z, eps, 1, K83)
    assert run.status == "stopped"
    tp = run.tracked
    ups = tp.Z.imag / abs(tp.dg)
    assert ups <= eps and ups > 0.5 * eps
    # Koebe: the tip sits within 4 eps of z
    assert abs(run.trace.points[-1] - z) <= 4 * eps * 1.2
    assert run.driving.values[0] == 0 and math.isclose(run.driving.horizon, run.tau)


def test_radial_rejects():
    with pytest.raises(ValueError):
        sample_two_sided_radial(0.5, 0.1, 0, K83)
    with pytest.raises(ValueError):
        sample_two_sided_radial(0.5 + 0.1j, 0.2, 0, K83)


def test_radial_reflection_symmetry():
    z = 0.4 + 0.8j
    # the noise is not reflected, so compare in law
    a = radial_batch(z, 0.05, 600, 3, K83)
    b = radial_batch(-z.conjugate(), 0.05, 600, 4, K83)
    for u, v in ((a.U, -b.U), (a.t, b.t)):
        se = math.hypot(u.std(), v.std()) / math.sqrt(u.size)
        assert abs(u.mean() - v.mean()) < 4 * se


def test_chordal_run_stops_near_target():
    x, eps = 1.0, 0.02
    run = sample_two_sided_chordal(x, eps, 2, K83)
    assert run.status == "stopped"
    assert run.tracked.Z.real / abs(run.tracked.dg) <= eps
    assert abs(run.trace.points[-1] - x) <= 4 * eps * 1.2
    with pytest.raises(ValueError):
        sample_two_sided_chordal(-1.0, eps, 0, K83)


def test_chordal_horizon_stop():
    run = sample_two_sided_chordal(1.0, 1e-6, 0, K83, horizon=0.05)
    assert run.status == "horizon" and math.isclose(run.tau, 0.05)


def test_F_scale_invariant():
    z, w, eps, r = 0.2 + 1j, -0.5 + 0.6j, 0.05, 3.0
    f1 = estimate_F(z, w, eps, 100, 7, K83, dt_max=math.inf)
    f2 = estimate_F(r * z, r * w, r * eps, 100, 7, K83, dt_max=math.inf)
    assert math.isclose(f1.mean, f2.mean, rel_tol=1e-6)
    assert f1.mean > 0
    with pytest.raises(ValueError):
        estimate_F(z, z, eps, 10, 0, K83)


def test_two_point_green_symmetric():
    z, w = 0.1 + 1j, 0.6 + 0.5j
    g1 = estimate_two_point_green(z, w, 0.05, 100, 4, K83)
    g2 = estimate_two_point_green(w, z, 0.05, 100, 4, K83)
    assert g1.mean == g2.mean
    assert g1.extra["F_zw"] == g2.extra["F_wz"]
    assert math.isclose(g1.mean, float(green(K83, z) * green(K83, w)) * g1.extra["F_sum"])


def test_lshape_probability_bounds():
    est = lshape_probability(0.5 + 1j, 0.3, 0.05, 100, 0, K83)
    assert 0 < est.mean <= 1
    assert est.extra["koebe_frac"] == 1.0
    wide = lshape_probability(0.5 + 1j, 0.5, 0.05, 100, 0, K83)
    assert wide.mean >= est.mean


def test_hit_probability_bounds():
    est = hit_probability(1j, 0.5, 200, 1, K83)
    assert 0 < est.mean < 1
    assert est.extra["half_horizon_mean"] <= est.mean


def test_driver_confinement_monotone():
    vals = driver_confinement(0.3 + 1j, [0.5, 1, 2, 4], 0.05, 100, 2, K83)
    assert all(0 <= v <= 1 for v in vals) and vals == sorted(vals)


def test_delta_statistic_at_least_initial_ratio():
    d = delta_statistic(1.0, 1.5, 2.5, 0.05, 30, 0, K83)
    assert np.all(d >= 2.5 / 1.5 - 1e-12)
    with pytest.raises(ValueError):
        delta_statistic(1.0, 0.5, 2.5, 0.05, 3, 0, K83)


def test_batch_runs_independent_of_batch_size():
    a = chordal_batch(1.0, 0.05, 6, 5, K83)
    b = chordal_batch(1.0, 0.05, 3, 5, K83)
    assert np.array_equal(a.U[:3], b.U) and np.array_equal(a.t[:3], b.t)


def test_write_run_archive(tmp_path):
    res = radial_batch(1j, 0.1, 5, 0, K83)
    write_run_archive(res, tmp_path / "run")
    rows = np.loadtxt(tmp_path / "run.csv", delimiter=",", skiprows=1)
    assert rows.shape == (5, 8)
    man = json.loads((tmp_path / "run.json").read_text())
    assert man["mode"] == "radial" and man["counts"]["stopped"] == 5

import json
import math

import numpy as np
import pytest

from slenat.core import NotComputedError, SleParams
from slenat.loewner import DrivingPath, driving_from_function, sample_driving
from slenat.natparam import (
    BoxDomain,
    PhiGrid,
    QuadGrid,
    Stepping,
    estimate_phi,
    green_integral,
    grid_flow,
    minkowski_estimate,
    minkowski_set,
    psi_integral,
    theta_convergence_diag,
    theta_levels,
    theta_tn,
    verify_phi_cells,
)

K83 = SleParams(8 / 3)
D = BoxDomain(-1.0, 1.0, 0.25, 1.25)


def test_box_and_quadrature():
    with pytest.raises(ValueError):
        BoxDomain(0, 1, 0, 1)
    with pytest.raises(ValueError):
        BoxDomain(1, 0, 0.1, 1)
    z, w = QuadGrid(7, 5).nodes(D)
    assert math.isclose(w.sum(), D.area) and np.all(D.contains(z))
    # order 3 Gauss integrates x^4 y^2 exactly
    z, w = QuadGrid(2, 2, order=3).nodes(D)
    exact = (1 / 5 + 1 / 5) * (1.25 ** 3 - 0.25 ** 3) / 3
    assert math.isclose(w @ (z.real ** 4 * z.imag ** 2), exact, rel_tol=1e-12)


def test_phi_grid_shape_and_symmetry(small_phi):
    phi = small_phi
    assert np.all((phi.values >= 0) & (phi.values <= 1))
    # phi(r e^{i theta}) = P{T <= 1/r^2} decreases along each ray
    assert np.all(np.diff(phi.values, axis=1) <= 0)
    z = np.array([0.3 + 0.2j, -0.1 + 0.05j, 0.02 + 0.5j])
    assert np.allclose(phi(z), phi(-z.conj()))
    assert phi(2j) == 0.0 and phi(0.5 - 0.1j) == 0.0
    i, j = 5, 10
    node = math.exp(phi.logr[j]) * complex(math.cos(phi.thetas[i]), math.sin(phi.thetas[i]))
    assert math.isclose(phi(node), phi.values[i, j], abs_tol=1e-12)


def test_phi_grid_round_trip_and_tamper(small_phi, tmp_path):
    p = tmp_path / "phi.json"
    small_phi.to_json(p)
    back = PhiGrid.from_json(p)
    assert back.key == small_phi.key and np.array_equal(back.values, small_phi.values)
    doc = json.loads(p.read_text())
    doc["body"]["values"][3] += 0.01
    p.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="digest"):
        PhiGrid.from_json(p)
    doc = json.loads((tmp_path / "phi.json").read_text())
    doc["header"]["eps"] = 0.5
    p.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="key"):
        PhiGrid.from_json(p)


def test_phi_cells_reproduce(small_phi):
    assert verify_phi_cells(small_phi, cells=3, factor=2)["ok"]


def test_estimate_phi_cross_check():
    est = estimate_phi(0.3 + 0.5j, 800, 0.02, 1, K83)
    assert 0 < est.mean < 1 and est.extra["cross_ok"]


def test_psi_zero_matches_green_integral():
    drv = sample_driving(K83, 0.25, 2 ** -8, 0)
    ref = green_integral(D, K83)
    val = psi_integral(drv, 0.0, D, QuadGrid(20, 10, order=4), K83)
    assert math.isclose(val, ref, rel_tol=1e-8)


def test_theta_requires_phi_and_dyadic_times(small_phi):
    drv = sample_driving(K83, 0.5, 2 ** -10, 0)
    quad = QuadGrid(8, 4)
    with pytest.raises(NotComputedError):
        theta_tn(drv, D, 0.5, 3, None, quad, K83)
    with pytest.raises(ValueError):
        theta_tn(drv, D, 0.3, 3, small_phi, quad, K83)
    with pytest.raises(ValueError):
        theta_tn(drv, D, 0.5, 3, small_phi, quad, SleParams(2.0))
    with pytest.raises(ValueError):
        theta_tn(drv, D, 0.5, 3, small_phi, quad, K83, method="nope")


def test_theta_starts_at_zero_and_increases(small_phi):
    drv = sample_driving(K83, 1.0, 2 ** -12, 3)
    est = theta_tn(drv, D, 1.0, 4, small_phi, QuadGrid(20, 10), K83)
    assert est.theta[0] == 0.0 and np.all(np.diff(est.theta) >= 0)
    assert est.times.size == 17 and math.isclose(est.at(0.5), est.theta[8])


def test_theta_zero_when_curve_stays_far(small_phi):
    # vertical slit of height sqrt(2a) never brings Z_s(w) 2^(n/2) below the phi support
    drv = driving_from_function(lambda t: 0.0, 1.0, 2 ** -8)
    far = BoxDomain(3.0, 4.0, 0.5, 1.0)
    est = theta_tn(drv, far, 1.0, 6, small_phi, QuadGrid(10, 5), K83)
    assert np.all(est.theta == 0.0)


def test_theta_methods_agree(small_phi):
    drv = sample_driving(K83, 0.25, 2 ** -12, 5)
    quad = QuadGrid(80, 40)
    split = theta_tn(drv, D, 0.25, 3, small_phi, quad, K83).theta[-1]
    pull = theta_tn(drv, D, 0.25, 3, small_phi, quad, K83, method="pullback").theta[-1]
    zsp = theta_tn(drv, D, 0.25, 3, small_phi, quad, K83, method="zspace", nx=200, ny=200).theta[-1]
    assert split > 0
    assert abs(split - zsp) < 0.05 * split
    assert abs(split - pull) < 0.1 * split


def test_adaptive_matches_uniform(small_phi):
    drv = sample_driving(K83, 0.25, 2 ** -14, 6)
    quad = QuadGrid(20, 10)
    uni = theta_tn(drv, D, 0.25, 3, small_phi, quad, K83)
    ada = theta_tn(drv, D, 0.25, 3, small_phi, quad, K83, stepping=Stepping())
    assert np.allclose(ada.psi, uni.psi, rtol=0.02)
    assert abs(ada.theta[-1] - uni.theta[-1]) < 0.03 * uni.theta[-1]
    with pytest.raises(ValueError):
        grid = np.concatenate([[0.0], np.cumsum(np.linspace(0.01, 0.02, 10))])
        grid_flow(DrivingPath(grid, np.zeros(11)), D, quad, [grid[-1]], K83, stepping=Stepping())


def test_theta_additive_over_boxes(small_phi):
    drv = sample_driving(K83, 0.5, 2 ** -10, 7)
    left, right = BoxDomain(-1, 0, 0.25, 1.25), BoxDomain(0, 1, 0.25, 1.25)
    whole = theta_tn(drv, D, 0.5, 3, small_phi, QuadGrid(20, 10), K83).theta
    parts = (theta_tn(drv, left, 0.5, 3, small_phi, QuadGrid(10, 10), K83).theta
             + theta_tn(drv, right, 0.5, 3, small_phi, QuadGrid(10, 10), K83).theta)
    assert np.allclose(whole, parts, rtol=1e-9, atol=1e-12)
    m = minkowski_estimate(drv, D, 0.1, 0.5, QuadGrid(20, 10), K83)
    ml = minkowski_estimate(drv, left, 0.1, 0.5, QuadGrid(10, 10), K83)
    mr = minkowski_estimate(drv, right, 0.1, 0.5, QuadGrid(10, 10), K83)
    assert math.isclose(m, ml + mr, rel_tol=1e-12)


def test_minkowski_sets_nest():
    drv = sample_driving(K83, 1.0, 2 ** -12, 8)
    quad = QuadGrid(40, 20)
    masks = [minkowski_set(drv, D, e, 1.0, quad, K83) for e in (0.05, 0.1, 0.2)]
    assert np.all(masks[1][masks[0]]) and np.all(masks[2][masks[1]])
    assert masks[2].any()
    area = minkowski_estimate(drv, D, 0.1, 1.0, quad, K83, form="area")
    passage = minkowski_estimate(drv, D, 0.1, 1.0, quad, K83)
    # the passage form keeps the overshoot above the level
    assert passage >= area > 0
    with pytest.raises(ValueError):
        minkowski_estimate(drv, D, 0.1, 1.0, quad, K83, form="volume")


def test_levels_and_convergence_diag(small_phi):
    drvs = [sample_driving(K83, 0.5, 2 ** -10, s) for s in (1, 2, 3)]
    quad = QuadGrid(10, 5)
    r = theta_levels(drvs[0], D, 0.5, [2, 3], small_phi, quad, K83, eps_list=[0.2])
    direct = theta_tn(drvs[0], D, 0.5, 2, small_phi, quad, K83)
    assert np.allclose(r["theta"][2], direct.theta)
    assert 0.2 in r["minkowski"] and 0.2 in r["minkowski_area"]
    diag = theta_convergence_diag(drvs, D, 0.5, [2, 3], small_phi, quad, K83)
    assert diag["diff_mean"].shape == (1,) and diag["theta_mean"].shape == (2,)
    assert diag["times"].size == 3

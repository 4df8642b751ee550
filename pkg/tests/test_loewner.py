import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slenat.core import SleParams
from slenat.geometry import dist_to_boundary
from slenat.loewner import (
    DrivingPath,
    driving_from_function,
    extract_trace,
    flow_point,
    flow_points,
    forward_map,
    inverse_map,
    sample_driving,
    slit_step,
)

K83 = SleParams(8 / 3)


def test_params_derived():
    p = SleParams(2.0)
    assert p.a == 1.0 and p.d == 1.25 and p.r == 2.0
    assert p.green_exponent == -(2 - p.d)
    for k in (0.5, 2, 8 / 3, 4, 6, 7.9):
        q = SleParams(k)
        assert q.a > 0.25 and 1 < q.d < 2


@pytest.mark.parametrize("k", [0, 8, -1, float("nan"), float("inf")])
def test_params_reject(k):
    with pytest.raises(ValueError):
        SleParams(k)


def test_driving_starts_at_zero_and_is_deterministic():
    a = sample_driving(K83, 1.0, 0.01, 7)
    b = sample_driving(K83, 1.0, 0.01, 7)
    assert a.values[0] == 0.0
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, sample_driving(K83, 1.0, 0.01, 8).values)


def test_driving_variance():
    u1 = np.array([sample_driving(K83, 1.0, 0.25, s).values[-1] for s in range(10_000)])
    se = math.sqrt(2.0 / (u1.size - 1))
    assert abs(u1.var(ddof=1) - 1.0) <= 3 * se


@pytest.mark.parametrize("h,s", [(float("nan"), 0.1), (1.0, float("inf")), (0.0, 0.1), (1.0, -0.1)])
def test_driving_rejects_bad_arguments(h, s):
    with pytest.raises(ValueError):
        sample_driving(K83, h, s, 0)


def test_driving_csv_round_trip(tmp_path):
    drv = sample_driving(K83, 1.0, 2 ** -8, 3)
    drv.to_csv(tmp_path / "u.csv")
    back = DrivingPath.from_csv(tmp_path / "u.csv")
    assert np.array_equal(back.grid, drv.grid) and np.array_equal(back.values, drv.values)
    assert back.seed == 3


def test_slit_step_hand_values():
    # 2a dt = 1 with a = 3/4
    g, dg = slit_step(2j, 0.0, 1 / 1.5, K83)
    assert abs(g - 1j * math.sqrt(3)) < 1e-14
    assert abs(dg - 2 / math.sqrt(3)) < 1e-14
    g, _ = slit_step(0.3 + 2j, 0.3, 1 / 1.5, K83)
    assert abs(g - (0.3 + 1j * math.sqrt(3))) < 1e-14


def test_flow_constant_driver_closed_form():
    for k in (2, 8 / 3, 6):
        p = SleParams(k)
        T = 0.9 / (2 * p.a)
        drv = driving_from_function(lambda t: 0.0, T, T / 500)
        fl = flow_point(drv, 1j, p)
        exact = 1j * np.sqrt(1 - 2 * p.a * drv.grid)
        assert np.max(np.abs(fl.Z - exact) / np.abs(exact)) < 1e-10
        ups = (1 - 2 * p.a * drv.grid)
        assert np.allclose(fl.upsilon, ups, rtol=1e-10)


def test_flow_initial_snapshot():
    drv = sample_driving(K83, 0.5, 0.01, 1)
    pt = flow_point(drv, 0.3 + 0.7j, K83)[0]
    assert pt.upsilon == 0.7 and abs(pt.sinangle - 0.7 / abs(0.3 + 0.7j)) < 1e-15 and pt.dg == 1


def test_swallowing_time_constant_driver():
    y = 1.0
    for k in (2, 8 / 3, 6):
        p = SleParams(k)
        ts = y * y / (2 * p.a)
        drv = driving_from_function(lambda t: 0.0, 1.2 * ts, 1e-5)
        assert abs(flow_point(drv, 1j * y, p).swallow_time - ts) < 1e-4


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(-1.5, 1.5), st.floats(0.05, 2.0))
def test_upsilon_non_increasing(seed, x, y):
    drv = sample_driving(K83, 1.0, 2 ** -8, seed)
    ups = flow_point(drv, complex(x, y), K83).upsilon
    ups = ups[np.isfinite(ups)]
    assert np.all(np.diff(ups) <= 1e-12 * ups[:-1])


def test_trace_constant_driver_is_vertical():
    drv = driving_from_function(lambda t: 0.0, 1.0, 2 ** -8)
    tr = extract_trace(drv, K83)
    assert tr.points[0] == 0
    assert np.allclose(tr.points[1:].real, 0, atol=1e-12)
    # tip at sqrt(2a dt) above the previous slit, so gamma(t_k) = i sqrt(2a t_k)
    assert np.allclose(tr.points.imag, np.sqrt(2 * K83.a * drv.grid), rtol=1e-10)


def test_trace_reflection():
    drv = sample_driving(K83, 0.5, 2 ** -8, 11)
    t1 = extract_trace(drv, K83).points
    t2 = extract_trace(drv.reflected(), K83).points
    assert np.allclose(t2, -t1.conj(), atol=1e-12)
    assert np.all(t1.imag >= -1e-12)


def test_inverse_map_identity_and_closed_form():
    drv = sample_driving(K83, 0.5, 0.01, 2)
    f, df = inverse_map(drv, 0.0, 0.4 + 0.9j, K83)
    assert f == 0.4 + 0.9j and df == 1
    s = 1 / (2 * K83.a)
    drv0 = driving_from_function(lambda t: 0.0, s, s / 64)
    f, df = inverse_map(drv0, s, 1j, K83)
    assert abs(f - 1j * math.sqrt(2)) < 1e-12


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000), st.floats(-2, 2), st.floats(0.05, 2))
def test_inverse_round_trip(seed, x, y):
    drv = sample_driving(K83, 0.5, 2 ** -7, seed)
    s = drv.grid[-1]
    z = complex(x, y)
    w, _ = inverse_map(drv, s, z, K83)
    Z, _ = forward_map(drv, s, w, K83)
    assert abs(Z - z) < 1e-8


def test_inverse_derivative_matches_forward():
    drv = sample_driving(K83, 0.5, 2 ** -7, 5)
    s = drv.grid[-1]
    z = 0.2 + 0.6j
    w, df = inverse_map(drv, s, z, K83)
    _, dg = forward_map(drv, s, w, K83)
    assert abs(df * abs(dg) - 1) < 1e-9


def test_flow_points_matches_flow_point():
    drv = sample_driving(K83, 0.5, 2 ** -8, 9)
    zs = [0.5 + 0.5j, -0.3 + 1.2j]
    Z, dg = flow_points(drv, zs, K83)
    for j, z in enumerate(zs):
        fl = flow_point(drv, z, K83)
        ok = np.isfinite(fl.Z)
        assert np.allclose(Z[ok, j], fl.Z[ok], rtol=1e-12)


@pytest.mark.parametrize("z0", [0.4 + 1.0j, -0.5 + 0.3j, 1 + 2j])
def test_smooth_driver_first_order(z0):
    from scipy.integrate import solve_ivp
    p = SleParams(2.0)
    T = 0.5

    def rhs(t, v):
        g = v[0] + 1j * v[1]
        dg = p.a / (g - math.sin(t))
        return [dg.real, dg.imag]

    ref = solve_ivp(rhs, (0, T), [z0.real, z0.imag], method="DOP853", rtol=1e-13, atol=1e-13).y[:, -1]
    ref = complex(*ref) - math.sin(T)
    errs = [abs(flow_point(driving_from_function(math.sin, T, 2.0 ** -m), z0, p).Z[-1] - ref)
            for m in (6, 7, 8, 9)]
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all(np.abs(ratios - 2) < 0.05)


def test_scaling_of_flow():
    r = 2.0
    drv = sample_driving(K83, 0.5, 2 ** -8, 4)
    z = 0.3 + 0.5j
    a = flow_point(drv, z, K83).Z[-1]
    b = flow_point(drv.scaled(r), r * z, K83).Z[-1]
    assert abs(b - r * a) < 1e-10


def test_koebe_sandwich():
    drv = sample_driving(K83, 1.0, 2 ** -10, 21)
    tr = extract_trace(drv, K83)
    zs = np.array([0.5 + 0.5j, -0.4 + 0.8j, 0.1 + 1.5j, 1.0 + 0.3j])
    Z, dg = flow_points(drv, zs, K83, times=[1.0])
    ups = Z[0].imag / np.abs(dg[0])
    dist = dist_to_boundary(zs, tr.points)
    ok = np.isfinite(ups)
    assert np.all(ups[ok] >= 0.5 * dist[ok] / 1.2) and np.all(ups[ok] <= 2 * dist[ok] * 1.2)


def test_csv_outputs_are_plain_numbers(tmp_path):
    drv = sample_driving(K83, 0.1, 0.01, 0)
    extract_trace(drv, K83).to_csv(tmp_path / "t.csv")
    flow_point(drv, 0.3 + 0.8j, K83).to_csv(tmp_path / "f.csv")
    t = np.loadtxt(tmp_path / "t.csv", delimiter=",", skiprows=1)
    f = np.loadtxt(tmp_path / "f.csv", delimiter=",", skiprows=1)
    assert t.shape == (11, 3) and f.shape == (11, 6)

import math

import numpy as np
import pytest

from slenat.core import SleParams
from slenat.diffusions import (
    constants,
    cot_sde_endpoints,
    girsanov_weight_paths,
    psi_estimate,
    psi_series,
    psi_table_csv,
    simulate_bessel,
    simulate_cot_sde,
    v_bound,
)

K83, K2 = SleParams(8 / 3), SleParams(2.0)


def test_constants_closed_forms():
    c = constants(K83)
    assert abs(c.cstar - 1.5) < 1e-12 and abs(c.C2r - 0.75) < 1e-12
    assert abs(constants(K2).C2r - 8 / (3 * math.pi)) < 1e-12
    assert c.quad_error < 1e-10


def test_v_bound_examples():
    a = K83.a
    assert v_bound(0.0, 0.5, K83) == 0.5 ** (1 - 4 * a)
    assert v_bound(4.0, 0.5, K83) == 1.0
    assert math.isclose(v_bound(0.25, 0.1, K83), 0.5 ** (1 - 4 * a))
    for t, x in ((-1, 0.5), (1, 0), (1, -0.2)):
        with pytest.raises(ValueError):
            v_bound(t, x, K83)


def test_psi_at_time_zero_is_exact():
    for x in (0.3, math.pi / 2, 2.5):
        est = psi_estimate(0.0, x, 10, 0, K83)
        assert est.mean == math.sin(x) ** (1 - 2 * K83.r) and est.stderr == 0


def test_psi_series_limits_and_symmetry():
    xs = np.linspace(0.2, math.pi - 0.2, 7)
    assert np.allclose(psi_series(0.0, xs, K83), np.sin(xs) ** (1 - 2 * K83.r))
    # stationary limit: C_2r * int sin = 2 C_2r
    assert np.allclose(psi_series(20.0, xs, K83), 2 * constants(K83).C2r, rtol=1e-10)
    assert np.allclose(psi_series(0.3, xs, K83), psi_series(0.3, math.pi - xs, K83), rtol=1e-12)
    # short-time series agrees with the initial function away from the walls
    assert np.allclose(psi_series(1e-4, [math.pi / 2], K83), 1.0, atol=1e-3)


@pytest.mark.parametrize("t,x", [(0.1, math.pi / 2), (0.3, 0.6), (1.0, 2.0)])
def test_psi_monte_carlo_matches_series(t, x):
    est = psi_estimate(t, x, 20_000, 5, K83, dt=1e-3)
    ref = float(psi_series(t, x, K83))
    assert abs(est.zscore(ref)) < 4


def test_cot_sde_stays_inside_and_reaches_invariant_law():
    paths = simulate_cot_sde(0.1, 1.0, 1e-3, 2, K83, n=200)
    assert paths.shape == (200, 1001)
    assert np.all((paths > 0) & (paths < math.pi))
    ends = cot_sde_endpoints(0.1, [3.0], 1e-3, 3, K83, 20_000)[0]
    # E cos^2 under C sin^3: int sin^3 cos^2 / int sin^3 = 1/5
    c2 = np.cos(ends) ** 2
    assert abs(c2.mean() - 0.2) < 4 * c2.std() / math.sqrt(c2.size)


def test_cot_sde_rejects():
    with pytest.raises(ValueError):
        simulate_cot_sde(0.0, 1.0, 1e-3, 0, K83)
    with pytest.raises(ValueError):
        simulate_cot_sde(math.pi, 1.0, 1e-3, 0, K83)


def test_cot_sde_deterministic():
    a = simulate_cot_sde(1.0, 0.2, 1e-3, 9, K83, n=3)
    b = simulate_cot_sde(1.0, 0.2, 1e-3, 9, K83, n=3)
    assert np.array_equal(a, b)


def test_bessel_hits_zero_only_below_dimension_two():
    low = simulate_bessel(0.2, 0.5, 5.0, 1e-3, 0, n=400)
    high = simulate_bessel(1.5, 0.5, 5.0, 1e-3, 0, n=400)
    assert low.hit.mean() > 0.5
    assert not high.hit.any()
    assert np.all(high.sup >= 0.5) and np.all(high.inv_integral > 0)
    with pytest.raises(ValueError):
        simulate_bessel(1.0, 0.0, 1.0, 1e-3, 0)


@pytest.mark.parametrize("mode,x0", [("sine", 1.0), ("bessel", 0.8)])
def test_girsanov_weights_are_martingales(mode, x0):
    xs, logw = girsanov_weight_paths(mode, x0, 0.5, 1e-4, 4, K83, n=4000)
    w = np.exp(logw)
    start = math.sin(x0) ** K83.r if mode == "sine" else x0 ** K83.r
    assert np.allclose(w[:, 0], start)
    end = w[:, -1]
    assert abs(end.mean() - start) < 4 * end.std() / math.sqrt(end.size) + 0.01 * start
    with pytest.raises(ValueError):
        girsanov_weight_paths("cosine", x0, 0.5, 1e-3, 0, K83)


def test_psi_table_csv(tmp_path):
    rows = [(0.0, 1.0, psi_estimate(0.0, 1.0, 5, 0, K83))]
    psi_table_csv(rows, tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "t,x,psi,stderr,n" and lines[1].startswith("0.0,1.0,")

import json

import numpy as np
import pytest

from slenat.core import NotComputedError
from slenat.harness import (
    REGISTRY,
    ConfigError,
    ExperimentConfig,
    PhiSpec,
    default_config,
    derive_seed,
    emit_plotdata,
    load_phi,
    manage_cache,
    run_experiment,
)

NP_TINY = {"drivers": 2, "step_log2": 10, "quadrature": [8, 4], "tip_rule": [8, 8], "phi_paths": 200}


def test_registry_covers_every_criterion():
    names = {"flow-oracle", "martingale-one", "supermartingale-deficiency", "one-point", "psi-limit",
             "two-point-exponent", "correlation-lower", "lshape", "natparam-drift", "natparam-cauchy",
             "minkowski", "dimension-scaling"}
    assert names == set(REGISTRY)
    for name in names:
        default_config(name)


def test_unknown_experiment_lists_registry():
    with pytest.raises(ConfigError) as e:
        ExperimentConfig.from_dict({"experiment": "nope"})
    assert "flow-oracle" in e.value.problems[0]


@pytest.mark.parametrize("d,field", [
    ({"experiment": "martingale-one", "geometry": {"z": [0, -1]}}, "geometry.z"),
    ({"experiment": "martingale-one", "geometry": {"eps": 5.0}}, "geometry.eps"),
    ({"experiment": "martingale-one", "budgets": {"paths": 0}}, "budgets.paths"),
    ({"experiment": "martingale-one", "budgets": {"bogus": 1}}, "budgets.bogus"),
    ({"experiment": "martingale-one", "kappas": [9]}, "kappas"),
    ({"experiment": "martingale-one", "seed": -3}, "seed"),
    ({"experiment": "martingale-one", "colour": "red"}, "colour"),
    ({"experiment": "natparam-drift", "kappas": [6]}, "kappas"),
    ({"experiment": "natparam-drift", "geometry": {"D": [0, 1, 0, 1]}}, "geometry.D"),
    ({"experiment": "natparam-drift", "budgets": {"c_step": 2}}, "budgets.c_step"),
    ({"experiment": "natparam-drift", "budgets": {"step_log2": 4}}, "options.n"),
    ({"experiment": "minkowski", "options": {"form": "box"}}, "options.form"),
    ({"experiment": "psi-limit", "geometry": {"xs": [4.0]}}, "geometry.xs"),
    ({"experiment": "lshape", "geometry": {"rho": 0.9}}, "geometry.rho"),
    ({"experiment": "dimension-scaling", "geometry": {"r": [1]}}, "geometry.r"),
])
def test_config_field_diagnostics(d, field):
    with pytest.raises(ConfigError) as e:
        ExperimentConfig.from_dict(d)
    assert any(p.startswith(field) for p in e.value.problems), e.value.problems


def test_config_round_trip_and_hash(tmp_path):
    cfg = default_config("martingale-one", seed=4, out=str(tmp_path / "a"))
    cfg.save(tmp_path / "c.json")
    back = ExperimentConfig.load(tmp_path / "c.json")
    assert back.hash() == cfg.hash()
    back.out = str(tmp_path / "b")
    assert back.hash() == cfg.hash()
    back.seed = 5
    assert back.hash() != cfg.hash()


def test_derive_seed_labels_are_independent():
    assert derive_seed(1, "driver", 0) == derive_seed(1, "driver", 0)
    assert len({derive_seed(1, "driver", i) for i in range(50)}) == 50
    assert derive_seed(1, "driver", 0) != derive_seed(2, "driver", 0)


def test_flow_oracle_passes_and_writes(tmp_path):
    rec = run_experiment(default_config("flow-oracle", out=str(tmp_path)))
    assert rec.passed and rec.wall_clock < 1.0
    doc = json.loads((tmp_path / "flow-oracle.json").read_text())
    assert doc["passed"] and doc["config_hash"] == rec.config_hash
    assert (tmp_path / "flow-oracle-oracle.csv").exists()


def test_identical_config_identical_numbers(tmp_path):
    d = {"experiment": "martingale-one", "budgets": {"paths": 300}, "out": str(tmp_path)}
    r1 = run_experiment(ExperimentConfig.from_dict(d), write=False)
    r2 = run_experiment(ExperimentConfig.from_dict(d), write=False)
    assert r1.numbers() == r2.numbers()
    r3 = run_experiment(ExperimentConfig.from_dict({**d, "seed": 1}), write=False)
    assert r3.numbers() != r1.numbers()


def test_emit_plotdata_psi_table(tmp_path):
    cfg = ExperimentConfig.from_dict({"experiment": "psi-limit", "kappas": [8 / 3], "budgets": {"paths": 200},
                                      "geometry": {"xs": [1.0], "t": 1.0}, "options": {"dt": 1e-2}})
    rec = run_experiment(cfg, write=False)
    paths = emit_plotdata(rec, tmp_path)
    assert [p.name for p in paths] == ["psi-limit-psi.csv"]
    lines = paths[0].read_text().splitlines()
    assert lines[0] == "t,x,psi,stderr" and len(lines) == 15


def test_cache_life_cycle(tmp_path):
    spec = PhiSpec(n_paths=200)
    assert manage_cache("verify", spec, tmp_path)["status"] == "missing"
    with pytest.raises(NotComputedError, match="no cached phi grid"):
        load_phi(spec, tmp_path)
    assert manage_cache("build", spec, tmp_path)["status"] == "built"
    assert manage_cache("verify", spec, tmp_path)["status"] == "ok"
    grid = load_phi(spec, tmp_path)
    # corrupt one value
    path = tmp_path / spec.filename()
    doc = json.loads(path.read_text())
    doc["body"]["values"][100] = 0.5 + doc["body"]["values"][100] / 2
    path.write_text(json.dumps(doc))
    assert manage_cache("verify", spec, tmp_path)["status"] == "stale"
    with pytest.raises(NotComputedError, match="stale"):
        load_phi(spec, tmp_path)
    assert manage_cache("purge", spec, tmp_path)["status"] == "purged"
    with pytest.raises(NotComputedError, match="no cached phi grid"):
        load_phi(spec, tmp_path)
    with pytest.raises(ValueError):
        manage_cache("rebuild", spec, tmp_path)
    assert np.all(grid.values >= 0)


@pytest.fixture(scope="module")
def tiny_cache(tmp_path_factory):
    d = tmp_path_factory.mktemp("phi")
    manage_cache("build", PhiSpec(n_paths=200), d)
    return str(d)


def _np_cfg(name, cache, **over):
    opts = {"cache_dir": cache} if name == "natparam-cauchy" else {"cache_dir": cache, "n": 3}
    d = {"experiment": name, "budgets": dict(NP_TINY), "options": opts}
    for k, v in over.items():
        d.setdefault(k, {}).update(v) if isinstance(v, dict) else d.__setitem__(k, v)
    return ExperimentConfig.from_dict(d)


def test_natparam_experiments_run_small(tiny_cache):
    rec = run_experiment(_np_cfg("natparam-drift", tiny_cache), write=False)
    assert set(rec.verdicts) == {"monotone", "constant_mean", "theta_positive"}
    assert rec.verdicts["monotone"] and rec.estimates["drivers"] == 2
    cfg = _np_cfg("natparam-cauchy", tiny_cache, options={"n_list": [2, 3, 4]})
    rec = run_experiment(cfg, write=False)
    assert len(rec.estimates["diff_mean"]) == 2
    rec = run_experiment(_np_cfg("minkowski", tiny_cache), write=False)
    assert set(rec.verdicts) == {"abs_diff_decreasing"}
    rec = run_experiment(_np_cfg("dimension-scaling", tiny_cache, geometry={"r": [1, 2]}), write=False)
    assert "slope" in rec.estimates


def test_natparam_partial_on_time_budget(tiny_cache):
    cfg = _np_cfg("natparam-drift", tiny_cache, options={"max_seconds": 0.0}, budgets={"drivers": 3})
    rec = run_experiment(cfg, write=False)
    assert rec.partial and not rec.passed and rec.estimates["drivers"] == 1


def test_natparam_without_cache_reports_missing_grid(tmp_path):
    with pytest.raises(NotComputedError):
        run_experiment(_np_cfg("natparam-drift", str(tmp_path)), write=False)

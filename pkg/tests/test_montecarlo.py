import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spillbound.errors import MonteCarloAborted, ValidationError
from spillbound.jsonio import dumps
from spillbound.montecarlo import (
    AD_HOC_D_STAR,
    AD_HOC_TAU_STAR,
    EXTRA_TESTS,
    METHODS,
    McConfig,
    apply_overrides,
    preset_config,
    run_comparison,
    run_mc,
    run_spec_test_study,
    run_sweep,
    summarise,
)
from spillbound.simulate import baseline_config

SMALL = baseline_config(n_units=80, n_periods=12, adopt_window=(3, 8))


@pytest.fixture(scope="module")
def small_mc():
    return run_mc(McConfig(base=SMALL, M=6, master_seed=1, threads=0, methods=METHODS, tests=EXTRA_TESTS))


def test_single_noiseless_replication_rmse_equals_abs_bias():
    res = run_mc(McConfig(base=SMALL.noiseless(), M=1, master_seed=1, threads=0))
    for name, m in res.summary.params.items():
        if m.n:
            assert m.rmse == pytest.approx(abs(m.bias), rel=1e-12, abs=1e-15), name


def test_rmse_dominates_bias(small_mc):
    for m in small_mc.summary.params.values():
        if m.n:
            assert m.rmse >= abs(m.bias)
            assert m.coverage is None or 0.0 <= m.coverage <= 1.0


def test_summary_matches_records(small_mc):
    s = small_mc.summary
    ok = [r for r in small_mc.records if r["status"] == "ok"]
    assert s.M == 6 and s.n_ok == len(ok)
    err = np.array([r["delta"] - r["delta_true"] for r in ok])
    assert s.params["delta"].bias == pytest.approx(err.mean(), rel=1e-12)
    assert s.params["delta"].rmse == pytest.approx(math.sqrt((err ** 2).mean()), rel=1e-12)
    # coverage from the recorded standard errors
    z = 1.959963984540054
    cov = np.mean([abs(r["delta"] - r["delta_true"]) <= z * r["delta_se"] for r in ok])
    assert s.params["delta"].coverage == pytest.approx(cov)
    power = np.mean([r["reject_temporal"] for r in small_mc.records])
    assert s.power["temporal_boundary_exists"] == pytest.approx(power)
    assert all(0.0 <= v <= 1.0 for v in s.power.values())


def test_method_comparison_entries(small_mc):
    m = small_mc.summary.methods
    assert set(m) == set(METHODS)
    assert m["StandardDiD"]["rmse_d_star"] == "NA" and m["StandardDiD"]["rmse_tau_star"] == "NA"
    ok = [r for r in small_mc.records if r["status"] == "ok"]
    d_true = np.array([r["d_star_true"] for r in ok])
    t_true = np.array([r["tau_star_true"] for r in ok])
    # the ad hoc rule is a constant, so its RMSE is a function of the truths only
    assert m["AdHocCutoff"]["rmse_d_star"] == pytest.approx(math.sqrt(np.mean((AD_HOC_D_STAR - d_true) ** 2)))
    assert m["AdHocCutoff"]["rmse_tau_star"] == pytest.approx(math.sqrt(np.mean((AD_HOC_TAU_STAR - t_true) ** 2)))
    assert m["Unified"]["rmse_d_star"] == pytest.approx(
        math.sqrt(np.mean([(r["d_star"] - r["d_star_true"]) ** 2 for r in ok])))


def test_extra_tests_summarised(small_mc):
    t = small_mc.summary.tests
    assert set(t) == set(EXTRA_TESTS)
    assert 0.0 <= t["quadratic"]["rejection_rate"] <= 1.0
    assert 0.0 <= t["unified_dynamics"]["unified_preferred_rate"] <= 1.0


def test_summary_serialises_without_wall_time(small_mc):
    d = small_mc.summary.to_dict()
    assert "wall_seconds" not in d
    json.loads(dumps(d))


def test_worker_count_does_not_change_output():
    cfg = McConfig(base=SMALL, M=4, master_seed=3, threads=0, methods=("Unified", "Separate"))
    serial = run_mc(cfg)
    pooled = run_mc(McConfig(base=SMALL, M=4, master_seed=3, threads=2, methods=("Unified", "Separate")))
    assert dumps(serial.summary.to_dict()) == dumps(pooled.summary.to_dict())
    assert dumps(serial.records) == dumps(pooled.records)


def test_master_seed_changes_output():
    a = run_mc(McConfig(base=SMALL, M=2, master_seed=1, threads=0))
    b = run_mc(McConfig(base=SMALL, M=2, master_seed=2, threads=0))
    assert a.records[0]["delta"] != b.records[0]["delta"]


def _rec(r, status="ok", **kw):
    base = {"replication": r, "status": status, "message": "boom" if status == "failed" else ""}
    base.update(kw)
    return base


def test_abort_when_too_many_failures():
    cfg = McConfig(base=SMALL, M=4, max_failure_share=0.5)
    recs = [_rec(0, "failed"), _rec(1, "failed"), _rec(2, "failed"), _rec(3, reject_spatial=1, reject_temporal=1)]
    with pytest.raises(MonteCarloAborted) as info:
        summarise(recs, cfg)
    assert info.value.failures == {"boom": 3}
    # exactly at the threshold is tolerated
    recs[0] = _rec(0, reject_spatial=0, reject_temporal=1)
    s = summarise(recs, cfg)
    assert s.n_failed == 2 and s.failures == {"boom": 2}
    assert s.power["spatial_boundary_exists"] == pytest.approx(0.5)


def test_summarise_orders_by_replication():
    cfg = McConfig(base=SMALL, M=3)
    recs = [_rec(r, delta=0.1 + r, delta_true=0.1, reject_spatial=0, reject_temporal=0) for r in range(3)]
    a = summarise(recs, cfg)
    b = summarise(recs[::-1], cfg)
    assert a.to_dict() == b.to_dict()
    assert a.params["delta"].bias == pytest.approx(1.0)


@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=30))
@settings(max_examples=60, deadline=None)
def test_rmse_bias_inequality_property(errors):
    cfg = McConfig(base=SMALL, M=len(errors))
    recs = [_rec(r, tau_star=5.0 + e, tau_star_true=5.0, reject_spatial=0, reject_temporal=0)
            for r, e in enumerate(errors)]
    m = summarise(recs, cfg).params["tau_star"]
    assert m.rmse >= abs(m.bias)
    assert m.n == len(errors)


def test_sweep_cells_and_labels():
    cfg = McConfig(base=SMALL, M=2, master_seed=1, threads=0,
                   sweeps={"sigma_eps": [{"sigma_eps": 0.25}, {"sigma_eps": 1.0}]})
    out = run_sweep(cfg)
    cells = out["sigma_eps"]
    assert [c.summary.label for c in cells] == ["sigma_eps:sigma_eps=0.25", "sigma_eps:sigma_eps=1.0"]
    assert [c.summary.design["sigma_eps"] for c in cells] == [0.25, 1.0]


@pytest.mark.parametrize("sweeps", [
    {"bad": [{"no_such_field": 1}]},
    {"bad": [{"n_units": 1}]},
    {"bad": [{"delta": 2.0}]},
])
def test_bad_sweep_rejected(sweeps):
    with pytest.raises(ValidationError):
        McConfig(base=SMALL, sweeps=sweeps)


@pytest.mark.parametrize("kw", [dict(M=0), dict(threads=-1), dict(alpha=1.0), dict(max_failure_share=0.0),
                                dict(methods=("Oracle",)), dict(tests=("normality",))])
def test_invalid_mc_config(kw):
    with pytest.raises(ValidationError):
        McConfig(base=SMALL, **kw)


def test_overrides():
    c = apply_overrides(SMALL, {"delta": 0.2, "n_units": 50, "adopt_window": [2, 5]})
    assert c.params.delta == 0.2 and c.n_units == 50 and c.adopt_window == (2, 5)
    assert SMALL.params.delta == 0.15


def test_comparison_needs_two_methods():
    with pytest.raises(ValidationError):
        run_comparison(McConfig(base=SMALL, M=1, methods=("Unified",)))


def test_spec_test_study_rows():
    out = run_spec_test_study(McConfig(base=SMALL, M=2, master_seed=1, threads=0))
    assert [r["dgp"] for r in out["rows"]] == ["exponential", "power_law"]
    assert all(0.0 <= r["rejection_rate"] <= 1.0 for r in out["rows"])


def test_presets():
    assert preset_config("6", M=3).methods == METHODS
    assert len(preset_config("2").sweeps["sigma_eps"]) == 4
    assert preset_config("1").M == 200
    with pytest.raises(ValidationError):
        preset_config("5")

import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

# imported as a module so pytest does not collect its test_* functions
import spillbound.inference as inf
from spillbound.covariance import clustered_se
from spillbound.errors import SingularDesignError, ValidationError
from spillbound.estimate import StageConfig, run_pipeline, stage2_spatial
from spillbound.greens import BoundaryCondition, GreensSpec
from spillbound.panel import PanelDataset, TreatmentSchedule
from spillbound.simulate import baseline_config, simulate

from panels import cluster_panel

mpmath.mp.dps = 40


# ------------------------------------------------------------------ distributions

@pytest.mark.parametrize("x", [-30.0, -8.0, -3.0, -1.0, -0.1, 0.0, 0.3, 1.96, 4.0, 9.0, 20.0])
def test_normal_cdf_and_tail(x):
    ref_cdf = float(mpmath.ncdf(x))
    ref_sf = float(mpmath.ncdf(-x))
    assert inf.norm_cdf(x) == pytest.approx(ref_cdf, rel=1e-10, abs=1e-300)
    assert inf.norm_sf(x) == pytest.approx(ref_sf, rel=1e-10, abs=1e-300)


@pytest.mark.parametrize("p", [1e-12, 1e-6, 0.001, 0.0249, 0.025, 0.3, 0.5, 0.7, 0.975, 0.9751, 0.999999])
def test_normal_quantile(p):
    ref = float(mpmath.sqrt(2) * mpmath.erfinv(2 * mpmath.mpf(p) - 1))
    assert inf.norm_ppf(p) == pytest.approx(ref, rel=1e-10, abs=1e-14)
    assert inf.norm_ppf(p) == pytest.approx(stats.norm.ppf(p), rel=1e-9, abs=1e-12)


@pytest.mark.parametrize("w", [1e-8, 0.01, 0.5, 1.0, 3.841458820694124, 10.0, 60.0])
def test_chi2_tail_and_quantile(w):
    ref = float(mpmath.erfc(mpmath.sqrt(mpmath.mpf(w) / 2)))
    assert inf.chi2_1_sf(w) == pytest.approx(ref, rel=1e-10)
    assert inf.chi2_1_sf(w) == pytest.approx(stats.chi2.sf(w, 1), rel=1e-9)
    p = 1 - ref
    if 1e-10 < p < 1 - 1e-10:
        assert inf.chi2_1_ppf(p) == pytest.approx(w, rel=1e-9)


def test_distribution_edges():
    assert inf.chi2_1_sf(0.0) == 1.0
    assert math.isnan(inf.chi2_1_sf(math.nan))
    assert inf.norm_ppf(0.0) == -math.inf and inf.norm_ppf(1.0) == math.inf
    with pytest.raises(ValidationError):
        inf.norm_ppf(1.5)


@given(st.floats(1e-14, 1 - 1e-14))
def test_normal_quantile_round_trip(p):
    x = inf.norm_ppf(p)
    back = inf.norm_cdf(x) if p < 0.5 else 1 - inf.norm_sf(x)
    assert back == pytest.approx(p, rel=1e-9, abs=1e-15)


# ------------------------------------------------------------------ clustered variance

def test_singleton_clusters_equal_robust_variance():
    rng = np.random.default_rng(1)
    X = np.column_stack([np.ones(30), rng.normal(size=30)])
    u = rng.normal(size=30) * (1 + np.abs(X[:, 1]))
    v = clustered_se(X, u, np.arange(30))
    bread = np.linalg.inv(X.T @ X)
    hc0 = bread @ (X.T * u**2) @ X @ bread
    np.testing.assert_allclose(v.cov, hc0 * 30 / 29, rtol=1e-12)
    assert v.n_clusters == 30 and v.factor == pytest.approx(30 / 29)


def test_three_cluster_hand_computation():
    X = np.array([[1.0, 0.0], [1.0, 1.0], [1.0, 2.0], [1.0, 3.0], [1.0, 5.0]])
    u = np.array([0.5, -0.25, 1.0, -1.0, 0.25])
    g = np.array([0, 0, 1, 1, 2])
    # scores per cluster: sum_i x_i u_i
    s = np.array([[0.25, -0.25], [0.0, -1.0], [0.25, 1.25]])
    xtx = np.array([[5.0, 11.0], [11.0, 39.0]])
    inv = np.array([[39.0, -11.0], [-11.0, 5.0]]) / (5 * 39 - 121)
    expect = 1.5 * inv @ (s.T @ s) @ inv
    np.testing.assert_allclose(clustered_se(X, u, g).cov, expect, rtol=1e-13)
    np.testing.assert_allclose(X.T @ X, xtx)


def test_duplicated_rows_leave_variance_unchanged():
    rng = np.random.default_rng(2)
    X = np.column_stack([np.ones(12), rng.normal(size=12)])
    u = rng.normal(size=12)
    g = np.repeat(np.arange(4), 3)
    base = clustered_se(X, u, g).cov
    dup = clustered_se(np.vstack([X, X]), np.concatenate([u, u]), np.concatenate([g, g])).cov
    # bread halves twice, meat quadruples
    np.testing.assert_allclose(dup, base, rtol=1e-12)


def test_clustered_errors():
    X = np.column_stack([np.ones(6), np.ones(6)])
    with pytest.raises(SingularDesignError):
        clustered_se(X, np.ones(6), np.arange(6))
    with pytest.raises(ValidationError):
        clustered_se(np.ones((4, 1)), np.ones(4), np.zeros(4))


# ------------------------------------------------------------------ tests 1 and 3

def test_boundary_exists_examples():
    r0 = inf.test_boundary_exists(0.0, 0.01)
    assert r0.p_value == 0.5 and not r0.reject
    r3 = inf.test_boundary_exists(0.03, 0.01)
    assert r3.statistic == pytest.approx(3.0)
    assert r3.p_value == pytest.approx(0.0013499, abs=5e-8)
    assert r3.reject
    rt = inf.test_boundary_exists(0.15, 0.02, dimension="temporal")
    assert rt.test_id is inf.TestId.TEMPORAL_BOUNDARY_EXISTS


def test_boundary_location_examples():
    same = inf.test_boundary_location(150.0, 12.0, 150.0)
    assert same.statistic == 0.0 and same.p_value == 1.0
    w384 = inf.test_boundary_location(150.0 + math.sqrt(3.84) * 10.0, 10.0, 150.0)
    assert w384.statistic == pytest.approx(3.84)
    assert w384.p_value == pytest.approx(0.05, abs=1e-4)


@given(st.floats(-1.0, 1.0), st.floats(1e-6, 1.0), st.floats(0.001, 0.5))
def test_report_decision_matches_p_value(rate, se, alpha):
    r = inf.test_boundary_exists(rate, se, alpha)
    assert 0.0 <= r.p_value <= 1.0
    assert r.reject == (r.p_value < alpha)


def test_report_invariants_enforced():
    with pytest.raises(ValidationError):
        inf.TestReport(inf.TestId.QUADRATIC_SPEC, 1.0, inf.NullDistribution.CHI2_1, 1.2)
    with pytest.raises(ValidationError):
        inf.TestReport(inf.TestId.QUADRATIC_SPEC, 9.0, inf.NullDistribution.CHI2_1, 0.001, 0.05, reject=False)
    ok = inf.TestReport(inf.TestId.QUADRATIC_SPEC, 9.0, inf.NullDistribution.CHI2_1, 0.001, 0.05, reject=True)
    assert ok.to_dict()["test_id"] == "QuadraticSpec"


# ------------------------------------------------------------------ delta method

def test_delta_method_zero_variance():
    se = inf.delta_method_boundaries((0.0116, 0.254), (0.0, 0.0))
    assert se.d_star_se == 0.0 and se.tau_star_se == 0.0


def test_delta_method_wildfire():
    se = inf.delta_method_boundaries((0.0116, 0.254), (0.00093**2, 0.012**2))
    assert se.d_star_se == pytest.approx(math.log(10) * 0.00093 / 0.0116**2, rel=1e-12)
    assert round(se.d_star_se, 1) == 15.9
    assert se.tau_star_se == pytest.approx(math.log(2) * 0.012 / 0.254**2, rel=1e-12)


@given(st.floats(1e-4, 1.0), st.floats(1e-3, 0.99))
def test_gradients_match_finite_differences(kappa_s, delta):
    g = inf.boundary_gradients(kappa_s, delta)
    fd = inf.finite_difference_gradients(kappa_s, delta)
    for name in g:
        scale = np.max(np.abs(g[name]))
        assert np.max(np.abs(g[name] - fd[name])) <= 1e-6 * scale


def test_delta_method_from_result(baseline_sim):
    res = run_pipeline(baseline_sim.dataset)
    se = inf.delta_method_boundaries(res)
    assert se.max_fd_rel_error < 1e-6
    assert se.d_star_se == pytest.approx(math.log(10) * res.kappa_s_se / res.kappa_s**2, rel=1e-12)
    with pytest.raises(ValidationError):
        inf.delta_method_boundaries((0.0, 0.1), (1.0, 1.0))


# ------------------------------------------------------------------ test 4 and test 2

def test_ratio_consistency_algebraic_is_zero(baseline_sim):
    res = run_pipeline(baseline_sim.dataset)
    r = inf.test_ratio_consistency(res)
    assert r.statistic == 0.0 and r.p_value == 1.0 and not r.reject
    assert r.details["mode"] == "algebraic"


def test_ratio_consistency_empirical_needs_inputs(baseline_sim):
    res = run_pipeline(baseline_sim.dataset)
    with pytest.raises(ValidationError):
        inf.test_ratio_consistency(res, mode="empirical")
    with pytest.raises(ValidationError):
        inf.test_ratio_consistency(res, mode="empirical", dataset=baseline_sim.dataset)


def test_unified_dynamics_report(small_sim):
    res = run_pipeline(small_sim.dataset)
    r = inf.test_unified_dynamics(small_sim.dataset, res)
    assert r.null_distribution is inf.NullDistribution.MODEL_SCORE
    for key in ("bic_unified", "bic_separate", "preferred", "tie", "r_shared", "r_spatial", "r_temporal"):
        assert key in r.details
    assert r.details["preferred"] in ("unified", "separate")
    # the separate model nests the unified one
    assert r.details["bic_separate"] - r.details["bic_unified"] <= math.log(
        r.details["n_spatial"] + r.details["n_temporal"]) + 1e-9
    assert r.statistic == pytest.approx(r.details["bic_separate"] - r.details["bic_unified"])


# ------------------------------------------------------------------ bootstrap

def test_bootstrap_identity_resample(small_sim):
    ds = small_sim.dataset
    res = run_pipeline(ds)
    boot = inf.panel_bootstrap(ds, 1, seed=0, resamples=[np.arange(ds.n_units)])
    assert boot.n_failed == 0
    assert boot.draws["delta"][0] == res.delta
    assert boot.draws["d_star"][0] == res.d_star
    lo, hi = boot.intervals["delta"]
    assert lo == hi == res.delta


def test_bootstrap_deterministic_across_threads(small_sim):
    a = inf.panel_bootstrap(small_sim.dataset, 6, seed=42, threads=1)
    b = inf.panel_bootstrap(small_sim.dataset, 6, seed=42, threads=3)
    c = inf.panel_bootstrap(small_sim.dataset, 6, seed=43, threads=1)
    assert a.to_dict() == b.to_dict()
    for k in a.draws:
        assert np.array_equal(a.draws[k], b.draws[k])
    assert a.to_dict() != c.to_dict()
    for lo, hi in a.intervals.values():
        assert lo <= hi or (math.isnan(lo) and math.isnan(hi))


def test_bootstrap_records_failures(small_sim):
    ds = small_sim.dataset
    untreated = [i for i in range(ds.n_units) if ds.units[i].unit_id not in ds.schedule.treated_set]
    boot = inf.panel_bootstrap(ds, 2, seed=0, resamples=[untreated, np.arange(ds.n_units)])
    assert boot.n_failed == 1
    with pytest.raises(ValidationError):
        inf.panel_bootstrap(ds, 0, seed=0)


# ------------------------------------------------------------------ specification tests

def test_quadratic_exact_exponential_not_rejected():
    ds = cluster_panel()
    for method in ("decay_curve", "loglinear"):
        y = ds.outcome if method == "decay_curve" else np.where(np.isfinite(ds.exposure.dist), ds.outcome, np.nan)
        fit = stage2_spatial(y, ds.exposure, StageConfig(spatial_method=method), d_min=0.0)
        r = inf.spec_test_quadratic(fit)
        assert not r.reject
        assert abs(r.details["coef"]) < 1e-6


def test_quadratic_detects_gaussian_profile():
    # exp(-(d/100)^2) has no constant log-slope
    ds = cluster_panel(k=1e-9, near=lambda d: 3.0 * np.exp(-(d / 100.0) ** 2))
    ex = ds.exposure
    rng = np.random.default_rng(0)
    y = ds.outcome + 0.01 * rng.normal(size=ds.outcome.shape)
    fit = stage2_spatial(y - 2.0, ex, StageConfig(), d_min=0.0)
    assert inf.spec_test_quadratic(fit).reject


def test_superposition_skipped_with_single_source(small_sim):
    ds = small_sim.dataset
    first = min(ds.schedule.treated_set)
    single = PanelDataset(ds.units, TreatmentSchedule({first: 2}), ds.outcome)
    res = run_pipeline(small_sim.dataset)
    r = inf.spec_test_superposition(single, res)
    assert r.skipped and not r.reject and r.p_value == 1.0
    assert "two or more" in r.details["reason"]


def test_superposition_size_and_power():
    out = simulate(baseline_config(seed=2, dgp="greens", field_decay=0.02))
    ds = out.dataset
    linear = inf.spec_test_superposition(ds, run_pipeline(ds))
    assert not linear.reject
    ex = ds.exposure
    E = np.exp(-0.02 * ds.distances)
    np.fill_diagonal(E, 0.0)
    D = ex.treated.astype(float)
    S1 = E @ D
    S2 = 0.5 * (S1 * S1 - (E * E) @ D)
    inter = ds.with_outcome(ds.outcome + np.where(ex.treated, 0.0, 4.0 * S2))
    assert inf.spec_test_superposition(inter, run_pipeline(inter)).reject


def test_boundary_condition_selection_bounded_domain():
    spec = GreensSpec(BoundaryCondition.DIRICHLET_RECT, 300.0, 300.0)
    cfg = baseline_config(n_units=100, seed=4, domain_side=300.0, dgp="greens", field_decay=0.013, spec=spec)
    ds = simulate(cfg.noiseless()).dataset
    r = inf.select_boundary_condition(ds, run_pipeline(ds))
    assert r.details["selected"] == "dirichlet"
    specs = r.details["specifications"]
    assert set(specs) == {"unbounded", "dirichlet", "neumann"}
    assert all({"aic", "bic", "decay_rate", "d_star"} <= set(v) for v in specs.values())


def test_boundary_condition_selection_large_domain():
    cfg = baseline_config(n_units=100, seed=4, domain_side=2000.0, dgp="greens", field_decay=0.013)
    ds = simulate(cfg.noiseless()).dataset
    r = inf.select_boundary_condition(ds, run_pipeline(ds))
    assert r.details["selected"] == "unbounded"


def test_boundary_condition_tie_goes_to_unbounded(small_sim):
    res = run_pipeline(small_sim.dataset)
    r = inf.select_boundary_condition(small_sim.dataset, res, conditions=("unbounded",))
    assert r.details["selected"] == "unbounded" and r.p_value == 1.0


def test_run_inference_bundle(small_sim):
    res = run_pipeline(small_sim.dataset)
    out = inf.run_inference(small_sim.dataset, res, bootstrap_reps=3, seed=1, d0=100.0)
    ids = [t["test_id"] for t in out["tests"]]
    for tid in ("SpatialBoundaryExists", "TemporalBoundaryExists", "UnifiedDynamics", "BoundaryLocation",
                "RatioConsistency", "QuadraticSpec", "SuperpositionSpec"):
        assert tid in ids
    assert out["bootstrap"]["B"] == 3
    assert set(out["delta_method"]) == {"d_star_se", "tau_star_se", "ratio_se", "lambda_se"}

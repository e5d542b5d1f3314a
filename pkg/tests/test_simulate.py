import math
import warnings

import numpy as np
import pytest
from scipy.special import k0

from spillbound.errors import SimulationDivergedError, ValidationError
from spillbound.params import DiffusionParams
from spillbound.simulate import (
    SimConfig,
    StabilityWarning,
    baseline_config,
    rng_stream,
    simulate,
    simulate_powerlaw,
    spillover_weights,
)


def dense_oracle(xy, adopt, T, params, max_row_sum):
    """Knowledge grid from matrix powers: K_t = sum_s A^(t-s) kappa D_s."""
    n = xy.shape[0]
    d = np.sqrt(((xy[:, None, :] - xy[None, :, :]) ** 2).sum(-1))
    W = np.exp(-params.lam * d)
    np.fill_diagonal(W, 0.0)
    if max_row_sum is not None:
        W *= max_row_sum / W.sum(1).max()
    A = (1 - params.delta) * np.eye(n) + W
    powers = [np.eye(n)]
    for _ in range(T):
        powers.append(powers[-1] @ A)
    D = (np.arange(1, T + 1)[None, :] >= adopt[:, None]).astype(float)
    K = np.zeros((n, T))
    for t in range(T):
        for s in range(t + 1):
            K[:, t] += powers[t - s] @ (params.kappa * D[:, s])
    return K


def xy_of(out):
    return np.array([[u.x, u.y] for u in out.dataset.units])


def test_isolated_source_closed_form():
    # two units, kernel negligible: the treated unit accumulates a geometric series
    cfg = SimConfig(n_units=2, n_periods=200, treat_share=0.5, adopt_window=(1, 1),
                    params=DiffusionParams(lam=50.0), sigma_alpha=0, sigma_gamma=0, sigma_eps=0, seed=4)
    out = simulate(cfg)
    i = next(iter(out.dataset.schedule.treated_set))
    t = np.arange(1, 201)
    expect = 2.0 * (1 - 0.85**t) / 0.15
    np.testing.assert_allclose(out.knowledge[i], expect, rtol=1e-12)
    assert out.knowledge[i, -1] == pytest.approx(13.333333333333334, rel=1e-12)
    assert np.all(out.knowledge[1 - i] < 1e-300)


def test_noiseless_outcome_is_beta_times_knowledge():
    cfg = baseline_config(seed=2, params=DiffusionParams(beta=1.7)).noiseless()
    out = simulate(cfg)
    np.testing.assert_array_equal(out.dataset.outcome, 1.7 * out.knowledge)


def test_outcome_decomposition(small_sim):
    out = small_sim
    cfg = baseline_config(n_units=80, n_periods=12, adopt_window=(3, 8), seed=11)
    eps = rng_stream(cfg.seed, cfg.replication, "noise").normal(0, 1, (80, 12)) * cfg.sigma_eps
    rebuilt = out.knowledge + out.unit_effects[:, None] + out.time_effects[None, :] + eps
    np.testing.assert_array_equal(out.dataset.outcome, rebuilt)
    assert np.all(out.knowledge >= 0)


def test_baseline_matches_dense_oracle(baseline_sim):
    out = baseline_sim
    ds = out.dataset
    assert ds.n_units == 200 and ds.n_periods == 20
    ds.revalidate()
    assert len(ds.schedule.treated_set) == 50
    adopt = np.array([ds.schedule.adoption_time.get(u.unit_id, 21) for u in ds.units], dtype=float)
    assert set(adopt[adopt <= 20]) <= set(range(4, 15))
    K = dense_oracle(xy_of(out), adopt, 20, DiffusionParams(), 0.12)
    np.testing.assert_allclose(out.knowledge, K, rtol=1e-10, atol=1e-12)
    assert out.diagnostics["max_row_sum"] == pytest.approx(0.12)
    assert out.diagnostics["stable"]


def test_superposition_of_single_source_runs():
    cfg = baseline_config(n_units=15, n_periods=400, domain_side=300.0, treat_share=0.2,
                          adopt_window=(1, 5), seed=9).noiseless()
    out = simulate(cfg)
    xy = xy_of(out)
    adopt = np.array([out.dataset.schedule.adoption_time.get(i, 401) for i in range(15)], dtype=float)
    total = np.zeros((15, 400))
    # per-source accumulation with the scaled kernel used by the simulator
    d = np.sqrt(((xy[:, None] - xy[None]) ** 2).sum(-1))
    W, _ = spillover_weights(d, cfg)
    A = 0.85 * np.eye(15) + W
    for j in out.dataset.schedule.treated_set:
        k = np.zeros(15)
        for t in range(1, 401):
            k = A @ k
            if t >= adopt[j]:
                k[j] += 2.0
            total[:, t - 1] += k
    np.testing.assert_allclose(out.knowledge, total, rtol=1e-11, atol=1e-13)
    # all sources active for 395+ periods: close to the steady state solve
    src = np.zeros(15)
    src[list(out.dataset.schedule.treated_set)] = 2.0
    steady = np.linalg.solve(np.eye(15) - A, src)
    np.testing.assert_allclose(out.knowledge[:, -1], steady, rtol=1e-6)


def test_greens_dgp_brute_force():
    cfg = baseline_config(n_units=20, n_periods=10, dgp="greens", field_decay=0.02, field_scale=1.5,
                          adopt_window=(2, 6), seed=21).noiseless()
    out = simulate(cfg)
    xy = xy_of(out)
    sched = out.dataset.schedule.adoption_time
    r = 0.85
    K = np.zeros((20, 10))
    for t in range(1, 11):
        for i in range(20):
            if i in sched and t >= sched[i]:
                K[i, t - 1] += 2.0 * (1 - r ** (t - sched[i] + 1)) / 0.15
            for j, a in sched.items():
                if j != i and t >= a:
                    K[i, t - 1] += 1.5 * k0(0.02 * math.dist(xy[i], xy[j]))
    np.testing.assert_allclose(out.knowledge, K, rtol=1e-9)


def test_determinism_and_seed_sensitivity():
    a = simulate(baseline_config(n_units=40, seed=7))
    b = simulate(baseline_config(n_units=40, seed=7))
    c = simulate(baseline_config(n_units=40, seed=8))
    assert np.array_equal(a.dataset.outcome, b.dataset.outcome)
    assert np.array_equal(a.knowledge, b.knowledge)
    assert not np.array_equal(a.dataset.outcome, c.dataset.outcome)


def test_noiseless_twin_shares_layout():
    cfg = baseline_config(n_units=40, seed=7, replication=3)
    a, b = simulate(cfg), simulate(cfg.noiseless())
    assert a.dataset.units == b.dataset.units
    assert a.dataset.schedule == b.dataset.schedule
    np.testing.assert_array_equal(a.knowledge, b.knowledge)


def test_powerlaw_weight_ratio():
    # alpha = 1: doubling the distance halves the weight
    pts = np.array([[0.0, 0.0], [100.0, 0.0], [200.0, 0.0]])
    d = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
    cfg = SimConfig(kernel="power", power_alpha=1.0, max_row_sum=None)
    W, info = spillover_weights(d, cfg)
    assert W[0, 1] / W[0, 2] == pytest.approx(2.0, rel=1e-14)
    assert np.all(np.diag(W) == 0)
    assert info["power_cap_km"] == pytest.approx(100.0)


def test_powerlaw_large_exponent_vanishes():
    out = simulate_powerlaw(baseline_config(n_units=50, seed=1, max_row_sum=None).noiseless(), 40.0)
    untreated = [i for i in range(50) if i not in out.dataset.schedule.treated_set]
    assert out.knowledge[untreated].max() < 1e-6 * out.knowledge.max()
    with pytest.raises(ValidationError):
        simulate_powerlaw(baseline_config(), 0.0)


def test_unscaled_kernel_warns_and_overflow_is_diagnosed():
    with pytest.warns(StabilityWarning, match=r"\(1 - delta\)"):
        simulate(baseline_config(n_units=30, max_row_sum=None, seed=1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StabilityWarning)
        with pytest.raises(SimulationDivergedError, match=r"\(1 - delta\) \+ row-sum"):
            simulate(baseline_config(n_units=10, n_periods=120, max_row_sum=1e6, adopt_window=(1, 2)))


def test_baseline_is_quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("error", StabilityWarning)
        simulate(baseline_config(n_units=60, seed=2))


@pytest.mark.parametrize("kw", [
    dict(n_units=1),
    dict(n_periods=1),
    dict(domain_side=0.0),
    dict(treat_share=0.0),
    dict(treat_share=1.0),
    dict(n_units=3, treat_share=0.2),
    dict(adopt_window=(0, 3)),
    dict(adopt_window=(5, 3)),
    dict(adopt_window=(3, 25)),
    dict(sigma_eps=-1.0),
    dict(kernel="gaussian"),
    dict(max_row_sum=0.0),
    dict(dgp="pde"),
])
def test_invalid_config(kw):
    with pytest.raises(ValidationError):
        baseline_config(**kw)


@pytest.mark.parametrize("kw", [dict(delta=0.0), dict(delta=1.0), dict(lam=0.0), dict(kappa=-1.0),
                                dict(beta=0.0), dict(delta=float("nan"))])
def test_invalid_params(kw):
    with pytest.raises(ValidationError):
        DiffusionParams(**kw)


def test_growth_params_need_opt_in():
    assert DiffusionParams(delta=-0.05, allow_growth=True).delta == -0.05
    with pytest.raises(ValidationError):
        DiffusionParams(delta=-0.05, allow_growth=True).kappa_s

"""Monte Carlo harness: replicate simulate -> estimate -> test and summarise.

Replication ``r`` simulates from the streams derived from
``(master_seed, r)``. Replications run in spawned worker processes with
single-threaded linear algebra, so summaries are bit-identical for any
worker count.

Truth values: ``delta``, ``tau*`` and ``kappa`` use the data generating
values. The spatial quantities (``kappa_s``, ``d*`` and the recovered
``lam``) are compared with a pseudo-truth: the estimate obtained from the
noiseless twin of the same replication (identical layout and adoption, all
noise scales zero). The network update does not produce an exactly
exponential profile, so the effective spatial decay is defined by what the
estimator converges to without noise.
"""

from __future__ import annotations

import math
import multiprocessing as mp
import os
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, fields, replace
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import MonteCarloAborted, NumericalError, ValidationError
from .estimate import StageConfig, estimate_separate, run_pipeline
from .greens import GreensSpec
from .inference import (
    delta_method_boundaries,
    norm_ppf,
    select_boundary_condition,
    spec_test_quadratic,
    spec_test_superposition,
    test_boundary_exists,
    test_unified_dynamics,
)
from .simulate import SimConfig, baseline_config, simulate

__all__ = [
    "McConfig",
    "ParamMetrics",
    "McSummary",
    "McResult",
    "apply_overrides",
    "run_mc",
    "run_sweep",
    "run_comparison",
    "run_boundary_condition_study",
    "run_spec_test_study",
    "PRESETS",
    "preset_config",
    "run_preset",
    "METHODS",
]

METHODS = ("Unified", "Separate", "StandardDiD", "AdHocCutoff")
EXTRA_TESTS = ("quadratic", "unified_dynamics", "superposition")
AD_HOC_D_STAR = 100.0
AD_HOC_TAU_STAR = 5.0
_PARAM_KEYS = ("delta", "lam", "kappa", "beta", "allow_growth")


def apply_overrides(base: SimConfig, overrides: Mapping[str, Any]) -> SimConfig:
    """Copy of ``base`` with simulation fields or structural parameters replaced.

    Keys are :class:`SimConfig` field names or ``delta``, ``lam``, ``kappa``,
    ``beta``, ``allow_growth``.

    Raises
    ------
    ValidationError
        Unknown key or an invalid resulting configuration.
    """
    sim_fields = {f.name for f in fields(SimConfig)}
    p_over = {k: v for k, v in overrides.items() if k in _PARAM_KEYS}
    s_over = {k: v for k, v in overrides.items() if k not in _PARAM_KEYS}
    unknown = set(s_over) - sim_fields
    if unknown:
        raise ValidationError(f"unknown override key(s): {', '.join(sorted(unknown))}")
    if "adopt_window" in s_over:
        s_over["adopt_window"] = tuple(s_over["adopt_window"])
    params = replace(base.params, **p_over) if p_over else base.params
    return replace(base, params=params, **s_over)


@dataclass(frozen=True)
class McConfig:
    """Monte Carlo design.

    Parameters
    ----------
    base : SimConfig
        Design of every replication; its ``seed`` and ``replication`` are
        replaced by ``master_seed`` and the replication index.
    M : int
        Replications.
    master_seed : int
    stage : StageConfig
    sweeps : mapping of str to sequence of dict
        Named lists of overrides (see :func:`apply_overrides`).
    methods : tuple of str
        Subset of ``METHODS`` for the comparison study.
    tests : tuple of str
        Extra per-replication tests from ``EXTRA_TESTS``.
    threads : int
        Worker processes; ``0`` runs in the calling process.
    alpha : float
    max_failure_share : float
        Abort when more than this share of replications fail.
    pseudo_truth : bool
        Estimate the noiseless twin for the spatial pseudo-truth.
    label : str
    """

    base: SimConfig = field(default_factory=baseline_config)
    M: int = 200
    master_seed: int = 0
    stage: StageConfig = field(default_factory=StageConfig)
    sweeps: Mapping[str, Sequence[Mapping[str, Any]]] = field(default_factory=dict)
    methods: tuple[str, ...] = ("Unified",)
    tests: tuple[str, ...] = ()
    threads: int = 1
    alpha: float = 0.05
    max_failure_share: float = 0.5
    pseudo_truth: bool = True
    label: str = "baseline"

    def __post_init__(self):
        if self.M < 1:
            raise ValidationError("M must be >= 1")
        if self.threads < 0:
            raise ValidationError("threads must be >= 0")
        if not 0 < self.alpha < 1:
            raise ValidationError("alpha must lie in (0, 1)")
        if not 0 < self.max_failure_share <= 1:
            raise ValidationError("max_failure_share must lie in (0, 1]")
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ValidationError(f"unknown method(s): {', '.join(sorted(bad))}")
        bad = set(self.tests) - set(EXTRA_TESTS)
        if bad:
            raise ValidationError(f"unknown test(s): {', '.join(sorted(bad))}")
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "tests", tuple(self.tests))
        sweeps = {str(k): tuple(dict(o) for o in v) for k, v in dict(self.sweeps).items()}
        for name, lst in sweeps.items():
            for o in lst:
                try:
                    apply_overrides(self.base, o)
                except (ValidationError, TypeError) as exc:
                    raise ValidationError(f"sweep {name!r} override {o}: {exc}") from exc
        object.__setattr__(self, "sweeps", sweeps)


@dataclass(frozen=True)
class ParamMetrics:
    """Bias, RMSE and coverage of one parameter over successful replications."""

    truth: float
    mean: float
    bias: float
    rmse: float
    coverage: float | None
    n: int

    def to_dict(self) -> dict[str, Any]:
        return {"truth": self.truth, "mean": self.mean, "bias": self.bias, "rmse": self.rmse,
                "coverage": self.coverage, "n": self.n}


@dataclass(frozen=True)
class McSummary:
    """Aggregated Monte Carlo output.

    ``wall_seconds`` is excluded from :meth:`to_dict` so serialised summaries
    depend only on the design and the seed.
    """

    label: str
    M: int
    n_ok: int
    n_failed: int
    n_decay_violated: int
    failures: dict[str, int]
    params: dict[str, ParamMetrics]
    power: dict[str, float]
    methods: dict[str, dict[str, Any]]
    tests: dict[str, dict[str, Any]]
    design: dict[str, Any]
    wall_seconds: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "label": self.label,
            "M": self.M,
            "n_ok": self.n_ok,
            "n_failed": self.n_failed,
            "n_decay_violated": self.n_decay_violated,
            "failures": dict(sorted(self.failures.items())),
            "design": self.design,
            "params": {k: v.to_dict() for k, v in self.params.items()},
            "power": self.power,
            "methods": self.methods,
            "tests": self.tests,
        }


@dataclass(frozen=True)
class McResult:
    summary: McSummary
    records: list[dict[str, Any]]


# ---------------------------------------------------------------- workers

_BLAS_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "BLIS_NUM_THREADS",
              "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS")


@contextmanager
def _single_thread_env():
    old = {k: os.environ.get(k) for k in _BLAS_VARS}
    try:
        for k in _BLAS_VARS:
            os.environ[k] = "1"
        yield
    finally:
        for k, v in old.items():
            if v is None:
                os.environ.pop(k, None)
            else:
                os.environ[k] = v


def _map(fn: Callable, tasks: Sequence, threads: int) -> list:
    if threads == 0 or len(tasks) == 0:
        return [fn(t) for t in tasks]
    workers = max(1, min(threads, len(tasks)))
    with _single_thread_env():
        ctx = mp.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            # map returns results in task order whatever the scheduling
            return list(pool.map(fn, tasks, chunksize=max(1, len(tasks) // (8 * workers))))


def _nan_record(r: int, status: str, message: str) -> dict[str, Any]:
    return {"replication": r, "status": status, "message": message}


def _replicate(task: tuple) -> dict[str, Any]:
    sim_cfg, stage, tests, methods, alpha, pseudo = task
    r = sim_cfg.replication
    eps_s, eps_t = stage.thresholds
    p = sim_cfg.params
    rec: dict[str, Any] = _nan_record(r, "ok", "")
    try:
        sim = simulate(sim_cfg)
        res = run_pipeline(sim.dataset, stage)
    except (NumericalError, ValidationError, np.linalg.LinAlgError) as exc:
        return _nan_record(r, "failed", type(exc).__name__ + ": " + str(exc).split(" (usable")[0])
    rec["status"] = res.status
    rec["message"] = res.message
    for k in ("att", "att_se", "kappa_s", "kappa_s_se", "delta", "delta_se", "lam", "kappa",
              "kappa_structural", "d_star", "tau_star", "ratio"):
        rec[k] = float(getattr(res, k))
    rec["kappa_se"] = res.att_se / stage.beta
    if res.ok:
        dm = delta_method_boundaries(res)
        rec.update(d_star_se=dm.d_star_se, tau_star_se=dm.tau_star_se, lam_se=dm.lam_se)
    else:
        rec.update(d_star_se=math.nan, tau_star_se=math.nan, lam_se=math.nan)
    rec.update(delta_true=p.delta, tau_star_true=math.log(1.0 / eps_t) / p.delta if p.delta > 0 else math.inf,
               kappa_true=p.kappa, lam_dgp=p.lam)
    rec["kappa_structural_true"] = p.kappa
    if pseudo:
        try:
            twin = run_pipeline(simulate(sim_cfg.noiseless()).dataset, stage)
            ks = twin.kappa_s
        except (NumericalError, ValidationError, np.linalg.LinAlgError) as exc:
            return _nan_record(r, "failed", "noiseless twin: " + type(exc).__name__)
        rec["kappa_s_true"] = ks
        rec["d_star_true"] = math.log(1.0 / eps_s) / ks if ks > 0 else math.inf
        rec["lam_true"] = math.sqrt(p.delta) / ks if ks > 0 and p.delta > 0 else math.nan
    else:
        rec["kappa_s_true"] = math.sqrt(p.delta) / p.lam if p.delta > 0 else math.nan
        rec["d_star_true"] = math.log(1.0 / eps_s) / rec["kappa_s_true"]
        rec["lam_true"] = p.lam
    t1 = test_boundary_exists(res.kappa_s, res.kappa_s_se, alpha)
    t1t = test_boundary_exists(res.delta, res.delta_se, alpha, dimension="temporal")
    rec.update(p_spatial=t1.p_value, reject_spatial=int(t1.reject), p_temporal=t1t.p_value,
               reject_temporal=int(t1t.reject))
    ds = sim.dataset
    if "quadratic" in tests:
        q = spec_test_quadratic(res.spatial, alpha)
        rec.update(quadratic_stat=q.statistic, quadratic_p=q.p_value, quadratic_reject=int(q.reject),
                   quadratic_skipped=int(q.skipped))
    if "unified_dynamics" in tests and res.ok:
        try:
            u = test_unified_dynamics(ds, res, alpha)
            rec.update(unified_score=u.statistic, unified_preferred=int(u.details["preferred"] == "unified"))
        except (NumericalError, ValidationError):
            rec.update(unified_score=math.nan, unified_preferred=-1)
    if "superposition" in tests and res.ok:
        s = spec_test_superposition(ds, res, alpha)
        rec.update(superposition_p=s.p_value, superposition_reject=int(s.reject),
                   superposition_skipped=int(s.skipped))
    if "Separate" in methods:
        try:
            d_sep, t_sep = estimate_separate(ds, stage)
        except (NumericalError, ValidationError, np.linalg.LinAlgError):
            d_sep, t_sep = math.nan, math.nan
        rec.update(separate_d_star=d_sep, separate_tau_star=t_sep)
    if "AdHocCutoff" in methods:
        rec.update(adhoc_d_star=AD_HOC_D_STAR, adhoc_tau_star=AD_HOC_TAU_STAR)
    return rec


# ---------------------------------------------------------------- summaries

_SUMMARY_PARAMS = (
    ("delta", "delta_true", "delta_se"),
    ("lam", "lam_true", "lam_se"),
    ("kappa", "kappa_true", "kappa_se"),
    ("kappa_structural", "kappa_structural_true", None),
    ("kappa_s", "kappa_s_true", "kappa_s_se"),
    ("d_star", "d_star_true", "d_star_se"),
    ("tau_star", "tau_star_true", "tau_star_se"),
)


def _metrics(est: np.ndarray, truth: np.ndarray, se: np.ndarray | None, z: float) -> ParamMetrics:
    ok = np.isfinite(est) & np.isfinite(truth)
    e, t = est[ok], truth[ok]
    n = int(e.size)
    if n == 0:
        return ParamMetrics(math.nan, math.nan, math.nan, math.nan, None, 0)
    err = e - t
    bias = float(np.mean(err))
    rmse = max(math.sqrt(float(np.mean(err * err))), abs(bias))
    cov = None
    if se is not None:
        s = se[ok]
        good = np.isfinite(s)
        cov = float(np.mean(np.abs(err[good]) <= z * s[good])) if good.any() else None
    return ParamMetrics(float(np.mean(t)), float(np.mean(e)), bias, rmse, cov, n)


def _col(records, key):
    return np.array([float(r.get(key, math.nan)) for r in records], dtype=float)


def _rmse(est, truth):
    ok = np.isfinite(est) & np.isfinite(truth)
    if not ok.any():
        return math.nan
    return math.sqrt(float(np.mean((est[ok] - truth[ok]) ** 2)))


def summarise(records: list[dict[str, Any]], config: McConfig, label: str | None = None,
              wall: float = 0.0, design: dict[str, Any] | None = None) -> McSummary:
    """Aggregate per-replication records in replication order.

    Raises
    ------
    MonteCarloAborted
        When more than ``config.max_failure_share`` of replications failed.
    """
    records = sorted(records, key=lambda r: r["replication"])
    failed = [r for r in records if r["status"] == "failed"]
    failures: dict[str, int] = {}
    for r in failed:
        failures[r["message"]] = failures.get(r["message"], 0) + 1
    if len(failed) > config.max_failure_share * len(records):
        raise MonteCarloAborted(f"{len(failed)} of {len(records)} replications failed", failures)
    ran = [r for r in records if r["status"] != "failed"]
    ok = [r for r in ran if r["status"] == "ok"]
    z = norm_ppf(1.0 - config.alpha / 2.0)
    params = {}
    for name, tkey, skey in _SUMMARY_PARAMS:
        params[name] = _metrics(_col(ok, name), _col(ok, tkey), _col(ok, skey) if skey else None, z)
    params["lam_vs_dgp"] = _metrics(_col(ok, "lam"), _col(ok, "lam_dgp"), None, z)
    power = {
        "spatial_boundary_exists": float(np.mean(_col(ran, "reject_spatial"))) if ran else math.nan,
        "temporal_boundary_exists": float(np.mean(_col(ran, "reject_temporal"))) if ran else math.nan,
    }
    tests: dict[str, dict[str, Any]] = {}
    if "quadratic" in config.tests and ran:
        rej = _col(ran, "quadratic_reject")
        tests["quadratic"] = {"rejection_rate": float(np.nanmean(rej)),
                              "skipped": int(np.nansum(_col(ran, "quadratic_skipped")))}
    if "unified_dynamics" in config.tests and ok:
        pref = _col(ok, "unified_preferred")
        valid = pref >= 0
        tests["unified_dynamics"] = {"unified_preferred_rate": float(np.mean(pref[valid])) if valid.any() else math.nan,
                                     "n": int(valid.sum())}
    if "superposition" in config.tests and ok:
        sk = _col(ok, "superposition_skipped")
        rej = _col(ok, "superposition_reject")
        tests["superposition"] = {"rejection_rate": float(np.mean(rej[sk == 0])) if (sk == 0).any() else math.nan,
                                  "skipped": int(sk.sum())}
    methods: dict[str, dict[str, Any]] = {}
    d_true, t_true = _col(ok, "d_star_true"), _col(ok, "tau_star_true")
    for m in config.methods:
        if m == "Unified":
            methods[m] = {"rmse_d_star": _rmse(_col(ok, "d_star"), d_true),
                          "rmse_tau_star": _rmse(_col(ok, "tau_star"), t_true)}
        elif m == "Separate":
            methods[m] = {"rmse_d_star": _rmse(_col(ok, "separate_d_star"), d_true),
                          "rmse_tau_star": _rmse(_col(ok, "separate_tau_star"), t_true)}
        elif m == "StandardDiD":
            methods[m] = {"rmse_d_star": "NA", "rmse_tau_star": "NA",
                          "note": "two-way fixed effects only; boundaries undefined"}
        else:
            methods[m] = {"rmse_d_star": _rmse(_col(ok, "adhoc_d_star"), d_true),
                          "rmse_tau_star": _rmse(_col(ok, "adhoc_tau_star"), t_true)}
    return McSummary(label or config.label, len(records), len(ok), len(failed), len(ran) - len(ok), failures,
                     params, power, methods, tests, design or {}, wall)


def _design(cfg: SimConfig) -> dict[str, Any]:
    p = cfg.params
    return {"n_units": cfg.n_units, "n_periods": cfg.n_periods, "domain_side": cfg.domain_side,
            "delta": p.delta, "lam": p.lam, "kappa": p.kappa, "beta": p.beta, "treat_share": cfg.treat_share,
            "sigma_eps": cfg.sigma_eps, "sigma_alpha": cfg.sigma_alpha, "sigma_gamma": cfg.sigma_gamma,
            "kernel": cfg.kernel, "dgp": cfg.dgp, "max_row_sum": cfg.max_row_sum}


def _tasks(config: McConfig, sim_cfg: SimConfig) -> list[tuple]:
    return [(replace(sim_cfg, seed=config.master_seed, replication=r), config.stage, config.tests,
             config.methods, config.alpha, config.pseudo_truth) for r in range(config.M)]


def _run_cells(config: McConfig, cells: list[tuple[str, SimConfig]]) -> list[McResult]:
    t0 = time.perf_counter()
    tasks = [t for _, c in cells for t in _tasks(config, c)]
    out = _map(_replicate, tasks, config.threads)
    wall = time.perf_counter() - t0
    results = []
    for k, (label, c) in enumerate(cells):
        recs = out[k * config.M:(k + 1) * config.M]
        summ = summarise(recs, config, label, wall / len(cells), _design(c))
        results.append(McResult(summ, recs))
    return results


def run_mc(config: McConfig) -> McResult:
    """Replicate the base design ``config.M`` times."""
    return _run_cells(config, [(config.label, config.base)])[0]


def run_sweep(config: McConfig) -> dict[str, list[McResult]]:
    """Run every override of every sweep; all cells share the master seed."""
    cells, names = [], []
    for name, lst in config.sweeps.items():
        for o in lst:
            lab = name + ":" + ",".join(f"{k}={v}" for k, v in o.items())
            cells.append((lab, apply_overrides(config.base, o)))
            names.append(name)
    results = _run_cells(config, cells)
    out: dict[str, list[McResult]] = {}
    for name, res in zip(names, results):
        out.setdefault(name, []).append(res)
    return out


def run_comparison(config: McConfig) -> McResult:
    """Method comparison: RMSE of ``d*`` and ``tau*`` per method.

    Raises
    ------
    ValidationError
        Fewer than two methods.
    """
    if len(config.methods) < 2:
        raise ValidationError("comparison needs at least two methods")
    return run_mc(config)


# ---------------------------------------------------------------- boundary conditions

def _boundary_task(task: tuple) -> dict[str, Any]:
    sim_cfg, stage, conditions = task
    r = sim_cfg.replication
    try:
        sim = simulate(sim_cfg)
        res = run_pipeline(sim.dataset, stage)
        rep = select_boundary_condition(sim.dataset, res, conditions=conditions)
    except (NumericalError, ValidationError, np.linalg.LinAlgError) as exc:
        return _nan_record(r, "failed", type(exc).__name__)
    rec = _nan_record(r, "ok", "")
    rec["selected"] = rep.details["selected"]
    for c, sc in rep.details["specifications"].items():
        rec[f"d_star_{c}"] = sc["d_star"]
    return rec


def run_boundary_condition_study(config: McConfig, sides: Sequence[float] = (300.0, 2000.0),
                                 field_decay: float = math.log(10.0) / 177.0,
                                 conditions: Sequence[str] = ("unbounded", "dirichlet")) -> dict[str, Any]:
    """Bias of ``d*`` under unbounded and boundary-aware specifications.

    Each replication simulates the Green's field DGP on an ``L x L``
    Dirichlet rectangle with decay ``field_decay`` (true
    ``d* = ln(1/eps_s) / field_decay``), then fits every specification in
    ``conditions``.

    Returns
    -------
    dict
        ``rows`` with ``L``, specification, truth, mean, bias, RMSE, count
        and selection frequency; ``records`` per replication.
    """
    t0 = time.perf_counter()
    eps_s = config.stage.thresholds[0]
    truth = math.log(1.0 / eps_s) / field_decay
    cells = []
    for L in sides:
        c = replace(config.base, domain_side=float(L), dgp="greens", field_decay=field_decay,
                    spec=GreensSpec("dirichlet", float(L), float(L)))
        cells.append((L, c))
    tasks = [(replace(c, seed=config.master_seed, replication=r), config.stage, tuple(conditions))
             for _, c in cells for r in range(config.M)]
    out = _map(_boundary_task, tasks, config.threads)
    rows, records = [], []
    for k, (L, _) in enumerate(cells):
        recs = sorted(out[k * config.M:(k + 1) * config.M], key=lambda r: r["replication"])
        for rr in recs:
            records.append({"L": L, **rr})
        okr = [r for r in recs if r["status"] == "ok"]
        nf = len(recs) - len(okr)
        if nf > config.max_failure_share * len(recs):
            raise MonteCarloAborted(f"L={L}: {nf} of {len(recs)} replications failed",
                                    {r["message"]: 1 for r in recs if r["status"] != "ok"})
        for c in conditions:
            est = _col(okr, f"d_star_{c}")
            m = _metrics(est, np.full(est.shape, truth), None, 0.0)
            sel = float(np.mean([r["selected"] == c for r in okr])) if okr else math.nan
            rows.append({"L": float(L), "specification": c, "truth": truth, "mean": m.mean, "bias": m.bias,
                         "rmse": m.rmse, "n": m.n, "selected_share": sel, "n_failed": nf})
    return {"label": "boundary_conditions", "M": config.M, "rows": rows, "records": records,
            "wall_seconds": time.perf_counter() - t0}


def run_spec_test_study(config: McConfig, power_alpha: float = 4.0) -> dict[str, Any]:
    """Rejection rates of the quadratic specification test.

    Runs the base (exponential kernel) design and the same design with a
    power-law kernel ``d**(-power_alpha)``.
    """
    cfg = replace(config, tests=tuple(sorted(set(config.tests) | {"quadratic"})), pseudo_truth=False)
    cells = [("exponential", cfg.base),
             ("power_law", replace(cfg.base, kernel="power", power_alpha=float(power_alpha)))]
    res = _run_cells(cfg, cells)
    rows = []
    for r in res:
        q = r.summary.tests.get("quadratic", {})
        rows.append({"dgp": r.summary.label, "rejection_rate": q.get("rejection_rate", math.nan),
                     "skipped": q.get("skipped", 0), "n_failed": r.summary.n_failed})
    return {"label": "specification_tests", "M": config.M, "power_alpha": power_alpha, "rows": rows,
            "records": [dict(dgp=r.summary.label, **x) for r in res for x in r.records]}


# ---------------------------------------------------------------- presets

PRESETS = {
    "1": "baseline bias, RMSE, coverage and power",
    "2": "noise sweep sigma_eps in {0.25, 0.5, 1, 2}",
    "3": "boundary-condition specification on L in {300, 2000}",
    "4": "treatment-share sweep pi in {0.1, 0.25, 0.5}",
    "6": "method comparison",
    "7": "quadratic specification test, exponential vs power law",
    "rmse_vs_n": "RMSE of d* against N in {50, 100, 200, 500}",
    "variations": "sample size, noise, share, decay and domain grids",
}


def preset_config(table: str, M: int | None = None, master_seed: int = 0, threads: int = 1,
                  base: SimConfig | None = None, stage: StageConfig | None = None) -> McConfig:
    """Monte Carlo design mirroring one of the presets in ``PRESETS``."""
    table = str(table)
    if table not in PRESETS:
        raise ValidationError(f"unknown preset {table!r}; choose from {', '.join(PRESETS)}")
    b = base if base is not None else baseline_config()
    kw: dict[str, Any] = dict(base=b, master_seed=master_seed, threads=threads, stage=stage or StageConfig())
    default_M = {"1": 200, "2": 100, "3": 100, "4": 100, "6": 100, "7": 200, "rmse_vs_n": 100, "variations": 100}
    kw["M"] = M if M is not None else default_M[table]
    kw["label"] = f"table{table}" if table.isdigit() else table
    if table == "2":
        kw["sweeps"] = {"sigma_eps": [{"sigma_eps": s} for s in (0.25, 0.5, 1.0, 2.0)]}
    elif table == "4":
        kw["sweeps"] = {"treat_share": [{"treat_share": s} for s in (0.1, 0.25, 0.5)]}
    elif table == "6":
        kw["methods"] = METHODS
    elif table == "rmse_vs_n":
        kw["sweeps"] = {"n_units": [{"n_units": n} for n in (50, 100, 200, 500)]}
    elif table == "variations":
        kw["sweeps"] = {
            "n_units": [{"n_units": n} for n in (50, 100, 200, 500)],
            "n_periods": [{"n_periods": t, "adopt_window": (max(2, t // 5), max(3, (7 * t) // 10))}
                          for t in (10, 20, 40)],
            "sigma_eps": [{"sigma_eps": s} for s in (0.25, 0.5, 1.0, 2.0)],
            "treat_share": [{"treat_share": s} for s in (0.1, 0.25, 0.5)],
            "decay": [{"delta": d, "lam": l} for d, l in ((0.1, 0.01), (0.15, 0.01), (0.2, 0.02))],
            "domain_side": [{"domain_side": L} for L in (500.0, 1000.0, 2000.0)],
        }
    return McConfig(**kw)


def _summary_block(results: Iterable[McResult]) -> list[dict[str, Any]]:
    return [r.summary.to_dict() for r in results]


def run_preset(table: str, M: int | None = None, master_seed: int = 0, threads: int = 1,
               base: SimConfig | None = None, stage: StageConfig | None = None) -> dict[str, Any]:
    """Run a preset and return a JSON-ready dict with ``summary`` and ``records``.

    ``records`` is a list of flat per-replication dicts; ``wall_seconds`` is
    reported separately from ``summary``.
    """
    cfg = preset_config(table, M, master_seed, threads, base, stage)
    t0 = time.perf_counter()
    if table in ("2", "4", "rmse_vs_n", "variations"):
        sw = run_sweep(cfg)
        summary = {name: _summary_block(lst) for name, lst in sw.items()}
        records = [dict(cell=r.summary.label, **x) for lst in sw.values() for r in lst for x in r.records]
    elif table == "3":
        out = run_boundary_condition_study(cfg)
        summary = {"rows": out["rows"]}
        records = out["records"]
    elif table == "7":
        out = run_spec_test_study(cfg)
        summary = {"power_alpha": out["power_alpha"], "rows": out["rows"]}
        records = out["records"]
    elif table == "6":
        res = run_comparison(cfg)
        summary = res.summary.to_dict()
        records = res.records
    else:
        res = run_mc(cfg)
        summary = res.summary.to_dict()
        records = res.records
    return {"preset": str(table), "description": PRESETS[str(table)], "M": cfg.M, "master_seed": master_seed,
            "summary": summary, "records": records, "wall_seconds": time.perf_counter() - t0}

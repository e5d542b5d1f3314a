"""Standard errors, hypothesis tests, panel bootstrap and specification tests.

Test statistics are referred to a standard normal, a chi-square with one
degree of freedom, or (for non-nested model comparisons) a Gaussian
pseudo-likelihood model score. Model-score reports carry a Schwarz-weight
probability of the null model in ``p_value`` so every report satisfies the
same decision rule ``reject = p_value < alpha``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Sequence

import numpy as np
from scipy.optimize import isotonic_regression, least_squares, minimize, minimize_scalar
from scipy.special import expit

from .covariance import ClusteredVariance, clustered_se
from .errors import (
    InsufficientDataError,
    NumericalError,
    SingularDesignError,
    ValidationError,
)
from .estimate import (
    MIN_STAGE_OBS,
    DecayFit,
    EstimationResult,
    StageConfig,
    _profile_min,
    boundary_constant,
    fit_two_way_effects,
    residualize,
    run_pipeline,
)
from .greens import GreensSpec, greens_value
from .panel import PanelDataset
from .params import DiffusionParams

__all__ = [
    "ClusteredVariance",
    "clustered_se",
    "norm_cdf",
    "norm_sf",
    "norm_ppf",
    "chi2_1_sf",
    "chi2_1_ppf",
    "TestId",
    "NullDistribution",
    "TestReport",
    "BoundarySE",
    "BootstrapResult",
    "boundary_gradients",
    "finite_difference_gradients",
    "delta_method_boundaries",
    "test_boundary_exists",
    "test_boundary_location",
    "test_ratio_consistency",
    "test_unified_dynamics",
    "empirical_boundaries",
    "panel_bootstrap",
    "spec_test_quadratic",
    "spec_test_superposition",
    "select_boundary_condition",
    "run_inference",
]

_SQRT2 = math.sqrt(2.0)


# ---------------------------------------------------------------- distributions

def norm_cdf(x: float) -> float:
    """Standard normal CDF."""
    return 0.5 * math.erfc(-x / _SQRT2)


def norm_sf(x: float) -> float:
    """Standard normal upper tail ``1 - Phi(x)`` without cancellation."""
    return 0.5 * math.erfc(x / _SQRT2)


# Acklam's rational approximation, refined by Newton steps on erfc
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)


def _acklam(p: float) -> float:
    lo = 0.02425
    if p < lo:
        q = math.sqrt(-2.0 * math.log(p))
        return (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    if p > 1.0 - lo:
        q = math.sqrt(-2.0 * math.log1p(-p))
        return -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    q = p - 0.5
    r = q * q
    return (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
        (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)


def norm_ppf(p: float) -> float:
    """Standard normal quantile.

    Raises
    ------
    ValidationError
        If ``p`` is outside ``[0, 1]``.
    """
    if not 0.0 <= p <= 1.0:
        raise ValidationError(f"probability must lie in [0, 1], got {p}")
    if p == 0.0:
        return -math.inf
    if p == 1.0:
        return math.inf
    x = _acklam(p)
    for _ in range(3):
        # Newton on the tail that keeps full relative precision
        if x < 0:
            err = norm_cdf(x) - p
        else:
            err = (1.0 - p) - norm_sf(x)
        pdf = math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        if pdf == 0.0:
            break
        x -= err / pdf
    return x


def chi2_1_sf(w: float) -> float:
    """Upper tail of the chi-square distribution with one degree of freedom."""
    if math.isnan(w):
        return math.nan
    if w <= 0.0:
        return 1.0
    return math.erfc(math.sqrt(w / 2.0))


def chi2_1_ppf(p: float) -> float:
    """Quantile of the chi-square distribution with one degree of freedom."""
    if not 0.0 <= p <= 1.0:
        raise ValidationError(f"probability must lie in [0, 1], got {p}")
    z = norm_ppf(0.5 + 0.5 * p)
    return z * z


# ---------------------------------------------------------------- reports

class TestId(str, Enum):
    SPATIAL_BOUNDARY_EXISTS = "SpatialBoundaryExists"
    TEMPORAL_BOUNDARY_EXISTS = "TemporalBoundaryExists"
    UNIFIED_DYNAMICS = "UnifiedDynamics"
    BOUNDARY_LOCATION = "BoundaryLocation"
    RATIO_CONSISTENCY = "RatioConsistency"
    QUADRATIC_SPEC = "QuadraticSpec"
    SUPERPOSITION_SPEC = "SuperpositionSpec"
    BOUNDARY_CONDITION_SELECT = "BoundaryConditionSelect"

    __test__ = False


class NullDistribution(str, Enum):
    NORMAL = "Normal"
    CHI2_1 = "Chi2_1"
    MODEL_SCORE = "ModelScore"


@dataclass(frozen=True)
class TestReport:
    """Outcome of one hypothesis or specification test.

    Attributes
    ----------
    test_id : TestId
    statistic : float
    null_distribution : NullDistribution
    p_value : float
        In ``[0, 1]``. For model-score tests, the Schwarz-weight probability
        of the null model.
    alpha : float
    reject : bool
        ``p_value < alpha``; always ``False`` for skipped tests.
    skipped : bool
        The test was not applicable to the data.
    details : dict
    """

    __test__ = False

    test_id: TestId
    statistic: float
    null_distribution: NullDistribution
    p_value: float
    alpha: float = 0.05
    reject: bool = False
    skipped: bool = False
    details: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.p_value <= 1.0:
            raise ValidationError(f"p_value must lie in [0, 1], got {self.p_value}")
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError("alpha must lie in (0, 1)")
        expected = (not self.skipped) and self.p_value < self.alpha
        if self.reject != expected:
            raise ValidationError("reject must equal p_value < alpha")

    def to_dict(self) -> dict[str, Any]:
        return {
            "test_id": self.test_id.value,
            "statistic": self.statistic,
            "null_distribution": self.null_distribution.value,
            "p_value": self.p_value,
            "alpha": self.alpha,
            "reject": self.reject,
            "skipped": self.skipped,
            "details": self.details,
        }


def _report(test_id, stat, null, p, alpha, **details) -> TestReport:
    p = min(max(float(p), 0.0), 1.0)
    return TestReport(test_id, float(stat), null, p, alpha, p < alpha, False, details)


def _skipped(test_id, null, alpha, reason, **details) -> TestReport:
    return TestReport(test_id, math.nan, null, 1.0, alpha, False, True, {"reason": reason, **details})


# ---------------------------------------------------------------- delta method

def boundary_gradients(kappa_s: float, delta: float,
                       thresholds: tuple[float, float] = (0.1, 0.5)) -> dict[str, np.ndarray]:
    """Analytic gradients with respect to ``(kappa_s, delta)``.

    Returns
    -------
    dict
        Keys ``d_star``, ``tau_star``, ``ratio`` and ``lam``; each value has
        shape (2,).
    """
    ls = math.log(1.0 / thresholds[0])
    lt = math.log(1.0 / thresholds[1])
    return {
        "d_star": np.array([-ls / kappa_s**2, 0.0]),
        "tau_star": np.array([0.0, -lt / delta**2]),
        # d*/tau* = (ls / lt) * delta / kappa_s
        "ratio": np.array([-(ls / lt) * delta / kappa_s**2, (ls / lt) / kappa_s]),
        "lam": np.array([-math.sqrt(delta) / kappa_s**2, 0.5 / (math.sqrt(delta) * kappa_s)]),
    }


def _boundary_values(kappa_s, delta, thresholds):
    ls = math.log(1.0 / thresholds[0])
    lt = math.log(1.0 / thresholds[1])
    return {"d_star": ls / kappa_s, "tau_star": lt / delta,
            "ratio": (ls / kappa_s) / (lt / delta), "lam": math.sqrt(delta) / kappa_s}


def finite_difference_gradients(kappa_s: float, delta: float, thresholds: tuple[float, float] = (0.1, 0.5),
                                rel_step: float = 1e-6) -> dict[str, np.ndarray]:
    """Central finite-difference counterpart of :func:`boundary_gradients`."""
    out: dict[str, np.ndarray] = {}
    x = np.array([kappa_s, delta], dtype=float)
    for k in range(2):
        h = rel_step * abs(x[k])
        up, dn = x.copy(), x.copy()
        up[k] += h
        dn[k] -= h
        fu = _boundary_values(up[0], up[1], thresholds)
        fd = _boundary_values(dn[0], dn[1], thresholds)
        for name in fu:
            out.setdefault(name, np.zeros(2))[k] = (fu[name] - fd[name]) / (2.0 * h)
    return out


@dataclass(frozen=True)
class BoundarySE:
    """Delta-method standard errors of the boundaries and recovered ``lam``."""

    d_star_se: float
    tau_star_se: float
    ratio_se: float
    lam_se: float
    max_fd_rel_error: float

    def to_dict(self) -> dict[str, float]:
        return {"d_star_se": self.d_star_se, "tau_star_se": self.tau_star_se,
                "ratio_se": self.ratio_se, "lambda_se": self.lam_se}


def delta_method_boundaries(estimates: EstimationResult | Sequence[float],
                            variances: Sequence[float] | np.ndarray | None = None,
                            thresholds: tuple[float, float] | None = None) -> BoundarySE:
    """Delta-method standard errors ``sqrt(grad' V grad)``.

    Parameters
    ----------
    estimates : EstimationResult or (kappa_s, delta)
    variances : (var_kappa_s, var_delta) or 2x2 covariance, optional
        Defaults to the squared stage standard errors of ``estimates`` with
        zero covariance (the two stages use disjoint samples).
    thresholds : (eps_s, eps_t), optional

    Returns
    -------
    BoundarySE
        Also records the largest relative disagreement between analytic and
        central finite-difference gradients.

    Raises
    ------
    ValidationError
        Non-positive estimates or a malformed variance.
    """
    if isinstance(estimates, EstimationResult):
        kappa_s, delta = estimates.kappa_s, estimates.delta
        thr = thresholds or estimates.thresholds
        if variances is None:
            variances = (estimates.kappa_s_se**2, estimates.delta_se**2)
    else:
        kappa_s, delta = (float(v) for v in estimates)
        thr = thresholds or (0.1, 0.5)
        if variances is None:
            raise ValidationError("variances are required when estimates is not an EstimationResult")
    if not (kappa_s > 0 and delta > 0):
        raise ValidationError("delta method needs positive kappa_s and delta")
    V = np.asarray(variances, dtype=float)
    if V.shape == (2,):
        V = np.diag(V)
    if V.shape != (2, 2) or np.any(np.diag(V) < 0) or not np.all(np.isfinite(V)):
        raise ValidationError("variances must be two non-negative values or a 2x2 covariance")
    g = boundary_gradients(kappa_s, delta, thr)
    fd = finite_difference_gradients(kappa_s, delta, thr)
    err = 0.0
    for name in g:
        scale = np.max(np.abs(g[name]))
        err = max(err, float(np.max(np.abs(g[name] - fd[name]))) / scale)

    def se(name):
        return math.sqrt(max(float(g[name] @ V @ g[name]), 0.0))

    return BoundarySE(se("d_star"), se("tau_star"), se("ratio"), se("lam"), err)


# ---------------------------------------------------------------- tests 1 and 3

def test_boundary_exists(rate: float, se: float, alpha: float = 0.05,
                         dimension: str = "spatial") -> TestReport:
    """Test 1: one-sided t-test of ``H0: rate <= 0`` against ``rate > 0``.

    ``dimension="temporal"`` applies the same test to ``delta``.
    """
    if dimension not in ("spatial", "temporal"):
        raise ValidationError("dimension must be 'spatial' or 'temporal'")
    tid = TestId.SPATIAL_BOUNDARY_EXISTS if dimension == "spatial" else TestId.TEMPORAL_BOUNDARY_EXISTS
    if not se >= 0 or math.isnan(rate):
        raise ValidationError("standard error must be non-negative and the estimate finite")
    if se == 0:
        t = 0.0 if rate == 0 else math.copysign(math.inf, rate)
    else:
        t = rate / se
    return _report(tid, t, NullDistribution.NORMAL, norm_sf(t), alpha, estimate=rate, se=se)


def test_boundary_location(d_star: float, se: float, d0: float, alpha: float = 0.05) -> TestReport:
    """Test 3: Wald test of ``H0: d* = d0``, ``W = (d* - d0)^2 / se^2`` against chi-square(1)."""
    if not se >= 0:
        raise ValidationError("standard error must be non-negative")
    diff = d_star - d0
    if se == 0:
        w = 0.0 if diff == 0 else math.inf
    else:
        w = (diff / se) ** 2
    return _report(TestId.BOUNDARY_LOCATION, w, NullDistribution.CHI2_1, chi2_1_sf(w), alpha,
                   d_star=d_star, se=se, d0=d0)


# ---------------------------------------------------------------- empirical boundaries

def _stage_sample(dataset: PanelDataset, result: EstimationResult):
    cfg = result.config or StageConfig()
    y_sp, y_tm, _ = residualize(dataset, cfg, result.stage1)
    ex = dataset.exposure
    m = (~ex.treated) & np.isfinite(ex.dist) & (ex.dist > result.d_min) & np.isfinite(y_sp)
    return cfg, y_sp, y_tm, m


def _temporal_outcome(dataset: PanelDataset, result: EstimationResult, y_tm: np.ndarray):
    """Treated-cell outcomes net of the effects used by the temporal fit."""
    tm = result.temporal
    ex = dataset.exposure
    m = ex.treated & (ex.tau > result.tau_min)
    if tm is not None and tm.method == "accumulation_joint":
        A, delta = tm.coef
        r = 1.0 - delta
        path = np.zeros(ex.treated.shape)
        path[m] = 1.0 - r ** (ex.tau[m] + 1.0)
        sample = (~ex.treated) | m
        a, g = fit_two_way_effects(dataset.outcome - A * path, sample)
        y = dataset.outcome - a[:, None] - g[None, :]
    else:
        y = y_tm
    return y, m & np.isfinite(y)


def _crossing(x: np.ndarray, level: np.ndarray, target: float) -> float:
    """First ``x`` where a decreasing ``level`` reaches ``target``, log-interpolated."""
    below = np.nonzero(level <= target)[0]
    if below.size == 0:
        return math.inf
    k = int(below[0])
    if k == 0:
        if level.size < 2:
            return float(x[0])
        k = 1
    x0, x1 = x[k - 1], x[k]
    l0, l1 = level[k - 1], level[k]
    if l0 > 0 and l1 > 0 and target > 0 and l0 != l1:
        return float(x0 + (math.log(l0) - math.log(target)) / (math.log(l0) - math.log(l1)) * (x1 - x0))
    if l0 != l1:
        return float(x0 + (l0 - target) / (l0 - l1) * (x1 - x0))
    return float(x0)


def empirical_boundaries(dataset: PanelDataset, result: EstimationResult,
                         n_bins: int = 20) -> tuple[float, float]:
    """Boundaries located by nonparametric threshold crossings.

    The spatial profile is the binned mean of the residualized outcome net of
    the fitted offset, over distance-quantile bins, made monotone by
    isotonic regression; ``d*`` is where it first falls to ``eps_s`` times
    the fitted amplitude at the source. The temporal profile is the gap to
    the fitted long-run level by time since adoption (``accumulation``) or
    the effect level itself (``loglinear``); ``tau*`` is where it falls to
    ``eps_t`` of its value at the start of treatment.

    Returns
    -------
    d_star, tau_star : float
        ``inf`` when the profile never crosses.
    """
    eps_s, eps_t = result.thresholds
    cfg, y_sp, y_tm, m = _stage_sample(dataset, result)
    sp = result.spatial
    d = dataset.exposure.dist[m]
    y = y_sp[m]
    if d.size < MIN_STAGE_OBS:
        raise InsufficientDataError("empirical_boundaries: spatial sample too small", int(d.size))
    order = np.argsort(d, kind="stable")
    chunks = np.array_split(order, min(n_bins, d.size))
    dx = np.array([d[c].mean() for c in chunks])
    if sp.method == "loglinear":
        ref = math.exp(sp.coef[0])
        lv = np.array([math.exp(np.mean(np.log(np.maximum(np.abs(y[c]), cfg.log_floor)))) for c in chunks])
    else:
        ref = sp.coef[1]
        lv = np.array([y[c].mean() for c in chunks]) - sp.coef[0]
    w = np.array([c.size for c in chunks], dtype=float)
    lv = isotonic_regression(lv, weights=w, increasing=False).x
    d_emp = _crossing(dx, lv, eps_s * ref)

    tm = result.temporal
    yt, mt = _temporal_outcome(dataset, result, y_tm)
    tau = dataset.exposure.tau[mt]
    yv = yt[mt]
    taus = np.unique(tau)
    if taus.size < 2:
        raise InsufficientDataError("empirical_boundaries: temporal sample too small", int(yv.size))
    counts = np.array([np.sum(tau == s) for s in taus], dtype=float)
    if tm.method.startswith("accumulation"):
        A = tm.coef[0]
        gap = np.array([A - yv[tau == s].mean() for s in taus])
        lt = gap if A > 0 else -gap
        ref_t, shift = abs(A), 1.0
    else:
        lt = np.array([math.exp(np.mean(np.log(np.maximum(np.abs(yv[tau == s]), cfg.log_floor)))) for s in taus])
        ref_t, shift = math.exp(tm.coef[0]), 0.0
    lt = isotonic_regression(lt, weights=counts, increasing=False).x
    t_emp = _crossing(taus.astype(float) + shift, lt, eps_t * ref_t)
    return d_emp, t_emp


def _empirical_ratio_gap(dataset, result) -> float:
    d_emp, t_emp = empirical_boundaries(dataset, result)
    if not (math.isfinite(d_emp) and math.isfinite(t_emp) and t_emp > 0):
        return math.nan
    return d_emp / t_emp - boundary_constant(result.thresholds) * result.lam * math.sqrt(result.delta)


# ---------------------------------------------------------------- bootstrap

@dataclass(frozen=True)
class BootstrapResult:
    """Panel bootstrap over units.

    Attributes
    ----------
    B : int
        Requested replications.
    intervals : dict
        Percentile interval ``(lower, upper)`` per parameter.
    sd : dict
        Bootstrap standard deviation per parameter.
    n_failed : int
        Replicates whose re-estimation failed; they are excluded.
    level : float
        Interval coverage level.
    draws : dict
        Successful draws per parameter, in replicate order.
    """

    B: int
    intervals: dict[str, tuple[float, float]]
    sd: dict[str, float]
    n_failed: int
    level: float = 0.95
    draws: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.B < 1:
            raise ValidationError("B must be >= 1")
        for name, (lo, hi) in self.intervals.items():
            if lo > hi:
                raise ValidationError(f"interval for {name} has lower > upper")

    def to_dict(self) -> dict[str, Any]:
        return {"B": self.B, "level": self.level, "n_failed": self.n_failed,
                "intervals": {k: [lo, hi] for k, (lo, hi) in self.intervals.items()},
                "sd": dict(self.sd)}


BOOTSTRAP_PARAMETERS = ("att", "kappa_s", "delta", "lam", "kappa", "kappa_structural",
                        "d_star", "tau_star", "ratio")


def _bootstrap_rows(seed: int, b: int, n: int) -> np.ndarray:
    from .simulate import rng_stream

    return np.sort(rng_stream(seed, b, "bootstrap").integers(0, n, size=n))


def _one_replicate(dataset, rows, config, empirical):
    try:
        ds = dataset.subset_units(rows, relabel=True)
        res = run_pipeline(ds, config)
    except (NumericalError, ValidationError, np.linalg.LinAlgError):
        return None
    if not res.ok:
        return None
    out = {name: float(getattr(res, name)) for name in BOOTSTRAP_PARAMETERS}
    if empirical:
        try:
            out["ratio_gap_empirical"] = _empirical_ratio_gap(ds, res)
        except (NumericalError, ValidationError):
            out["ratio_gap_empirical"] = math.nan
    return out


def panel_bootstrap(dataset: PanelDataset, B: int, seed: int, config: StageConfig | None = None,
                    threads: int = 1, level: float = 0.95, empirical: bool = False,
                    resamples: Sequence[Sequence[int]] | None = None) -> BootstrapResult:
    """Resample units with replacement and re-run the full pipeline.

    Parameters
    ----------
    dataset : PanelDataset
    B : int
        Number of replicates, at least 1.
    seed : int
        Replicate ``b`` draws its unit indices from its own stream derived
        from ``(seed, b)``, so results do not depend on ``threads``.
    config : StageConfig, optional
    threads : int
        Worker threads.
    level : float
        Percentile interval level.
    empirical : bool
        Also record the empirical-threshold ratio gap used by Test 4.
    resamples : sequence of index sequences, optional
        Explicit unit rows per replicate, overriding the random draws.

    Returns
    -------
    BootstrapResult
        Intervals are computed from sorted draws; failed replicates are
        counted and dropped.
    """
    if B < 1:
        raise ValidationError("B must be >= 1")
    if not 0 < level < 1:
        raise ValidationError("level must lie in (0, 1)")
    if resamples is not None and len(resamples) != B:
        raise ValidationError("resamples must provide one index set per replicate")
    n = dataset.n_units
    rows = [np.asarray(resamples[b]) if resamples is not None else _bootstrap_rows(seed, b, n) for b in range(B)]

    def work(b):
        return _one_replicate(dataset, rows[b], config, empirical)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            reps = list(pool.map(work, range(B)))
        # map preserves submission order
    else:
        reps = [work(b) for b in range(B)]
    ok = [r for r in reps if r is not None]
    names = list(BOOTSTRAP_PARAMETERS) + (["ratio_gap_empirical"] if empirical else [])
    draws = {k: np.array([r[k] for r in ok], dtype=float) for k in names}
    intervals, sds = {}, {}
    q = (100.0 * (1 - level) / 2, 100.0 * (1 + level) / 2)
    for k, v in draws.items():
        v = np.sort(v[np.isfinite(v)])
        if v.size == 0:
            intervals[k] = (math.nan, math.nan)
            sds[k] = math.nan
            continue
        lo, hi = np.percentile(v, q)
        intervals[k] = (float(lo), float(max(hi, lo)))
        sds[k] = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return BootstrapResult(B, intervals, sds, B - len(ok), level, draws)


# ---------------------------------------------------------------- test 4

def test_ratio_consistency(result: EstimationResult, variance: float | None = None, *,
                           mode: str = "algebraic", dataset: PanelDataset | None = None,
                           bootstrap: BootstrapResult | None = None, alpha: float = 0.05) -> TestReport:
    """Test 4: Wald test that the boundary ratio equals ``c * lam * sqrt(delta)``.

    Parameters
    ----------
    result : EstimationResult
    variance : float, optional
        Variance of the numerator. Defaults to the delta-method variance of
        the ratio (``algebraic``) or the bootstrap variance of the empirical
        gap (``empirical``).
    mode : {"algebraic", "empirical"}
        ``algebraic`` uses the closed-form boundaries, for which the numerator
        is zero by construction (rounding below 1e-9 relative is treated as
        exact). ``empirical`` locates both boundaries by threshold crossings
        of the estimated profiles.
    dataset : PanelDataset
        Required for ``empirical``.
    bootstrap : BootstrapResult
        Source of the joint variance for ``empirical``; must have been run
        with ``empirical=True``.
    """
    if not result.ok:
        raise ValidationError("ratio test needs a successful estimation result")
    if mode == "algebraic":
        num = result.ratio - result.ratio_theory
        if abs(num) <= 1e-9 * abs(result.ratio):
            num = 0.0
        V = variance if variance is not None else delta_method_boundaries(result).ratio_se ** 2
        w = 0.0 if num == 0 else (num * num / V if V > 0 else math.inf)
        return _report(TestId.RATIO_CONSISTENCY, w, NullDistribution.CHI2_1, chi2_1_sf(w), alpha,
                       mode=mode, numerator=num, variance=V)
    if mode != "empirical":
        raise ValidationError("mode must be 'algebraic' or 'empirical'")
    if dataset is None:
        raise ValidationError("empirical mode needs the dataset")
    d_emp, t_emp = empirical_boundaries(dataset, result)
    if not (math.isfinite(d_emp) and math.isfinite(t_emp)):
        return _skipped(TestId.RATIO_CONSISTENCY, NullDistribution.CHI2_1, alpha,
                        "empirical profile never crosses its threshold", d_star_empirical=d_emp,
                        tau_star_empirical=t_emp)
    num = d_emp / t_emp - boundary_constant(result.thresholds) * result.lam * math.sqrt(result.delta)
    if variance is None:
        if bootstrap is None or "ratio_gap_empirical" not in bootstrap.draws:
            raise ValidationError("empirical mode needs a variance or an empirical bootstrap")
        g = bootstrap.draws["ratio_gap_empirical"]
        g = g[np.isfinite(g)]
        if g.size < 2:
            raise InsufficientDataError("too few finite bootstrap draws for the ratio variance", int(g.size))
        variance = float(g.var(ddof=1))
    w = num * num / variance if variance > 0 else (0.0 if num == 0 else math.inf)
    return _report(TestId.RATIO_CONSISTENCY, w, NullDistribution.CHI2_1, chi2_1_sf(w), alpha, mode=mode,
                   numerator=num, variance=variance, d_star_empirical=d_emp, tau_star_empirical=t_emp)


# ---------------------------------------------------------------- test 2

def _buildup(age: np.ndarray, r: float) -> np.ndarray:
    # normalised response of an untreated neighbour to a source switched on
    # ``age`` periods ago: both stocks accumulate geometrically at rate r
    a = np.maximum(age, 0.0)
    ra = r ** a
    return np.where(age >= 0, 1.0 - ra - a * (1.0 - r) * ra, 0.0)


def _lin_ssr(X, y):
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    res = y - X @ coef
    return float(res @ res), coef


def test_unified_dynamics(dataset: PanelDataset, result: EstimationResult, alpha: float = 0.05) -> TestReport:
    """Test 2: unified against separate spatial and temporal dynamics.

    The temporal equation is the accumulation path ``A (1 - r^(tau + 1))``
    on treated cells. The spatial equation describes untreated cells as
    ``c + B sum_j exp(-k d_ij) h(t - T_j; r_s)`` over active sources, where
    ``h`` is the build-up of a neighbour's stock fed by a source whose own
    stock accumulates at rate ``r``. The unified model imposes ``r_s = r``;
    the separate model leaves ``r_s`` free. The models are compared by BIC
    under a Gaussian pseudo-likelihood with one variance per equation.

    Returns
    -------
    TestReport
        ``statistic`` is ``BIC_separate - BIC_unified`` (positive favours the
        unified model); ``p_value`` is the Schwarz weight of the unified
        model. ``details["preferred"]`` names the better model and
        ``details["tie"]`` flags equal likelihoods.

    Raises
    ------
    InsufficientDataError, SingularDesignError
        When either equation cannot be fitted.
    """
    if result.temporal is None or result.spatial is None:
        raise ValidationError("result lacks stage internals")
    cfg, y_sp, y_tm, m = _stage_sample(dataset, result)
    ex = dataset.exposure
    adopt = dataset.adoption
    src = np.nonzero(adopt > 0)[0]
    if m.sum() < MIN_STAGE_OBS or src.size == 0:
        raise InsufficientDataError("unified dynamics: spatial sample too small", int(m.sum()))
    ii, tt = np.nonzero(m)
    t_val = dataset.times[tt]
    dist = dataset.distances[np.ix_(ii, src)]
    age = t_val[:, None] - adopt[src][None, :]
    ys = y_sp[m]
    yt_full, mt = _temporal_outcome(dataset, result, y_tm)
    yt = yt_full[mt]
    p1 = ex.tau[mt] + 1.0
    if yt.size < MIN_STAGE_OBS or np.ptp(p1) == 0:
        raise InsufficientDataError("unified dynamics: temporal sample too small", int(yt.size))
    n1, n2 = ys.size, yt.size
    ones = np.ones(n1)

    def ssr_space(k, r):
        x = np.sum(np.exp(-k * dist) * _buildup(age, r), axis=1)
        if np.ptp(x) == 0:
            return math.inf
        return _lin_ssr(np.column_stack([ones, x]), ys)[0]

    def ssr_time(r):
        x = 1.0 - r**p1
        xx = float(x @ x)
        if xx <= 0:
            return math.inf
        A = float(x @ yt) / xx
        res = yt - A * x
        return float(res @ res)

    def nll(s1, s2):
        # profile Gaussian negative log-likelihood with one variance per equation
        if not (s1 > 0 and s2 > 0 and math.isfinite(s1) and math.isfinite(s2)):
            return math.inf
        return 0.5 * (n1 * (math.log(2 * math.pi * s1 / n1) + 1) + n2 * (math.log(2 * math.pi * s2 / n2) + 1))

    dpos = dist[np.isfinite(dist) & (dist > 0)]
    k_lo = math.log(10.0) / (10.0 * float(dpos.max()))
    k_hi = math.log(10.0) / float(np.percentile(dpos, 1))
    kg = np.geomspace(k_lo, k_hi, 20)
    rg = np.linspace(0.05, 0.98, 20)
    space_grid = np.array([[ssr_space(k, r) for r in rg] for k in kg])
    time_grid = np.array([ssr_time(r) for r in rg])

    def refine(fun, x0, bounds):
        res = minimize(fun, x0, method="Nelder-Mead",
                       options={"xatol": 1e-8, "fatol": 1e-10, "maxiter": 2000})
        x = np.clip(res.x, [b[0] for b in bounds], [b[1] for b in bounds])
        return x, fun(x)

    kb = (math.log(k_lo), math.log(k_hi))
    rb = (1e-3, 0.999)

    # unified: shared r
    tot = np.array([[nll(space_grid[a, b], time_grid[b]) for b in range(rg.size)] for a in range(kg.size)])
    a, b = np.unravel_index(int(np.nanargmin(tot)), tot.shape)
    f_uni = lambda z: nll(ssr_space(math.exp(z[0]), float(np.clip(z[1], *rb))), ssr_time(float(np.clip(z[1], *rb))))
    z_uni, nll_uni = refine(f_uni, [math.log(kg[a]), rg[b]], [kb, rb])
    nll_uni = min(nll_uni, float(tot[a, b]))

    # separate: free spatial build-up rate
    a2, b2 = np.unravel_index(int(np.nanargmin(space_grid)), space_grid.shape)
    f_sp = lambda z: ssr_space(math.exp(z[0]), float(np.clip(z[1], *rb)))
    z_sp, s_sp = refine(f_sp, [math.log(kg[a2]), rg[b2]], [kb, rb])
    s_sp = min(s_sp, float(space_grid[a2, b2]))
    rt = minimize_scalar(ssr_time, bounds=rb, method="bounded", options={"xatol": 1e-10})
    s_tm = min(float(rt.fun), float(np.nanmin(time_grid)))
    nll_sep = nll(s_sp, s_tm)
    # the separate model nests the unified one
    nll_sep = min(nll_sep, nll_uni)
    if not (math.isfinite(nll_uni) and math.isfinite(nll_sep)):
        raise SingularDesignError("unified dynamics: fit failed")
    n = n1 + n2
    bic_uni = 2 * nll_uni + 7 * math.log(n)
    bic_sep = 2 * nll_sep + 8 * math.log(n)
    diff = bic_sep - bic_uni
    tie = abs(nll_uni - nll_sep) <= 1e-9 * max(1.0, abs(nll_uni))
    preferred = "unified" if (tie or diff >= 0) else "separate"
    return _report(TestId.UNIFIED_DYNAMICS, diff, NullDistribution.MODEL_SCORE, float(expit(diff / 2.0)), alpha,
                   bic_unified=bic_uni, bic_separate=bic_sep, preferred=preferred, tie=bool(tie),
                   r_shared=float(np.clip(z_uni[1], *rb)), r_spatial=float(np.clip(z_sp[1], *rb)),
                   r_temporal=float(rt.x), n_spatial=int(n1), n_temporal=int(n2),
                   comparison="BIC under Gaussian pseudo-likelihood")


# ---------------------------------------------------------------- specification tests

def _wald_report(test_id, coef, var, alpha, **details):
    if var > 0:
        w = coef * coef / var
    else:
        w = 0.0 if coef == 0 else math.inf
    return _report(test_id, w, NullDistribution.CHI2_1, chi2_1_sf(w), alpha, coef=coef,
                   se=math.sqrt(max(var, 0.0)), **details)


def spec_test_quadratic(fit: DecayFit, alpha: float = 0.05) -> TestReport:
    """Wald test for a quadratic distance term in the Stage 2 decay.

    For ``loglinear`` fits ``ln|Y~|`` is regressed on ``(1, d, d^2)``. For
    ``decay_curve`` fits the profile ``c + B exp(-k d - q (d / s)^2)`` is
    fitted by nonlinear least squares, ``s`` being the median distance, and
    ``q`` is tested. Standard errors are clustered by unit.
    """
    d = np.asarray(fit.x, dtype=float)
    y = np.asarray(fit.y, dtype=float)
    cl = fit.clusters
    s = float(np.median(d))
    x = d / s
    if fit.method == "loglinear":
        X = np.column_stack([np.ones_like(x), x, x * x])
        coef, *_ = np.linalg.lstsq(X, y, rcond=None)
        resid = y - X @ coef
        var = clustered_se(X, resid, cl)
        return _wald_report(TestId.QUADRATIC_SPEC, float(coef[2]), float(var.cov[2, 2]), alpha,
                            method=fit.method, scale_km=s)
    c0, B0, k0 = fit.coef
    scale_y = float(np.ptp(y)) or 1.0

    def model(p):
        c, B, k, q = p
        e = np.exp(np.clip(-k * s * x - q * x * x, -700.0, 700.0))
        return c + B * e, e

    def fun(p):
        return model(p)[0] - y

    def jac(p):
        _, B, _, _ = p
        _, e = model(p)
        return np.column_stack([np.ones_like(x), e, -B * s * x * e, -B * x * x * e])

    sol = least_squares(fun, np.array([c0, B0, k0, 0.0]), jac=jac, method="lm", xtol=1e-12, ftol=1e-12,
                        gtol=1e-12, max_nfev=2000)
    resid = -sol.fun
    if math.sqrt(float(np.mean(resid**2))) <= 1e-9 * scale_y:
        return _report(TestId.QUADRATIC_SPEC, 0.0, NullDistribution.CHI2_1, 1.0, alpha, coef=float(sol.x[3]),
                       se=0.0, method=fit.method, scale_km=s, exact_fit=True)
    try:
        var = clustered_se(jac(sol.x), resid, cl)
    except SingularDesignError:
        return _skipped(TestId.QUADRATIC_SPEC, NullDistribution.CHI2_1, alpha,
                        "quadratic decay fit is degenerate (flat or vanishing profile)", method=fit.method)
    return _wald_report(TestId.QUADRATIC_SPEC, float(sol.x[3]), float(var.cov[3, 3]), alpha,
                        method=fit.method, scale_km=s, kappa_s=float(sol.x[2]))


def spec_test_superposition(dataset: PanelDataset, result: EstimationResult, alpha: float = 0.05,
                            radius: float | None = None, kappa_s: float | None = None) -> TestReport:
    """Test that spillovers from several sources add up.

    Untreated cells of the Stage 2 sample with at least two active sources
    within ``radius`` (default the estimated ``d*``) are regressed on
    ``(1, S1, S2)`` where ``S1 = sum_j g_j`` is the superposed exposure with
    ``g_j = exp(-kappa_s d_ij)`` and ``S2 = sum_{j<k} g_j g_k`` the pairwise
    interaction. ``S2`` has coefficient zero under superposition.

    Returns
    -------
    TestReport
        Skipped when fewer than 10 cells qualify or ``S2`` has no variation.
    """
    k = result.kappa_s if kappa_s is None else kappa_s
    if not k > 0:
        raise ValidationError("superposition test needs a positive spatial decay rate")
    R = result.d_star if radius is None else radius
    cfg, y_sp, _, m = _stage_sample(dataset, result)
    ex = dataset.exposure
    D = ex.treated.astype(float)
    E = np.exp(-k * dataset.distances)
    np.fill_diagonal(E, 0.0)
    S1 = E @ D
    S2 = 0.5 * (S1 * S1 - (E * E) @ D)
    near = (dataset.distances <= R).astype(float)
    np.fill_diagonal(near, 0.0)
    count = near @ D
    sel = m & (count >= 2)
    n = int(sel.sum())
    if n < MIN_STAGE_OBS:
        return _skipped(TestId.SUPERPOSITION_SPEC, NullDistribution.CHI2_1, alpha,
                        "fewer than 10 cells with two or more active sources", n_obs=n)
    s1, s2 = S1[sel], S2[sel]
    if np.ptp(s2) <= 1e-12 * max(1.0, float(np.abs(s2).max())):
        return _skipped(TestId.SUPERPOSITION_SPEC, NullDistribution.CHI2_1, alpha,
                        "pairwise interaction has no variation", n_obs=n)
    y = y_sp[sel]
    cl = np.broadcast_to(np.arange(dataset.n_units)[:, None], sel.shape)[sel]
    X = np.column_stack([np.ones(n), s1 / s1.std(), s2 / s2.std()])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    var = clustered_se(X, y - X @ coef, cl)
    return _wald_report(TestId.SUPERPOSITION_SPEC, float(coef[2]), float(var.cov[2, 2]), alpha,
                        n_obs=n, radius_km=R, kappa_s=k, regressors="standardised")


def _pair_field(points, sources, spec, params):
    # a unit never receives spillovers from itself; coincident pairs are zero
    px, sx = np.meshgrid(points[:, 0], sources[:, 0], indexing="ij")
    py, sy = np.meshgrid(points[:, 1], sources[:, 1], indexing="ij")
    apart = (px != sx) | (py != sy)
    G = np.zeros(px.shape)
    G[apart] = greens_value(px[apart], py[apart], sx[apart], sy[apart], spec, params)
    return G


def select_boundary_condition(dataset: PanelDataset, result: EstimationResult | None = None,
                              Lx: float | None = None, Ly: float | None = None, alpha: float = 0.05,
                              criterion: str = "bic", series_tol: float = 1e-8,
                              conditions: Sequence[str] = ("unbounded", "dirichlet", "neumann")) -> TestReport:
    """Choose among unbounded, Dirichlet and Neumann steady-state profiles.

    Each specification models the residualized outcome of untreated cells as
    ``c + A * sum_j G(x_i, x_j; k)`` over sources active at ``t``, with
    ``G`` normalised so the free-space profile is ``K0(k d)``. The decay
    ``k`` is profiled on a log grid and refined by Brent; ``(c, A)`` by
    least squares. Ties resolve to the earlier entry of ``conditions``
    (unbounded first).

    Parameters
    ----------
    Lx, Ly : float, optional
        Rectangle sides. Default to the dataset domain, or to the extent of
        the unit coordinates when the dataset is unbounded.

    Returns
    -------
    TestReport
        ``statistic`` is the criterion of the unbounded specification minus
        the best bounded one; ``p_value`` is the Schwarz (or Akaike) weight
        of the unbounded specification. ``details`` lists AIC, BIC, decay
        rate and ``d*`` per specification and the selected one.
    """
    if criterion not in ("aic", "bic"):
        raise ValidationError("criterion must be 'aic' or 'bic'")
    res = result if result is not None else run_pipeline(dataset)
    cfg, y_sp, _, m = _stage_sample(dataset, res)
    coords = dataset.coords
    dom = dataset.domain
    if dom is not None and dom.bounded:
        Lx = Lx or dom.Lx
        Ly = Ly or dom.Ly
    else:
        Lx = Lx or float(coords[:, 0].max()) * (1 + 1e-9)
        Ly = Ly or float(coords[:, 1].max()) * (1 + 1e-9)
    adopt = dataset.adoption
    src = np.nonzero(adopt > 0)[0]
    rows = np.nonzero(m.any(axis=1))[0]
    if src.size == 0 or m.sum() < MIN_STAGE_OBS:
        raise InsufficientDataError("boundary selection: too few untreated observations", int(m.sum()))
    D = dataset.exposure.treated[src].astype(float)
    y = y_sp[m]
    ii, tt = np.nonzero(m)
    row_pos = np.searchsorted(rows, ii)
    ones = np.ones(y.size)
    dpos = dataset.exposure.dist[m]
    k_lo = math.log(10.0) / (10.0 * float(dpos.max()))
    k_hi = math.log(10.0) / float(np.percentile(dpos, 1))
    n = y.size
    scores: dict[str, dict[str, float]] = {}
    for cond in conditions:
        spec = GreensSpec(cond, Lx, Ly, series_tol=series_tol) if cond != "unbounded" else GreensSpec()

        def regressor(k):
            # decay sqrt(delta) / lam = k and unit free-space scale
            gp = DiffusionParams(delta=0.5, lam=math.sqrt(0.5) / k, kappa=2 * math.pi * 0.5 / k**2)
            G = _pair_field(coords[rows], coords[src], spec, gp)
            return (G @ D)[row_pos, tt]

        def ssr(k):
            x = regressor(k)
            if np.ptp(x) == 0:
                return math.inf
            return _lin_ssr(np.column_stack([ones, x]), y)[0]

        k_hat = _profile_min(ssr, k_lo, k_hi, n_grid=32)
        s = ssr(k_hat)
        ll = -0.5 * n * (math.log(2 * math.pi * s / n) + 1)
        npar = 4
        scores[cond] = {"aic": -2 * ll + 2 * npar, "bic": -2 * ll + npar * math.log(n), "decay_rate": k_hat,
                        "d_star": math.log(1.0 / res.thresholds[0]) / k_hat, "ssr": s}
    crit = np.array([scores[c][criterion] for c in conditions])
    best = float(crit.min())
    tol = 1e-9 * max(1.0, abs(best))
    chosen = next(c for c, v in zip(conditions, crit) if v <= best + tol)
    others = [scores[c][criterion] for c in conditions if c != "unbounded"]
    stat = scores["unbounded"][criterion] - min(others) if "unbounded" in scores and others else 0.0
    wts = np.exp(-0.5 * (crit - best))
    p_unb = float(wts[list(conditions).index("unbounded")] / wts.sum()) if "unbounded" in conditions else 0.0
    return _report(TestId.BOUNDARY_CONDITION_SELECT, stat, NullDistribution.MODEL_SCORE, p_unb, alpha,
                   selected=chosen, criterion=criterion, Lx=Lx, Ly=Ly, n_obs=int(n),
                   specifications=scores)


# ---------------------------------------------------------------- bundle

def run_inference(dataset: PanelDataset, result: EstimationResult, bootstrap_reps: int = 0, seed: int = 0,
                  alpha: float = 0.05, threads: int = 1, d0: float | None = None,
                  boundary_selection: bool = False) -> dict[str, Any]:
    """Run every applicable test on one estimation result.

    Returns
    -------
    dict
        ``delta_method`` standard errors, a list of ``tests`` as dicts, and
        ``bootstrap`` when ``bootstrap_reps > 0``. Tests that cannot be run
        appear with ``skipped`` set and the reason.
    """
    out: dict[str, Any] = {}
    reports: list[TestReport] = []
    boot = None
    if bootstrap_reps > 0:
        boot = panel_bootstrap(dataset, bootstrap_reps, seed, result.config, threads=threads, empirical=True)
        out["bootstrap"] = boot.to_dict()
    if not result.ok:
        out["tests"] = []
        out["note"] = "decay assumption violated; boundary tests not applicable"
        return out
    dm = delta_method_boundaries(result)
    out["delta_method"] = dm.to_dict()
    reports.append(test_boundary_exists(result.kappa_s, result.kappa_s_se, alpha))
    reports.append(test_boundary_exists(result.delta, result.delta_se, alpha, dimension="temporal"))

    def guarded(tid, null, fn):
        try:
            reports.append(fn())
        except (NumericalError, ValidationError) as exc:
            reports.append(_skipped(tid, null, alpha, str(exc)))

    guarded(TestId.UNIFIED_DYNAMICS, NullDistribution.MODEL_SCORE, lambda: test_unified_dynamics(dataset, result, alpha))
    if d0 is not None:
        reports.append(test_boundary_location(result.d_star, dm.d_star_se, d0, alpha))
    reports.append(test_ratio_consistency(result, alpha=alpha))
    if boot is not None:
        guarded(TestId.RATIO_CONSISTENCY, NullDistribution.CHI2_1,
                lambda: test_ratio_consistency(result, mode="empirical", dataset=dataset, bootstrap=boot, alpha=alpha))
    guarded(TestId.QUADRATIC_SPEC, NullDistribution.CHI2_1, lambda: spec_test_quadratic(result.spatial, alpha))
    guarded(TestId.SUPERPOSITION_SPEC, NullDistribution.CHI2_1,
            lambda: spec_test_superposition(dataset, result, alpha))
    if boundary_selection:
        guarded(TestId.BOUNDARY_CONDITION_SELECT, NullDistribution.MODEL_SCORE,
                lambda: select_boundary_condition(dataset, result, alpha=alpha))
    out["tests"] = [r.to_dict() for r in reports]
    return out

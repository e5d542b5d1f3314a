"""Three-stage estimation of decay parameters and treatment-effect boundaries.

Stage 1 fits the two-way fixed effects difference-in-differences regression.
Stage 2 estimates the spatial decay rate ``kappa_s`` from untreated
observations and their distance to the nearest active treated unit. Stage 3
estimates the temporal depreciation ``delta`` from treated observations and
time since adoption. Structural parameters and boundaries follow in closed
form:

    lam = sqrt(delta) / kappa_s,   kappa = ATT / beta,
    d* = ln(1/eps_s) / kappa_s,    tau* = ln(1/eps_t) / delta.

Two estimators are available for each decay stage. The ``loglinear``
variants regress ``ln|Y~|`` on distance or time. The defaults fit the level
of the residualized outcome instead: a decaying exponential with a common
offset in distance (``decay_curve``) and the geometric accumulation path
``A (1 - (1 - delta)^(tau + 1))`` of a permanent source (``accumulation``).
Both are fitted by profiling out the linear coefficients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .covariance import clustered_se
from .errors import (
    DecayAssumptionViolated,
    InsufficientDataError,
    NumericalError,
    SingularDesignError,
    StageError,
    ValidationError,
)
from .panel import Exposure, PanelDataset

__all__ = [
    "StageConfig",
    "Stage1Result",
    "DecayFit",
    "EstimationResult",
    "stage1_twfe",
    "fit_two_way_effects",
    "residualize",
    "stage2_spatial",
    "stage3_temporal",
    "recover_parameters",
    "compute_boundaries",
    "select_cutoffs",
    "bias_correct_kappa_s",
    "run_pipeline",
    "estimate_separate",
    "boundary_constant",
]

MIN_STAGE_OBS = 10


def boundary_constant(thresholds: tuple[float, float] = (0.1, 0.5)) -> float:
    """``ln(1/eps_s) / ln(1/eps_t)``; equals ``ln 10 / ln 2 = 3.3219...`` by default."""
    eps_s, eps_t = thresholds
    return math.log(1.0 / eps_s) / math.log(1.0 / eps_t)


@dataclass(frozen=True)
class StageConfig:
    """Estimation settings.

    Parameters
    ----------
    d_min : float, optional
        Spatial near-field cutoff in km; Stage 2 keeps ``d > d_min``. ``None``
        uses the 10th percentile of positive finite distances among untreated
        observations.
    tau_min : int
        Stage 3 keeps ``tau > tau_min``.
    thresholds : (float, float)
        Detection fractions ``(eps_s, eps_t)``.
    cutoff_selection : {"fixed", "cv"}
        ``"cv"`` picks ``(d_min, tau_min)`` by unit-level cross-validation.
    cv_folds : int
    cv_grid : sequence of (float, int), optional
        Candidate cutoff pairs for cross-validation.
    spatial_method : {"decay_curve", "loglinear"}
    temporal_method : {"accumulation", "loglinear"}
    residualization : {"untreated", "twfe"}
        ``"twfe"`` uses the Stage 1 effects. ``"untreated"`` keeps the
        treatment field out of the effects: the spatial stage uses effects
        fitted on far-field untreated cells, and the accumulation fit
        estimates the effects jointly with the path from untreated cells plus
        the treated sample.
    far_field_quantile : float
        Percentile of finite untreated distances above which untreated cells
        count as far field.
    beta : float
        Known production coefficient.
    log_floor : float
        ``|Y~|`` below this is dropped from log regressions.
    """

    d_min: float | None = None
    tau_min: int = 1
    thresholds: tuple[float, float] = (0.1, 0.5)
    cutoff_selection: str = "fixed"
    cv_folds: int = 5
    cv_grid: tuple[tuple[float, int], ...] | None = None
    spatial_method: str = "decay_curve"
    temporal_method: str = "accumulation"
    residualization: str = "untreated"
    far_field_quantile: float = 75.0
    beta: float = 1.0
    log_floor: float = 1e-12

    def __post_init__(self):
        if self.d_min is not None and not self.d_min >= 0:
            raise ValidationError("d_min must be >= 0")
        if self.tau_min < 0:
            raise ValidationError("tau_min must be >= 0")
        eps_s, eps_t = self.thresholds
        if not (0 < eps_s < 1 and 0 < eps_t < 1):
            raise ValidationError("threshold fractions must lie in (0, 1)")
        if self.cutoff_selection not in ("fixed", "cv"):
            raise ValidationError("cutoff_selection must be 'fixed' or 'cv'")
        if self.cv_folds < 2:
            raise ValidationError("cv_folds must be >= 2")
        if self.spatial_method not in ("decay_curve", "loglinear"):
            raise ValidationError("spatial_method must be 'decay_curve' or 'loglinear'")
        if self.temporal_method not in ("accumulation", "loglinear"):
            raise ValidationError("temporal_method must be 'accumulation' or 'loglinear'")
        if self.residualization not in ("untreated", "twfe"):
            raise ValidationError("residualization must be 'untreated' or 'twfe'")
        if not 0 <= self.far_field_quantile < 100:
            raise ValidationError("far_field_quantile must lie in [0, 100)")
        if not self.beta > 0:
            raise ValidationError("beta must be positive")
        if self.cv_grid is not None:
            object.__setattr__(self, "cv_grid", tuple((float(a), int(b)) for a, b in self.cv_grid))


# ---------------------------------------------------------------- stage 1

@dataclass(frozen=True)
class Stage1Result:
    """Two-way fixed effects fit ``Y = alpha_i + gamma_t + ATT * D + e``.

    Attributes
    ----------
    att, att_se : float
        Coefficient on ``D`` and its unit-clustered standard error.
    unit_effects, time_effects : ndarray
        ``alpha_i`` and ``gamma_t`` with ``sum(gamma) = 0``.
    residualized : ndarray, shape (N, T)
        ``Y - alpha_i - gamma_t``.
    resid : ndarray, shape (N, T)
        Regression residuals.
    r2_within : float
    """

    att: float
    att_se: float
    unit_effects: np.ndarray
    time_effects: np.ndarray
    residualized: np.ndarray
    resid: np.ndarray
    r2_within: float


def stage1_twfe(dataset: PanelDataset) -> Stage1Result:
    """Two-way fixed effects difference-in-differences.

    The panel is balanced, so the two-way within transformation is exact:
    ``x - mean_i - mean_t + mean``.

    Raises
    ------
    SingularDesignError
        No treated cells, or no variation in treatment after the transform.
    """
    Y = dataset.outcome
    D = dataset.exposure.treated.astype(float)
    if not D.any() or D.all():
        raise SingularDesignError("treatment indicator has no variation")

    def within(a):
        return a - a.mean(axis=1, keepdims=True) - a.mean(axis=0, keepdims=True) + a.mean()

    Dw = within(D)
    Yw = within(Y)
    sxx = float(np.sum(Dw * Dw))
    if sxx <= 1e-12 * D.size:
        raise SingularDesignError("treatment indicator is collinear with the fixed effects")
    att = float(np.sum(Dw * Yw) / sxx)
    resid = Yw - att * Dw
    gamma = (Y.mean(axis=0) - att * D.mean(axis=0)) - (Y.mean() - att * D.mean())
    alpha = Y.mean(axis=1) - att * D.mean(axis=1)
    n, T = Y.shape
    if n >= 2:
        scores = np.sum(Dw * resid, axis=1)
        var = (n / (n - 1.0)) * float(np.sum(scores**2)) / sxx**2
        att_se = math.sqrt(var)
    else:
        att_se = math.nan
    tss = float(np.sum(Yw**2))
    r2 = 1.0 - float(np.sum(resid**2)) / tss if tss > 0 else 1.0
    return Stage1Result(att, att_se, alpha, gamma, Y - alpha[:, None] - gamma[None, :], resid, r2)


def fit_two_way_effects(Y: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares unit and period effects using only cells in ``mask``.

    Parameters
    ----------
    Y : ndarray, shape (N, T)
    mask : ndarray of bool, shape (N, T)

    Returns
    -------
    alpha, gamma : ndarray
        Effects normalised so the identified period effects have mean zero.
        Units or periods without any masked cell get ``nan``.
    """
    Y = np.asarray(Y, dtype=float)
    M = np.asarray(mask, dtype=bool)
    n, T = Y.shape
    ni = M.sum(axis=1)
    mt = M.sum(axis=0)
    A = np.zeros((n + T, n + T))
    A[np.arange(n), np.arange(n)] = ni
    A[n + np.arange(T), n + np.arange(T)] = mt
    A[:n, n:] = M
    A[n:, :n] = M.T
    Ym = np.where(M, Y, 0.0)
    b = np.concatenate([Ym.sum(axis=1), Ym.sum(axis=0)])
    sol = np.linalg.lstsq(A, b, rcond=None)[0]
    alpha = sol[:n].copy()
    gamma = sol[n:].copy()
    ok_t = mt > 0
    if ok_t.any():
        shift = gamma[ok_t].mean()
        gamma -= shift
        alpha += shift
    alpha[ni == 0] = np.nan
    gamma[~ok_t] = np.nan
    return alpha, gamma


def residualize(dataset: PanelDataset, config: StageConfig,
                stage1: Stage1Result | None = None) -> tuple[np.ndarray, np.ndarray, dict[str, Any]]:
    """Residualized outcomes for the spatial and temporal stages.

    Returns
    -------
    y_spatial, y_temporal : ndarray, shape (N, T)
        May contain ``nan`` where an effect is not identified.
    info : dict
        Sizes of the cell sets used to fit the effects.
    """
    if config.residualization == "twfe":
        s1 = stage1 if stage1 is not None else stage1_twfe(dataset)
        return s1.residualized, s1.residualized, {"residualization": "twfe"}
    ex = dataset.exposure
    Y = dataset.outcome
    untreated = ~ex.treated
    finite = np.isfinite(ex.dist)
    a, g = fit_two_way_effects(Y, untreated)
    y_temporal = Y - a[:, None] - g[None, :]
    pool = ex.dist[untreated & finite]
    if pool.size and config.far_field_quantile > 0:
        cut = float(np.percentile(pool, config.far_field_quantile))
        far = untreated & (~finite | (ex.dist > cut))
    else:
        cut = 0.0
        far = untreated
    a2, g2 = fit_two_way_effects(Y, far)
    y_spatial = Y - a2[:, None] - g2[None, :]
    info = {"residualization": "untreated", "untreated_cells": int(untreated.sum()),
            "far_field_cells": int(far.sum()), "far_field_cutoff_km": cut}
    return y_spatial, y_temporal, info


# ---------------------------------------------------------------- decay fits

@dataclass(frozen=True)
class DecayFit:
    """Result of a Stage 2 or Stage 3 fit.

    Attributes
    ----------
    rate : float
        ``kappa_s`` (Stage 2) or ``delta`` (Stage 3).
    se : float
        Unit-clustered standard error of ``rate``.
    method : str
    coef : ndarray
        All fitted coefficients; the rate-related one is last.
    cov : ndarray
        Clustered covariance of ``coef``.
    n_obs : int
    n_dropped : int
        Observations removed by the ``|Y~|`` floor (log methods).
    r2 : float
    resid_var : float
    x : ndarray
        Regressor (distance or time since adoption) of the sample.
    y : ndarray
        Regressand of the sample.
    resid : ndarray
    clusters : ndarray
        Unit row index per observation.
    jac : ndarray
        Jacobian (or design matrix) at the estimate.
    """

    rate: float
    se: float
    method: str
    coef: np.ndarray
    cov: np.ndarray
    n_obs: int
    n_dropped: int
    r2: float
    resid_var: float
    x: np.ndarray
    y: np.ndarray
    resid: np.ndarray
    clusters: np.ndarray
    jac: np.ndarray

    def diagnostics(self) -> dict[str, Any]:
        return {"method": self.method, "n_obs": self.n_obs, "n_dropped": self.n_dropped,
                "r2": self.r2, "resid_var": self.resid_var}


def _r2(y, resid):
    tss = float(np.sum((y - y.mean()) ** 2))
    return 1.0 - float(np.sum(resid**2)) / tss if tss > 0 else 1.0


def _ols_log(x, y, clusters, floor, what):
    keep = np.abs(y) > floor
    dropped = int((~keep).sum())
    x, y, cl = x[keep], y[keep], clusters[keep]
    if x.size < MIN_STAGE_OBS:
        raise InsufficientDataError(f"{what}: too few observations after the |Y~| floor", int(x.size))
    if np.ptp(x) == 0:
        raise SingularDesignError(f"{what}: regressor has no variation")
    ly = np.log(np.abs(y))
    X = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(X, ly, rcond=None)
    resid = ly - X @ coef
    var = clustered_se(X, resid, cl)
    return coef, var.cov, resid, ly, X, dropped


def _profile_min(ssr, lo, hi, n_grid=48, log=True):
    """Global grid search on [lo, hi] refined by bounded Brent."""
    grid = np.geomspace(lo, hi, n_grid) if log else np.linspace(lo, hi, n_grid)
    vals = np.array([ssr(g) for g in grid])
    k = int(np.nanargmin(vals))
    a = grid[max(k - 1, 0)]
    b = grid[min(k + 1, n_grid - 1)]
    if log:
        res = minimize_scalar(lambda s: ssr(math.exp(s)), bounds=(math.log(a), math.log(b)),
                              method="bounded", options={"xatol": 1e-12})
        best = math.exp(res.x)
    else:
        res = minimize_scalar(ssr, bounds=(a, b), method="bounded", options={"xatol": 1e-13})
        best = float(res.x)
    if ssr(best) > vals[k]:
        best = float(grid[k])
    return best


def _fit_decay_curve(d, y, clusters):
    # y = c + B exp(-k d); k profiled, (c, B) by least squares
    dpos = d[d > 0]
    k_lo = math.log(10.0) / (10.0 * float(d.max()))
    k_hi = math.log(10.0) / float(np.percentile(dpos, 1)) if dpos.size else 10.0 * k_lo
    if not k_hi > k_lo:
        raise SingularDesignError("stage2_spatial: distance range is degenerate")
    ones = np.ones_like(d)

    def linfit(k):
        X = np.column_stack([ones, np.exp(-k * d)])
        coef, *_ = np.linalg.lstsq(X, y, rcond=None)
        return coef, X

    def ssr(k):
        coef, X = linfit(k)
        r = y - X @ coef
        return float(r @ r)

    k = _profile_min(ssr, k_lo, k_hi)
    (c, B), X = linfit(k)
    e = np.exp(-k * d)
    resid = y - c - B * e
    J = np.column_stack([ones, e, -B * d * e])
    var = clustered_se(J, resid, clusters)
    return np.array([c, B, k]), var.cov, resid, J


class _MaskedTwoWay:
    """Projection that removes least-squares two-way effects fitted on a cell mask."""

    def __init__(self, mask: np.ndarray):
        self.mask = np.asarray(mask, dtype=bool)
        n, T = self.mask.shape
        M = self.mask.astype(float)
        A = np.zeros((n + T, n + T))
        A[np.arange(n), np.arange(n)] = M.sum(axis=1)
        A[n + np.arange(T), n + np.arange(T)] = M.sum(axis=0)
        A[:n, n:] = M
        A[n:, :n] = M.T
        self._pinv = np.linalg.pinv(A)
        self._n = n

    def resid(self, V: np.ndarray) -> np.ndarray:
        """Residual of ``V`` on the masked cells after removing two-way effects."""
        Vm = np.where(self.mask, V, 0.0)
        s = self._pinv @ np.concatenate([Vm.sum(axis=1), Vm.sum(axis=0)])
        return (V - s[:self._n, None] - s[None, self._n:])[self.mask]


def _fit_accumulation(tau, y, clusters, project=None):
    # y = A (1 - r^(tau + 1)); r profiled, A by least squares; delta = 1 - r.
    # With ``project`` the regressors are residualized on two-way effects first,
    # which fits the effects jointly with the path (Frisch-Waugh-Lovell).
    p = tau + 1.0
    proj = project if project is not None else (lambda v: v)

    def amp(r):
        x = proj(1.0 - r**p)
        xx = float(x @ x)
        return (float(x @ y) / xx if xx > 1e-12 * x.size else math.nan), x

    def ssr(r):
        A, x = amp(r)
        if not math.isfinite(A):
            return math.inf
        res = y - A * x
        return float(res @ res)

    r = _profile_min(ssr, 0.02, 1.5, n_grid=75, log=False)
    A, x = amp(r)
    if not math.isfinite(A):
        raise SingularDesignError("stage3_temporal: accumulation path is degenerate")
    resid = y - A * x
    J = np.column_stack([x, proj(-A * p * r ** (p - 1.0))])
    var = clustered_se(J, resid, clusters)
    # report delta = 1 - r: flip the sign of the r row/column
    T = np.diag([1.0, -1.0])
    return np.array([A, 1.0 - r]), T @ var.cov @ T, resid, J


def _cluster_ids(shape):
    return np.broadcast_to(np.arange(shape[0])[:, None], shape)


def stage2_spatial(y_res: np.ndarray, exposure: Exposure, config: StageConfig,
                   d_min: float | None = None) -> DecayFit:
    """Spatial decay rate from untreated observations.

    Parameters
    ----------
    y_res : ndarray, shape (N, T)
        Residualized outcomes.
    exposure : Exposure
    config : StageConfig
    d_min : float, optional
        Overrides ``config.d_min``.

    Returns
    -------
    DecayFit
        ``rate`` is ``kappa_s`` per km. For ``loglinear`` it is minus the OLS
        slope of ``ln|Y~|`` on distance; for ``decay_curve`` it is the rate of
        ``c + B exp(-kappa_s d)``.
    """
    cut = default_d_min(exposure) if d_min is None and config.d_min is None else (
        config.d_min if d_min is None else d_min)
    m = (~exposure.treated) & np.isfinite(exposure.dist) & (exposure.dist > cut) & np.isfinite(y_res)
    d = exposure.dist[m]
    y = y_res[m]
    cl = _cluster_ids(y_res.shape)[m]
    if d.size < MIN_STAGE_OBS:
        raise InsufficientDataError("stage2_spatial: filtered sample too small", int(d.size))
    if config.spatial_method == "loglinear":
        coef, cov, resid, ly, X, dropped = _ols_log(d, y, cl, config.log_floor, "stage2_spatial")
        keep = np.abs(y) > config.log_floor
        return DecayFit(-coef[1], math.sqrt(max(cov[1, 1], 0.0)), "loglinear", np.array([coef[0], -coef[1]]),
                        np.diag([1.0, -1.0]) @ cov @ np.diag([1.0, -1.0]), int(ly.size), dropped,
                        _r2(ly, resid), float(resid.var()), d[keep], ly, resid, cl[keep], X)
    coef, cov, resid, J = _fit_decay_curve(d, y, cl)
    return DecayFit(float(coef[2]), math.sqrt(max(cov[2, 2], 0.0)), "decay_curve", coef, cov, int(d.size), 0,
                    _r2(y, resid), float(resid.var()), d, y, resid, cl, J)


def stage3_temporal(y: np.ndarray, exposure: Exposure, config: StageConfig,
                    tau_min: int | None = None, absorb_effects: bool = False) -> DecayFit:
    """Temporal depreciation from treated observations.

    Parameters
    ----------
    y : ndarray, shape (N, T)
        Residualized outcomes, or raw outcomes when ``absorb_effects``.
    exposure : Exposure
    config : StageConfig
    tau_min : int, optional
        Overrides ``config.tau_min``.
    absorb_effects : bool
        Fit unit and period effects jointly with the accumulation path, using
        untreated cells together with the treated sample. Only used by the
        ``accumulation`` method.

    Returns
    -------
    DecayFit
        ``rate`` is ``delta`` per period. For ``loglinear`` it is minus the OLS
        slope of ``ln|Y~|`` on ``tau``; for ``accumulation`` it is ``1 - r``
        from ``A (1 - r^(tau + 1))``.
    """
    tmin = config.tau_min if tau_min is None else tau_min
    m = exposure.treated & (exposure.tau > tmin) & np.isfinite(y)
    tau = exposure.tau[m].astype(float)
    cl = _cluster_ids(y.shape)[m]
    if tau.size < MIN_STAGE_OBS:
        raise InsufficientDataError("stage3_temporal: filtered sample too small", int(tau.size))
    if np.ptp(tau) == 0:
        raise SingularDesignError("stage3_temporal: time since adoption has no variation")
    if config.temporal_method == "loglinear":
        yy = y[m]
        coef, cov, resid, ly, X, dropped = _ols_log(tau, yy, cl, config.log_floor, "stage3_temporal")
        keep = np.abs(yy) > config.log_floor
        return DecayFit(-coef[1], math.sqrt(max(cov[1, 1], 0.0)), "loglinear", np.array([coef[0], -coef[1]]),
                        np.diag([1.0, -1.0]) @ cov @ np.diag([1.0, -1.0]), int(ly.size), 0 + dropped,
                        _r2(ly, resid), float(resid.var()), tau[keep], ly, resid, cl[keep], X)
    if absorb_effects:
        sample = ((~exposure.treated) | m) & np.isfinite(y)
        tw = _MaskedTwoWay(sample)

        def project(v):
            # the path lives on treated cells; residualize it over the whole sample
            full = np.zeros(y.shape)
            full[m] = v
            return tw.resid(full)

        yy = tw.resid(y)
        cl_s = _cluster_ids(y.shape)[sample]
        coef, cov, resid, J = _fit_accumulation(tau, yy, cl_s, project=project)
        return DecayFit(float(coef[1]), math.sqrt(max(cov[1, 1], 0.0)), "accumulation_joint", coef, cov,
                        int(tau.size), 0, _r2(yy, resid), float(resid.var()), tau, yy, resid, cl_s, J)
    yy = y[m]
    coef, cov, resid, J = _fit_accumulation(tau, yy, cl)
    return DecayFit(float(coef[1]), math.sqrt(max(cov[1, 1], 0.0)), "accumulation", coef, cov, int(tau.size), 0,
                    _r2(yy, resid), float(resid.var()), tau, yy, resid, cl, J)


def default_d_min(exposure: Exposure) -> float:
    """10th percentile of positive finite distances among untreated cells."""
    d = exposure.dist[(~exposure.treated) & np.isfinite(exposure.dist)]
    d = d[d > 0]
    return float(np.percentile(d, 10)) if d.size else 0.0


# ---------------------------------------------------------------- recovery

def recover_parameters(att: float, kappa_s: float, delta: float, beta: float = 1.0) -> tuple[float, float]:
    """Structural ``(lam, kappa)`` from reduced-form estimates.

    Returns
    -------
    lam : float
        ``sqrt(delta) / kappa_s``.
    kappa : float
        ``att / beta``.

    Raises
    ------
    DecayAssumptionViolated
        If ``kappa_s``, ``delta`` or ``beta`` is not positive.
    """
    if not (kappa_s > 0 and delta > 0 and beta > 0):
        raise DecayAssumptionViolated(
            f"decay assumption violated: kappa_s={kappa_s:.6g}, delta={delta:.6g}, beta={beta:.6g} "
            "(boundaries require positive spatial and temporal decay)")
    return math.sqrt(delta) / kappa_s, att / beta


@dataclass(frozen=True)
class Boundaries:
    d_star: float
    tau_star: float
    ratio: float
    ratio_theory: float


def compute_boundaries(kappa_s: float, delta: float,
                       thresholds: tuple[float, float] = (0.1, 0.5)) -> Boundaries:
    """Spatial and temporal boundaries and the boundary ratio.

    ``d* = ln(1/eps_s) / kappa_s`` and ``tau* = ln(1/eps_t) / delta``. The
    theoretical ratio is ``c * lam * sqrt(delta)`` with
    ``c = ln(1/eps_s) / ln(1/eps_t)`` (3.32 for 10% and 50%), which equals
    ``d* / tau*`` identically.
    """
    if not (kappa_s > 0 and delta > 0):
        raise DecayAssumptionViolated(
            f"decay assumption violated: kappa_s={kappa_s:.6g}, delta={delta:.6g}")
    eps_s, eps_t = thresholds
    d_star = math.log(1.0 / eps_s) / kappa_s
    tau_star = math.log(1.0 / eps_t) / delta
    lam = math.sqrt(delta) / kappa_s
    return Boundaries(d_star, tau_star, d_star / tau_star, boundary_constant(thresholds) * lam * math.sqrt(delta))


def bias_correct_kappa_s(kappa_s: float, residuals: np.ndarray, distances: np.ndarray) -> tuple[float, float]:
    """Finite-sample correction ``kappa_s - (1/2n) sum(u^2) / sum((d - dbar)^2)``.

    Returns
    -------
    corrected : float
    correction : float
        The subtracted amount.
    """
    u = np.asarray(residuals, dtype=float)
    d = np.asarray(distances, dtype=float)
    sxx = float(np.sum((d - d.mean()) ** 2))
    if sxx == 0:
        raise ValidationError("bias correction needs variation in distance")
    corr = float(np.sum(u * u)) / (2.0 * u.size * sxx)
    return kappa_s - corr, corr


# ---------------------------------------------------------------- cutoffs

def _fold_of(n_units: int, k: int) -> np.ndarray:
    return np.arange(n_units) % k


def select_cutoffs(dataset: PanelDataset, grid: Sequence[tuple[float, int]], cv_folds: int = 5,
                   config: StageConfig | None = None) -> StageConfig:
    """Choose ``(d_min, tau_min)`` by unit-level k-fold cross-validation.

    For every candidate and fold the decay stage is fitted on the training
    units and scored by the mean squared prediction error on held-out units,
    evaluated on the common region beyond the largest candidate cutoff so
    that candidates are compared on the same observations. The spatial and
    temporal cutoffs are scored separately. Scores within ``1e-9`` of the
    larger of the best score and the mean squared held-out outcome count as
    ties, which resolve to the smaller cutoff.

    Raises
    ------
    InsufficientDataError
        If every candidate fails; the message lists per-candidate counts.
    """
    cfg = config if config is not None else StageConfig()
    grid = [(float(a), int(b)) for a, b in grid]
    if not grid:
        raise ValidationError("cutoff grid is empty")
    if dataset.n_units < cv_folds:
        raise ValidationError(f"need at least cv_folds={cv_folds} units")
    y_sp, y_tm, _ = residualize(dataset, cfg)
    ex = dataset.exposure
    folds = _fold_of(dataset.n_units, cv_folds)
    d_cands = sorted({a for a, _ in grid})
    t_cands = sorted({b for _, b in grid})
    d_eval = max(d_cands)
    t_eval = max(t_cands)

    def predict_space(fit, d):
        if fit.method == "loglinear":
            return fit.coef[0] - fit.coef[1] * d
        c, B, k = fit.coef
        return c + B * np.exp(-k * d)

    def predict_time(fit, tau):
        if fit.method == "loglinear":
            return fit.coef[0] - fit.coef[1] * tau
        A, delta = fit.coef
        return A * (1.0 - (1.0 - delta) ** (tau + 1.0))

    def score(kind, cand):
        total, scale, count = 0.0, 0.0, 0
        for f in range(cv_folds):
            train = np.broadcast_to((folds != f)[:, None], ex.treated.shape)
            test = ~train
            if kind == "space":
                ytr = np.where(train, y_sp, np.nan)
                fit = stage2_spatial(ytr, ex, cfg, d_min=cand)
                m = test & (~ex.treated) & np.isfinite(ex.dist) & (ex.dist > d_eval) & np.isfinite(y_sp)
                obs = y_sp[m]
                if fit.method == "loglinear":
                    keep = np.abs(obs) > cfg.log_floor
                    obs = np.log(np.abs(obs[keep]))
                    pred = predict_space(fit, ex.dist[m][keep])
                else:
                    pred = predict_space(fit, ex.dist[m])
            else:
                ytr = np.where(train, y_tm, np.nan)
                fit = stage3_temporal(ytr, ex, cfg, tau_min=cand)
                m = test & ex.treated & (ex.tau > t_eval) & np.isfinite(y_tm)
                obs = y_tm[m]
                tau = ex.tau[m].astype(float)
                if fit.method == "loglinear":
                    keep = np.abs(obs) > cfg.log_floor
                    obs = np.log(np.abs(obs[keep]))
                    pred = predict_time(fit, tau[keep])
                else:
                    pred = predict_time(fit, tau)
            total += float(np.sum((obs - pred) ** 2))
            scale += float(np.sum(obs**2))
            count += int(obs.size)
        return (total / count, scale / count) if count else (math.inf, 0.0)

    def choose(kind, cands):
        scores, notes, size = [], [], 0.0
        for c in cands:
            try:
                s, sc = score(kind, c)
                size = max(size, sc)
            except (InsufficientDataError, SingularDesignError, NumericalError) as exc:
                s = math.inf
                notes.append(f"{kind} cutoff {c}: {exc}")
            scores.append(s)
        finite = [s for s in scores if math.isfinite(s)]
        if not finite:
            raise InsufficientDataError("select_cutoffs: every candidate failed; " + "; ".join(notes), 0)
        best = min(finite)
        # exact fits leave rounding-level scores; compare them on the data scale
        tol = 1e-9 * max(abs(best), size) + 1e-300
        for c, s in zip(cands, scores):
            if s <= best + tol:
                return c, scores
        return cands[int(np.argmin(scores))], scores

    d_best, _ = choose("space", d_cands)
    t_best, _ = choose("time", t_cands)
    return replace(cfg, d_min=d_best, tau_min=t_best, cutoff_selection="fixed")


def default_cv_grid(dataset: PanelDataset) -> tuple[tuple[float, int], ...]:
    """Cutoff grid from distance percentiles {0, 5, 10, 20, 30} and tau in {0..3}."""
    ex = dataset.exposure
    d = ex.dist[(~ex.treated) & np.isfinite(ex.dist)]
    d = d[d > 0]
    qs = [0.0] + ([float(np.percentile(d, q)) for q in (5, 10, 20, 30)] if d.size else [])
    return tuple((q, t) for q in qs for t in range(4))


# ---------------------------------------------------------------- pipeline

@dataclass
class EstimationResult:
    """Output of :func:`run_pipeline`.

    Non-serialised attributes ``stage1``, ``spatial`` and ``temporal`` keep
    the stage internals used by the inference routines.
    """

    status: str
    att: float
    att_se: float
    kappa_s: float
    kappa_s_se: float
    delta: float
    delta_se: float
    lam: float
    kappa: float
    kappa_structural: float
    d_star: float
    tau_star: float
    ratio: float
    ratio_theory: float
    thresholds: tuple[float, float]
    d_min: float
    tau_min: int
    kappa_s_bias_correction: float
    message: str
    unit_effects: np.ndarray = field(repr=False)
    time_effects: np.ndarray = field(repr=False)
    stage_diagnostics: dict[str, Any] = field(default_factory=dict)
    stage1: Stage1Result | None = field(default=None, repr=False)
    spatial: DecayFit | None = field(default=None, repr=False)
    temporal: DecayFit | None = field(default=None, repr=False)
    config: StageConfig | None = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_dict(self) -> dict[str, Any]:
        """Ordered, JSON-ready view."""
        return {
            "status": self.status,
            "message": self.message,
            "att": self.att,
            "att_se": self.att_se,
            "kappa_s": self.kappa_s,
            "kappa_s_se": self.kappa_s_se,
            "delta": self.delta,
            "delta_se": self.delta_se,
            "lambda": self.lam,
            "kappa": self.kappa,
            "kappa_structural": self.kappa_structural,
            "d_star": self.d_star,
            "tau_star": self.tau_star,
            "ratio": self.ratio,
            "ratio_theory": self.ratio_theory,
            "thresholds": list(self.thresholds),
            "d_min": self.d_min,
            "tau_min": self.tau_min,
            "kappa_s_bias_correction": self.kappa_s_bias_correction,
            "fixed_effects": {"unit": [float(v) for v in self.unit_effects],
                              "time": [float(v) for v in self.time_effects]},
            "stage_diagnostics": self.stage_diagnostics,
        }


def _stage(label, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except (NumericalError, ValidationError) as exc:
        raise StageError(label, exc) from exc
    except np.linalg.LinAlgError as exc:
        raise StageError(label, SingularDesignError(str(exc))) from exc


def run_pipeline(dataset: PanelDataset, config: StageConfig | None = None) -> EstimationResult:
    """Run Stage 1, residualization, Stage 2, Stage 3, recovery and boundaries.

    Non-positive decay estimates do not raise: the result has
    ``status == "decay_assumption_violated"`` with the affected boundary set to
    ``inf`` and the structural ``lam`` set to ``nan``.

    Raises
    ------
    StageError
        Any stage failure, labelled with the stage name.
    """
    cfg = config if config is not None else StageConfig()
    s1 = _stage("stage1_twfe", stage1_twfe, dataset)
    if cfg.cutoff_selection == "cv":
        grid = cfg.cv_grid if cfg.cv_grid is not None else default_cv_grid(dataset)
        cfg = _stage("select_cutoffs", select_cutoffs, dataset, grid, cfg.cv_folds, cfg)
    y_sp, y_tm, rinfo = _stage("residualize", residualize, dataset, cfg, s1)
    d_min = default_d_min(dataset.exposure) if cfg.d_min is None else cfg.d_min
    sp = _stage("stage2_spatial", stage2_spatial, y_sp, dataset.exposure, cfg, d_min)
    if cfg.residualization == "untreated" and cfg.temporal_method == "accumulation":
        tm = _stage("stage3_temporal", stage3_temporal, dataset.outcome, dataset.exposure, cfg,
                    absorb_effects=True)
    else:
        tm = _stage("stage3_temporal", stage3_temporal, y_tm, dataset.exposure, cfg)
    kappa_s, delta = sp.rate, tm.rate
    beta = cfg.beta
    kappa_struct = float(tm.coef[0] * delta / beta) if tm.method.startswith("accumulation") else math.nan
    try:
        corr = bias_correct_kappa_s(kappa_s, sp.resid, sp.x)[1]
    except ValidationError:
        corr = math.nan
    diag = {
        "stage1": {"n_obs": int(dataset.outcome.size), "r2_within": s1.r2_within,
                   "resid_var": float(np.var(s1.resid))},
        "residualization": rinfo,
        "stage2": sp.diagnostics(),
        "stage3": tm.diagnostics(),
    }
    common = dict(att=s1.att, att_se=s1.att_se, kappa_s=kappa_s, kappa_s_se=sp.se, delta=delta, delta_se=tm.se,
                  kappa=s1.att / beta, kappa_structural=kappa_struct, thresholds=tuple(cfg.thresholds),
                  d_min=float(d_min), tau_min=int(cfg.tau_min), kappa_s_bias_correction=corr,
                  unit_effects=s1.unit_effects, time_effects=s1.time_effects, stage_diagnostics=diag,
                  stage1=s1, spatial=sp, temporal=tm, config=cfg)
    try:
        lam, _ = recover_parameters(s1.att, kappa_s, delta, beta)
        b = compute_boundaries(kappa_s, delta, cfg.thresholds)
    except DecayAssumptionViolated as exc:
        eps_s, eps_t = cfg.thresholds
        d_star = math.log(1.0 / eps_s) / kappa_s if kappa_s > 0 else math.inf
        tau_star = math.log(1.0 / eps_t) / delta if delta > 0 else math.inf
        return EstimationResult(status="decay_assumption_violated", lam=math.nan, d_star=d_star,
                                tau_star=tau_star, ratio=math.nan, ratio_theory=math.nan,
                                message=str(exc), **common)
    diag["ratio_identity_gap"] = abs(b.ratio - b.ratio_theory) / b.ratio
    return EstimationResult(status="ok", lam=lam, d_star=b.d_star, tau_star=b.tau_star, ratio=b.ratio,
                            ratio_theory=b.ratio_theory, message="", **common)


def estimate_separate(dataset: PanelDataset, config: StageConfig | None = None) -> tuple[float, float]:
    """Boundaries from Stages 2 and 3 on raw outcomes, without residualization.

    Returns
    -------
    d_star, tau_star : float
        ``inf`` where the corresponding rate is not positive.
    """
    cfg = config if config is not None else StageConfig()
    Y = dataset.outcome
    d_min = default_d_min(dataset.exposure) if cfg.d_min is None else cfg.d_min
    sp = stage2_spatial(Y, dataset.exposure, cfg, d_min)
    tm = stage3_temporal(Y, dataset.exposure, cfg)
    eps_s, eps_t = cfg.thresholds
    d_star = math.log(1.0 / eps_s) / sp.rate if sp.rate > 0 else math.inf
    tau_star = math.log(1.0 / eps_t) / tm.rate if tm.rate > 0 else math.inf
    return d_star, tau_star

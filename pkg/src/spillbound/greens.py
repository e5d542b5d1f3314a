"""Steady-state knowledge fields of point sources.

The steady state of the diffusion equation with depreciation solves

    lam**2 * laplacian(K) - delta * K + kappa * point_source = 0,

whose free-space solution is ``kappa / (2 pi lam**2) * K0(sqrt(delta) / lam * d)``.
On a rectangle ``[0, Lx] x [0, Ly]`` the solution is an eigenfunction series
with sine modes (absorbing edges) or cosine modes (reflecting edges).

Rectangle series are summed one axis at a time: the sum over modes along the
second axis has a closed form (the one-dimensional Green's function of
``-d2/dy2 + k**2``), so the remaining single series decays geometrically in the
mode index at a rate set by the separation between point and source. The
plain double series is kept as a reference implementation.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import SingularityError, ValidationError
from .params import DiffusionParams

__all__ = [
    "BoundaryCondition",
    "GreensSpec",
    "ModeIndex",
    "bessel_k0",
    "greens_unbounded",
    "greens_dirichlet_rect",
    "greens_neumann_rect",
    "greens_rect_double_series",
    "greens_value",
    "greens_matrix",
    "superpose",
    "pde_residual",
]

EULER_GAMMA = 0.57721566490153286061


class BoundaryCondition(str, Enum):
    """Boundary condition of the spatial domain."""

    UNBOUNDED = "unbounded"
    DIRICHLET_RECT = "dirichlet"
    NEUMANN_RECT = "neumann"


@dataclass(frozen=True)
class GreensSpec:
    """Domain geometry and boundary condition.

    Parameters
    ----------
    condition : BoundaryCondition
        Which Green's function applies.
    Lx, Ly : float, optional
        Side lengths in km. Required for rectangular domains.
    series_max_terms : int
        Upper bound on the number of modes summed.
    series_tol : float
        Relative tolerance for the tail estimate of the mode series.
    """

    condition: BoundaryCondition = BoundaryCondition.UNBOUNDED
    Lx: float | None = None
    Ly: float | None = None
    series_max_terms: int = 20000
    series_tol: float = 1e-12

    def __post_init__(self):
        object.__setattr__(self, "condition", BoundaryCondition(self.condition))
        if self.series_max_terms < 1:
            raise ValidationError("series_max_terms must be >= 1")
        if not self.series_tol > 0:
            raise ValidationError("series_tol must be positive")
        if self.bounded:
            for name in ("Lx", "Ly"):
                v = getattr(self, name)
                if v is None or not math.isfinite(v) or v <= 0:
                    raise ValidationError(f"{name} must be a positive length for {self.condition.value}")

    @property
    def bounded(self) -> bool:
        return self.condition is not BoundaryCondition.UNBOUNDED

    def contains(self, x, y) -> np.ndarray:
        """Closed-domain membership test (always true when unbounded)."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if not self.bounded:
            return np.isfinite(x) & np.isfinite(y)
        return (x >= 0) & (x <= self.Lx) & (y >= 0) & (y <= self.Ly)


@dataclass(frozen=True)
class ModeIndex:
    """Index pair of a rectangular eigenmode (sine modes start at 1)."""

    n: int
    m: int

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ValidationError("mode indices must be >= 1")

    def eigenvalue(self, Lx: float, Ly: float) -> float:
        """Laplacian eigenvalue ``pi**2 (n**2/Lx**2 + m**2/Ly**2)``."""
        return math.pi**2 * (self.n**2 / Lx**2 + self.m**2 / Ly**2)


# ---------------------------------------------------------------- K0

def _k0_series(z: np.ndarray) -> np.ndarray:
    # K0(z) = -(ln(z/2) + gamma) I0(z) + sum_k (z^2/4)^k / (k!)^2 * H_k
    q = 0.25 * z * z
    term = np.ones_like(z)
    i0 = np.ones_like(z)
    acc = np.zeros_like(z)
    harmonic = 0.0
    for k in range(1, 40):
        term = term * q / (k * k)
        harmonic += 1.0 / k
        i0 = i0 + term
        acc = acc + term * harmonic
        if np.all(term * harmonic <= 1e-17 * acc):
            break
    return -(np.log(0.5 * z) + EULER_GAMMA) * i0 + acc


def _k0_steed(z: np.ndarray) -> np.ndarray:
    # Steed's continued fraction for K_nu at nu = 0, valid for z >= 2
    b = 2.0 * (1.0 + z)
    d = 1.0 / b
    delh = d.copy()
    q1 = np.zeros_like(z)
    q2 = np.ones_like(z)
    a1 = 0.25
    q = np.full_like(z, a1)
    c = np.full_like(z, a1)
    a = -a1
    s = 1.0 + q * delh
    done = np.zeros(z.shape, dtype=bool)
    for i in range(2, 2000):
        a -= 2 * (i - 1)
        c = -a * c / i
        qnew = (q1 - b * q2) / a
        q1 = q2
        q2 = qnew
        q = q + c * qnew
        b = b + 2.0
        d = 1.0 / (b + a * d)
        delh = (b * d - 1.0) * delh
        dels = q * delh
        s = np.where(done, s, s + dels)
        done |= np.abs(dels) < 1e-17 * np.abs(s)
        if done.all():
            break
    return np.sqrt(np.pi / (2.0 * z)) * np.exp(-z) / s


def bessel_k0(z):
    """Modified Bessel function of the second kind, order zero.

    Parameters
    ----------
    z : float or array_like
        Positive argument.

    Returns
    -------
    float or ndarray
        ``K0(z)`` with relative error below 1e-13 on ``(0, 700]``.

    Raises
    ------
    ValidationError
        If any argument is not strictly positive (K0 diverges at 0).

    Notes
    -----
    Power series with the Euler-Mascheroni term for ``z <= 2``; Steed's
    continued fraction above.
    """
    arr = np.asarray(z, dtype=float)
    if np.any(~(arr > 0)):
        raise ValidationError("bessel_k0 requires z > 0")
    flat = arr.ravel()
    out = np.empty_like(flat)
    small = flat <= 2.0
    if small.any():
        out[small] = _k0_series(flat[small])
    if (~small).any():
        out[~small] = _k0_steed(flat[~small])
    out = out.reshape(arr.shape)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------- free space

def _decay(params: DiffusionParams) -> float:
    if params.delta <= 0:
        raise ValidationError("steady-state fields require delta > 0")
    return math.sqrt(params.delta) / params.lam


def greens_unbounded(d, params: DiffusionParams):
    """Free-space steady-state field at distance ``d`` from a unit source.

    Parameters
    ----------
    d : float or array_like
        Distance(s) in km, strictly positive.
    params : DiffusionParams
        Structural parameters.

    Returns
    -------
    float or ndarray
        ``kappa / (2 pi lam**2) * K0(sqrt(delta) / lam * d)``.

    Raises
    ------
    SingularityError
        If any distance is zero.
    """
    d_arr = np.asarray(d, dtype=float)
    if np.any(d_arr == 0):
        raise SingularityError("free-space Green's function diverges at the source (d = 0)")
    if np.any(~(d_arr > 0)):
        raise ValidationError("distance must be positive and finite")
    scale = params.kappa / (2.0 * math.pi * params.lam**2)
    return scale * bessel_k0(_decay(params) * d_arr)


# ---------------------------------------------------------------- rectangles

def _line_sum(u, v, u0, v0, Lu, Lv, s2, neumann, tol, max_terms, block=64):
    """Sum over modes along ``u`` with the ``v`` direction in closed form.

    Returns the series for ``(-laplacian + s2)^{-1}`` applied to a unit point
    source. All array arguments are 1-d with one shape. Modes are processed
    in blocks; a point stops once the geometric tail bound after the block
    falls below ``tol`` times its partial sum.
    """
    sep = np.abs(v - v0)
    lo = np.minimum(v, v0)
    hi = np.maximum(v, v0)
    total = np.zeros_like(u)
    active = np.arange(u.size)
    start = 0 if neumann else 1
    stop_at = start + max_terms
    n0 = start
    while active.size and n0 < stop_at:
        n = np.arange(n0, min(n0 + block, stop_at), dtype=float)
        k = np.sqrt(s2 + (n * math.pi / Lu) ** 2)
        sp = sep[active][:, None]
        a = k * lo[active][:, None]
        b = k * (Lv - hi[active][:, None])
        c = k * Lv
        denom = 2.0 * (1.0 - np.exp(-2.0 * c)) * k
        e1 = np.exp(-k * sp)
        e2 = np.exp(a - b - c)
        e3 = np.exp(b - a - c)
        e4 = np.exp(-a - b - c)
        arg_u = np.outer(u[active], n) * (math.pi / Lu)
        arg_u0 = np.outer(u0[active], n) * (math.pi / Lu)
        if neumann:
            g = (e1 + e2 + e3 + e4) / denom
            norm = np.where(n == 0, 1.0 / Lu, 2.0 / Lu)
            modes = np.cos(arg_u) * np.cos(arg_u0)
        else:
            g = (e1 - e2 - e3 + e4) / denom
            norm = np.full(n.shape, 2.0 / Lu)
            modes = np.sin(arg_u) * np.sin(arg_u0)
        total[active] += (norm * modes * g).sum(axis=1)
        # envelope of the next term times a geometric tail factor; increments
        # k_{n+1} - k_n grow with n, so the current ratio bounds all later ones
        n_last = n[-1]
        k_last = k[-1]
        k_next = math.sqrt(s2 + ((n_last + 1) * math.pi / Lu) ** 2)
        env = (2.0 / Lu) * 2.0 * np.exp(-k_next * sep[active]) / (k_next * (1.0 - math.exp(-2.0 * k_next * Lv)))
        r = np.exp(-(k_next - k_last) * sep[active])
        tail = np.where(r < 1.0, env / np.maximum(1.0 - r, 1e-300), np.inf)
        done = tail < tol * np.abs(total[active])
        active = active[~done]
        n0 += block
    if active.size:
        warnings.warn(
            f"mode series hit series_max_terms={max_terms} before reaching tolerance "
            f"at {int(active.size)} point(s)",
            RuntimeWarning,
            stacklevel=3,
        )
    return total


def _rect_field(x, y, x0, y0, spec: GreensSpec, params: DiffusionParams, neumann: bool):
    if not spec.bounded:
        raise ValidationError("rectangular Green's function requires a bounded GreensSpec")
    x, y, x0, y0 = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (x, y, x0, y0)))
    shape = x.shape
    x, y, x0, y0 = (a.ravel() for a in (x, y, x0, y0))
    Lx, Ly = float(spec.Lx), float(spec.Ly)
    if np.any(~spec.contains(x, y)):
        raise ValidationError("evaluation point lies outside the domain")
    src_inside = (x0 > 0) & (x0 < Lx) & (y0 > 0) & (y0 < Ly)
    if np.any(~src_inside):
        raise ValidationError("source must lie strictly inside the domain")
    if np.any((x == x0) & (y == y0)):
        raise SingularityError("rectangular Green's function diverges at the source")
    s2 = params.delta / params.lam**2
    out = np.zeros(x.shape)
    on_edge = (x == 0) | (x == Lx) | (y == 0) | (y == Ly)
    work = ~on_edge if not neumann else np.ones(x.shape, dtype=bool)
    # sum along the axis whose separation gives the faster geometric decay
    along_x = np.abs(y - y0) / Lx >= np.abs(x - x0) / Ly
    for use_x in (True, False):
        sel = work & (along_x if use_x else ~along_x)
        if not sel.any():
            continue
        if use_x:
            val = _line_sum(x[sel], y[sel], x0[sel], y0[sel], Lx, Ly, s2, neumann,
                            spec.series_tol, spec.series_max_terms)
        else:
            val = _line_sum(y[sel], x[sel], y0[sel], x0[sel], Ly, Lx, s2, neumann,
                            spec.series_tol, spec.series_max_terms)
        out[sel] = val
    out *= params.kappa / params.lam**2
    if not neumann:
        out[on_edge] = 0.0
    out = out.reshape(shape)
    return float(out) if out.ndim == 0 else out


def greens_dirichlet_rect(x, y, x0, y0, spec: GreensSpec, params: DiffusionParams):
    """Steady-state field in a rectangle with absorbing (zero-value) edges.

    Parameters
    ----------
    x, y : float or array_like
        Evaluation point(s), inside the closed rectangle.
    x0, y0 : float or array_like
        Source location(s), strictly inside the rectangle.
    spec : GreensSpec
        Bounded domain specification.
    params : DiffusionParams
        Structural parameters.

    Returns
    -------
    float or ndarray
        Field value; exactly 0 on the boundary.
    """
    return _rect_field(x, y, x0, y0, spec, params, neumann=False)


def greens_neumann_rect(x, y, x0, y0, spec: GreensSpec, params: DiffusionParams):
    """Steady-state field in a rectangle with reflecting (zero-flux) edges.

    Cosine modes, including the constant ``n = 0`` and ``m = 0`` modes.
    Arguments as in :func:`greens_dirichlet_rect`.
    """
    return _rect_field(x, y, x0, y0, spec, params, neumann=True)


def greens_rect_double_series(x, y, x0, y0, spec: GreensSpec, params: DiffusionParams,
                              max_block: int = 400) -> float:
    """Reference double eigenfunction series summed in diagonal blocks.

    Blocks ``n + m = b`` are added for increasing ``b`` until a block changes
    the sum by less than ``series_tol`` relative for three consecutive blocks,
    or ``max_block`` is reached. The double series converges slowly near the
    source; it is intended for cross-checks away from it.
    """
    if not spec.bounded:
        raise ValidationError("double series requires a bounded GreensSpec")
    Lx, Ly = float(spec.Lx), float(spec.Ly)
    neumann = spec.condition is BoundaryCondition.NEUMANN_RECT
    start = 0 if neumann else 1

    def basis(k, u, u0, L):
        if neumann:
            c = 1.0 / L if k == 0 else 2.0 / L
            return c * math.cos(k * math.pi * u / L) * math.cos(k * math.pi * u0 / L)
        return (2.0 / L) * math.sin(k * math.pi * u / L) * math.sin(k * math.pi * u0 / L)

    total = 0.0
    quiet = 0
    for b in range(2 * start, max_block + 1):
        block = 0.0
        for n in range(start, b - start + 1):
            m = b - n
            mu = math.pi**2 * (n**2 / Lx**2 + m**2 / Ly**2)
            block += basis(n, x, x0, Lx) * basis(m, y, y0, Ly) / (params.delta + params.lam**2 * mu)
        total += block
        if abs(block) < spec.series_tol * abs(total):
            quiet += 1
            if quiet >= 3:
                break
        else:
            quiet = 0
    return params.kappa * total


# ---------------------------------------------------------------- dispatch

def greens_value(x, y, x0, y0, spec: GreensSpec, params: DiffusionParams):
    """Field at ``(x, y)`` from a unit-strength source at ``(x0, y0)`` under ``spec``."""
    if spec.condition is BoundaryCondition.UNBOUNDED:
        d = np.hypot(np.asarray(x, float) - np.asarray(x0, float), np.asarray(y, float) - np.asarray(y0, float))
        return greens_unbounded(d, params)
    if spec.condition is BoundaryCondition.DIRICHLET_RECT:
        return greens_dirichlet_rect(x, y, x0, y0, spec, params)
    return greens_neumann_rect(x, y, x0, y0, spec, params)


def greens_matrix(points: np.ndarray, sources: np.ndarray, spec: GreensSpec,
                  params: DiffusionParams) -> np.ndarray:
    """Pairwise field matrix ``G[p, s]`` for evaluation points and sources.

    Parameters
    ----------
    points : ndarray, shape (P, 2)
    sources : ndarray, shape (S, 2)

    Returns
    -------
    ndarray, shape (P, S)
    """
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    sources = np.asarray(sources, dtype=float).reshape(-1, 2)
    if points.shape[0] == 0 or sources.shape[0] == 0:
        return np.zeros((points.shape[0], sources.shape[0]))
    px, sx = np.meshgrid(points[:, 0], sources[:, 0], indexing="ij")
    py, sy = np.meshgrid(points[:, 1], sources[:, 1], indexing="ij")
    return np.asarray(greens_value(px, py, sx, sy, spec, params), dtype=float).reshape(px.shape)


def superpose(sources: Iterable[tuple[Sequence[float], bool]], eval_point: Sequence[float],
              spec: GreensSpec, params: DiffusionParams) -> float:
    """Total field at ``eval_point`` from all active sources.

    Parameters
    ----------
    sources : iterable of ((x, y), active)
        Source locations with activity flags.
    eval_point : (x, y)
    spec, params
        Domain and structural parameters.

    Returns
    -------
    float
        Sum of single-source fields over active sources; 0 if none is active.
    """
    active = [tuple(loc) for loc, on in sources if on]
    if not active:
        return 0.0
    src = np.asarray(active, dtype=float)
    ex, ey = float(eval_point[0]), float(eval_point[1])
    vals = greens_value(np.full(len(src), ex), np.full(len(src), ey), src[:, 0], src[:, 1], spec, params)
    return float(np.sum(vals))


def pde_residual(field: np.ndarray, h: float, params: DiffusionParams) -> np.ndarray:
    """Five-point residual ``-delta K + lam**2 laplacian_h K`` on interior nodes.

    Parameters
    ----------
    field : ndarray, shape (nx, ny)
        Field sampled on a uniform grid with spacing ``h``.
    h : float
        Grid spacing.
    params : DiffusionParams

    Returns
    -------
    ndarray, shape (nx - 2, ny - 2)
    """
    f = np.asarray(field, dtype=float)
    lap = (f[2:, 1:-1] + f[:-2, 1:-1] + f[1:-1, 2:] + f[1:-1, :-2] - 4.0 * f[1:-1, 1:-1]) / h**2
    return -params.delta * f[1:-1, 1:-1] + params.lam**2 * lap

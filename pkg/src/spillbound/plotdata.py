"""Plot-ready data tables and optional PNG rendering.

Each kind maps an estimation result or a Monte Carlo summary to a header and
rows. Rendering is optional and needs matplotlib (``pip install
artifact[plots]``); the tables themselves have no plotting dependency.
"""

from __future__ import annotations

import math
from enum import Enum
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import ValidationError
from .estimate import EstimationResult
from .jsonio import atomic_write_with, csv_text
from .panel import PanelDataset

__all__ = ["PlotKind", "plot_table", "emit_plot_data", "render_figure"]


class PlotKind(str, Enum):
    SPATIAL_DECAY = "SpatialDecay"
    TEMPORAL_DECAY = "TemporalDecay"
    RATIO_CHECK = "RatioCheck"
    RMSE_VS_N = "RmseVsN"


HEADERS = {
    PlotKind.SPATIAL_DECAY: ("d_km", "mean_effect", "fitted"),
    PlotKind.TEMPORAL_DECAY: ("tau", "mean_effect", "fitted"),
    PlotKind.RATIO_CHECK: ("quantity", "ratio"),
    PlotKind.RMSE_VS_N: ("n_units", "rmse_d_star", "inv_sqrt_n_reference"),
}


def _spatial_rows(result: EstimationResult, n_bins: int = 20, n_curve: int = 50) -> list[tuple]:
    sp = result.spatial
    if sp is None or sp.x.size == 0:
        return []
    if sp.method == "loglinear":
        a, k = sp.coef

        def model(d):
            return a - k * d
    else:
        c, B, k = sp.coef

        def model(d):
            return c + B * np.exp(-k * d)
    order = np.argsort(sp.x, kind="stable")
    rows = []
    for chunk in np.array_split(order, min(n_bins, sp.x.size)):
        d = float(sp.x[chunk].mean())
        rows.append((d, float(sp.y[chunk].mean()), float(model(d))))
    for d in np.linspace(float(sp.x.min()), float(sp.x.max()), n_curve):
        rows.append((float(d), None, float(model(d))))
    return rows


def _temporal_rows(result: EstimationResult, dataset: PanelDataset | None) -> list[tuple]:
    tm = result.temporal
    if tm is None:
        return []
    if tm.method == "loglinear":
        a, delta = tm.coef
        tau, y = tm.x, tm.y

        def model(t):
            return a - delta * t
    else:
        A, delta = tm.coef

        def model(t):
            return A * (1.0 - (1.0 - delta) ** (t + 1.0))
        if tm.method == "accumulation_joint":
            if dataset is None:
                return []
            from .inference import _stage_sample, _temporal_outcome
            _, _, y_tm, _ = _stage_sample(dataset, result)
            yt, mt = _temporal_outcome(dataset, result, y_tm)
            tau, y = dataset.exposure.tau[mt].astype(float), yt[mt]
        else:
            tau, y = tm.x, tm.y
    return [(float(s), float(y[tau == s].mean()), float(model(s))) for s in np.unique(tau)]


def _ratio_rows(result: EstimationResult) -> list[tuple]:
    if not result.ok:
        return []
    return [("empirical", result.d_star / result.tau_star), ("theoretical", result.ratio_theory)]


def _rmse_rows(summary: Mapping[str, Any]) -> list[tuple]:
    cells = summary.get("summary", summary).get("n_units", [])
    pts = []
    for cell in cells:
        n = int(cell["design"]["n_units"])
        pts.append((n, float(cell["params"]["d_star"]["rmse"])))
    pts.sort()
    if not pts:
        return []
    n_ref, r_ref = pts[-1]
    return [(n, r, r_ref * math.sqrt(n_ref / n)) for n, r in pts]


def plot_table(source: Any, kind: PlotKind | str, dataset: PanelDataset | None = None) -> tuple[tuple, list]:
    """Header and rows for one plot kind.

    Parameters
    ----------
    source : EstimationResult or mapping or None
        An estimation result for the decay and ratio kinds; the output of
        ``run_preset("rmse_vs_n")`` for ``RmseVsN``. ``None`` gives a
        header-only table.
    kind : PlotKind or str
    dataset : PanelDataset, optional
        Needed by ``TemporalDecay`` when the temporal fit absorbed the fixed
        effects jointly.

    Returns
    -------
    header, rows

    Notes
    -----
    ``SpatialDecay`` rows are distance-quantile bins of the Stage 2 sample
    (``mean_effect`` filled) followed by samples of the fitted curve
    (``mean_effect`` empty). Log-linear fits are on the log scale.
    ``TemporalDecay`` rows are one per time since adoption. ``RatioCheck`` has
    the estimated ``d*/tau*`` and its closed-form counterpart. ``RmseVsN``
    adds a reference curve proportional to ``1/sqrt(N)`` through the largest
    ``N``.
    """
    kind = PlotKind(kind)
    header = HEADERS[kind]
    if source is None:
        return header, []
    if kind is PlotKind.RMSE_VS_N:
        if not isinstance(source, Mapping):
            raise ValidationError("RmseVsN needs a Monte Carlo summary mapping")
        return header, _rmse_rows(source)
    if not isinstance(source, EstimationResult):
        raise ValidationError(f"{kind.value} needs an EstimationResult")
    if kind is PlotKind.SPATIAL_DECAY:
        return header, _spatial_rows(source)
    if kind is PlotKind.TEMPORAL_DECAY:
        return header, _temporal_rows(source, dataset)
    return header, _ratio_rows(source)


def emit_plot_data(source: Any, kind: PlotKind | str, dataset: PanelDataset | None = None) -> str:
    """CSV text of :func:`plot_table`."""
    header, rows = plot_table(source, kind, dataset)
    return csv_text(header, rows)


def render_figure(header: tuple, rows: list, kind: PlotKind | str, path: str | Path) -> Path:
    """Render one table to PNG with matplotlib.

    Raises
    ------
    ValidationError
        matplotlib is not installed.
    """
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise ValidationError("--figures needs matplotlib: pip install 'artifact[plots]'") from exc
    kind = PlotKind(kind)
    fig, ax = plt.subplots(figsize=(5.0, 3.5))
    if kind is PlotKind.RATIO_CHECK:
        ax.bar([r[0] for r in rows], [r[1] for r in rows])
        ax.set_ylabel("d* / tau* (km per period)")
    else:
        pts = [r for r in rows if r[1] is not None]
        ax.plot([r[0] for r in pts], [r[1] for r in pts], "o", label=header[1])
        curve = [r for r in rows if r[2] is not None]
        if kind is PlotKind.SPATIAL_DECAY:
            curve = [r for r in rows if r[1] is None] or curve
        ax.plot([r[0] for r in curve], [r[2] for r in curve], "-", label=header[2])
        ax.set_xlabel(header[0])
        if kind is PlotKind.RMSE_VS_N:
            ax.set_xscale("log")
            ax.set_yscale("log")
        ax.legend()
    ax.set_title(kind.value)
    fig.tight_layout()
    try:
        return atomic_write_with(path, lambda tmp: fig.savefig(tmp, dpi=120, format="png"))
    finally:
        plt.close(fig)

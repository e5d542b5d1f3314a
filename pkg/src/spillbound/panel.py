"""Balanced panel of spatially located units with staggered, permanent treatment.

Periods are numbered ``1..T``. A treated unit ``i`` adopts at period
``T_i`` and stays treated, so ``D_it = 1{t >= T_i}``. Derived exposure
fields are time since adoption ``tau_it = max(0, t - T_i)`` and the distance
``d_i(t)`` to the nearest treated unit active at ``t`` (``inf`` when none is).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import ParseError, ValidationError
from .greens import GreensSpec

__all__ = [
    "UnitLocation",
    "TreatmentSchedule",
    "PanelObservation",
    "Exposure",
    "PanelDataset",
    "pairwise_distances",
    "derive_exposure",
    "load_csv",
    "write_csv",
    "CSV_COLUMNS",
]

CSV_COLUMNS = ("unit_id", "time", "x_km", "y_km", "treated", "adoption_time", "outcome")
OPTIONAL_COLUMNS = ("tau", "dist_nearest_treated")


@dataclass(frozen=True)
class UnitLocation:
    """A unit and its planar coordinates in km."""

    unit_id: int
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValidationError(f"unit {self.unit_id}: coordinates must be finite")


@dataclass(frozen=True)
class TreatmentSchedule:
    """Set of eventually treated units and their adoption periods.

    Parameters
    ----------
    adoption_time : mapping of unit_id to int
        Adoption period ``T_i`` for every treated unit. The treated set is
        the key set.
    """

    adoption_time: Mapping[int, int] = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for k, v in dict(self.adoption_time).items():
            if int(v) != v:
                raise ValidationError(f"unit {k}: adoption time must be an integer, got {v}")
            clean[int(k)] = int(v)
        object.__setattr__(self, "adoption_time", clean)

    @property
    def treated_set(self) -> frozenset[int]:
        return frozenset(self.adoption_time)

    def validate(self, unit_ids: Sequence[int], T: int) -> None:
        known = set(int(u) for u in unit_ids)
        for uid, ti in self.adoption_time.items():
            if uid not in known:
                raise ValidationError(f"schedule references unknown unit {uid}")
            if not 1 <= ti <= T:
                raise ValidationError(f"unit {uid}: adoption time {ti} outside 1..{T}")


@dataclass(frozen=True)
class PanelObservation:
    """One (unit, period) record with its derived exposure fields."""

    unit_id: int
    time: int
    outcome: float
    treated: bool
    tau: int
    dist_nearest_treated: float


@dataclass(frozen=True)
class Exposure:
    """Derived exposure grids, each of shape (N, T).

    Attributes
    ----------
    treated : ndarray of bool
        ``D_it``.
    tau : ndarray of int
        Periods since adoption, 0 when untreated.
    dist : ndarray of float
        Distance to the nearest active treated unit, ``inf`` if none.
    """

    treated: np.ndarray
    tau: np.ndarray
    dist: np.ndarray


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


def pairwise_distances(units: Sequence[UnitLocation] | np.ndarray) -> np.ndarray:
    """Euclidean distance matrix in km.

    Parameters
    ----------
    units : sequence of UnitLocation or ndarray of shape (N, 2)

    Returns
    -------
    ndarray, shape (N, N)
        Symmetric, zero diagonal.
    """
    if isinstance(units, np.ndarray):
        xy = np.asarray(units, dtype=float).reshape(-1, 2)
    else:
        xy = np.array([[u.x, u.y] for u in units], dtype=float).reshape(-1, 2)
    if xy.shape[0] < 1:
        raise ValidationError("at least one unit is required")
    if not np.all(np.isfinite(xy)):
        raise ValidationError("coordinates must be finite")
    diff = xy[:, None, :] - xy[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    # exact symmetry regardless of rounding in the subtraction order
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return d


def derive_exposure(units: Sequence[UnitLocation], schedule: TreatmentSchedule, T: int,
                    distances: np.ndarray | None = None) -> Exposure:
    """Treatment indicator, time since adoption and nearest-active distance.

    Parameters
    ----------
    units : sequence of UnitLocation
    schedule : TreatmentSchedule
    T : int
        Number of periods.
    distances : ndarray, optional
        Precomputed :func:`pairwise_distances`.

    Returns
    -------
    Exposure
    """
    if T < 1:
        raise ValidationError("horizon T must be >= 1")
    ids = [u.unit_id for u in units]
    schedule.validate(ids, T)
    index = {uid: k for k, uid in enumerate(ids)}
    n = len(ids)
    adopt = np.full(n, T + 1, dtype=np.int64)
    for uid, ti in schedule.adoption_time.items():
        adopt[index[uid]] = ti
    t = np.arange(1, T + 1)
    treated = t[None, :] >= adopt[:, None]
    tau = np.where(treated, t[None, :] - adopt[:, None], 0).astype(np.int64)
    d = pairwise_distances(units) if distances is None else distances
    dist = np.full((n, T), np.inf)
    current = np.full(n, np.inf)
    # the active set only grows, so fold in newly adopting units period by period
    for s in range(T):
        new = adopt == s + 1
        if new.any():
            current = np.minimum(current, d[:, new].min(axis=1))
        dist[:, s] = current
    return Exposure(_freeze(treated), _freeze(tau), _freeze(dist))


class PanelDataset:
    """Balanced N x T panel with locations, schedule and outcomes.

    Parameters
    ----------
    units : sequence of UnitLocation
        Units in row order; ids must be unique.
    schedule : TreatmentSchedule
    outcome : ndarray, shape (N, T)
        Outcomes ``Y_it`` for periods ``1..T``.
    domain : GreensSpec, optional
        Spatial domain; coordinates are checked against it when bounded.

    Notes
    -----
    Instances are immutable: arrays are stored read-only and exposure fields
    are derived once at construction.
    """

    def __init__(self, units: Sequence[UnitLocation], schedule: TreatmentSchedule,
                 outcome: np.ndarray, domain: GreensSpec | None = None):
        units = tuple(units)
        if len(units) < 1:
            raise ValidationError("dataset needs at least one unit")
        ids = [u.unit_id for u in units]
        if len(set(ids)) != len(ids):
            raise ValidationError("unit_id values must be unique")
        y = np.asarray(outcome, dtype=float)
        if y.ndim != 2 or y.shape[0] != len(units):
            raise ValidationError(f"outcome must have shape (N, T) with N={len(units)}, got {y.shape}")
        if y.shape[1] < 1:
            raise ValidationError("panel needs at least one period")
        if not np.all(np.isfinite(y)):
            raise ValidationError("outcomes must be finite")
        self.domain = domain if domain is not None else GreensSpec()
        xy = np.array([[u.x, u.y] for u in units], dtype=float)
        if self.domain.bounded and not np.all(self.domain.contains(xy[:, 0], xy[:, 1])):
            raise ValidationError("unit coordinates fall outside the declared domain")
        self.units = units
        self.schedule = schedule
        self.outcome = _freeze(y)
        self.coords = _freeze(xy)
        self.unit_ids = _freeze(np.asarray(ids, dtype=np.int64))
        self.distances = _freeze(pairwise_distances(xy))
        self.exposure = derive_exposure(units, schedule, self.n_periods, self.distances)

    @property
    def n_units(self) -> int:
        return len(self.units)

    @property
    def n_periods(self) -> int:
        return int(self.outcome.shape[1])

    @property
    def times(self) -> np.ndarray:
        return np.arange(1, self.n_periods + 1)

    @property
    def adoption(self) -> np.ndarray:
        """Adoption period per unit row, 0 for never-treated units."""
        a = np.zeros(self.n_units, dtype=np.int64)
        index = {int(u): k for k, u in enumerate(self.unit_ids)}
        for uid, ti in self.schedule.adoption_time.items():
            a[index[uid]] = ti
        return a

    def observations(self) -> Iterator[PanelObservation]:
        """Iterate records in (unit, time) order."""
        ex = self.exposure
        for i, uid in enumerate(self.unit_ids):
            for s in range(self.n_periods):
                yield PanelObservation(int(uid), s + 1, float(self.outcome[i, s]), bool(ex.treated[i, s]),
                                       int(ex.tau[i, s]), float(ex.dist[i, s]))

    def revalidate(self) -> None:
        """Re-derive exposure from (locations, schedule) and compare exactly."""
        fresh = derive_exposure(self.units, self.schedule, self.n_periods)
        for name in ("treated", "tau", "dist"):
            if not np.array_equal(getattr(fresh, name), getattr(self.exposure, name)):
                raise ValidationError(f"derived field {name} is inconsistent with the schedule")

    def with_outcome(self, outcome: np.ndarray) -> "PanelDataset":
        """Copy with replaced outcomes (same units, schedule and domain)."""
        return PanelDataset(self.units, self.schedule, outcome, self.domain)

    def subset_units(self, rows: Sequence[int], relabel: bool = True) -> "PanelDataset":
        """Dataset built from the given unit rows, repeats allowed.

        Parameters
        ----------
        rows : sequence of int
            Row indices, possibly repeated (bootstrap resampling).
        relabel : bool
            Assign fresh ids ``0..len(rows)-1`` so repeated units stay distinct.
        """
        rows = [int(r) for r in rows]
        units = []
        adopt = {}
        for k, r in enumerate(rows):
            u = self.units[r]
            uid = k if relabel else u.unit_id
            units.append(UnitLocation(uid, u.x, u.y))
            ti = self.schedule.adoption_time.get(u.unit_id)
            if ti is not None:
                adopt[uid] = ti
        return PanelDataset(units, TreatmentSchedule(adopt), self.outcome[rows], self.domain)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PanelDataset):
            return NotImplemented
        return (self.units == other.units
                and self.schedule.adoption_time == other.schedule.adoption_time
                and np.array_equal(self.outcome, other.outcome))

    __hash__ = None

    def __repr__(self) -> str:
        return (f"PanelDataset(N={self.n_units}, T={self.n_periods}, "
                f"treated={len(self.schedule.adoption_time)})")


def _fmt(v: float) -> str:
    # repr gives the shortest string that round-trips exactly
    return repr(float(v))


def write_csv(dataset: PanelDataset, path, include_derived: bool = False) -> None:
    """Write the documented CSV schema, one row per (unit, time).

    Parameters
    ----------
    dataset : PanelDataset
    path : path-like
    include_derived : bool
        Append ``tau`` and ``dist_nearest_treated`` columns (the latter empty
        when infinite).
    """
    cols = list(CSV_COLUMNS) + (list(OPTIONAL_COLUMNS) if include_derived else [])
    adopt = dataset.schedule.adoption_time
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for obs, unit in zip(dataset.observations(), np.repeat(np.arange(dataset.n_units), dataset.n_periods)):
            u = dataset.units[unit]
            ti = adopt.get(u.unit_id)
            row = [str(obs.unit_id), str(obs.time), _fmt(u.x), _fmt(u.y), "1" if obs.treated else "0",
                   "" if ti is None else str(ti), _fmt(obs.outcome)]
            if include_derived:
                d = obs.dist_nearest_treated
                row += [str(obs.tau), "" if math.isinf(d) else _fmt(d)]
            w.writerow(row)


def _parse_num(text: str, kind, col: str, line: int):
    try:
        v = kind(text)
    except ValueError:
        raise ParseError(f"column {col}: cannot parse {text!r}", line) from None
    if kind is float and not math.isfinite(v):
        raise ParseError(f"column {col}: non-finite value {text!r}", line)
    return v


def load_csv(path, domain: GreensSpec | None = None) -> PanelDataset:
    """Read a panel CSV and cross-check every derived field.

    Parameters
    ----------
    path : path-like
    domain : GreensSpec, optional

    Returns
    -------
    PanelDataset

    Raises
    ------
    ParseError
        Missing columns, malformed values, duplicate or missing (unit, time)
        cells, or derived values that disagree with the schedule. Messages
        carry the 1-based file line number.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file (header required)", 1) from None
        header = [h.strip() for h in header]
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise ParseError(f"missing column(s): {', '.join(missing)}", 1)
        col = {c: header.index(c) for c in header}
        records = []
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line)
            uid = _parse_num(row[col["unit_id"]], int, "unit_id", line)
            t = _parse_num(row[col["time"]], int, "time", line)
            x = _parse_num(row[col["x_km"]], float, "x_km", line)
            y = _parse_num(row[col["y_km"]], float, "y_km", line)
            tr = row[col["treated"]].strip()
            if tr not in ("0", "1"):
                raise ParseError(f"column treated: expected 0 or 1, got {tr!r}", line)
            at = row[col["adoption_time"]].strip()
            at_v = None if at == "" else _parse_num(at, int, "adoption_time", line)
            yv = _parse_num(row[col["outcome"]], float, "outcome", line)
            extra = {}
            if "tau" in col:
                extra["tau"] = _parse_num(row[col["tau"]], int, "tau", line)
            if "dist_nearest_treated" in col:
                dv = row[col["dist_nearest_treated"]].strip()
                extra["dist"] = math.inf if dv == "" else _parse_num(dv, float, "dist_nearest_treated", line)
            records.append((line, uid, t, x, y, tr == "1", at_v, yv, extra))
    if not records:
        raise ParseError("no data rows", 2)

    unit_order: list[int] = []
    unit_info: dict[int, tuple] = {}
    cells: dict[tuple[int, int], tuple] = {}
    for rec in records:
        line, uid, t, x, y, tr, at_v, yv, extra = rec
        if uid not in unit_info:
            unit_order.append(uid)
            unit_info[uid] = (x, y, at_v, line)
        else:
            x0, y0, a0, l0 = unit_info[uid]
            if (x0, y0) != (x, y):
                raise ParseError(f"unit {uid}: coordinates differ from line {l0}", line)
            if a0 != at_v:
                raise ParseError(f"unit {uid}: adoption_time differs from line {l0}", line)
        if (uid, t) in cells:
            raise ParseError(f"duplicate (unit_id, time) = ({uid}, {t}); first seen on line {cells[(uid, t)][0]}", line)
        cells[(uid, t)] = rec
    times = sorted({t for _, t in cells})
    T = len(times)
    if times != list(range(1, T + 1)):
        raise ParseError(f"time values must be consecutive integers 1..T, got {times[:5]}...", 2)
    n = len(unit_order)
    if len(cells) != n * T:
        for uid in unit_order:
            for t in times:
                if (uid, t) not in cells:
                    raise ParseError(f"unbalanced panel: unit {uid} has no row for time {t}",
                                     unit_info[uid][3])
    units = [UnitLocation(uid, unit_info[uid][0], unit_info[uid][1]) for uid in unit_order]
    adopt = {uid: unit_info[uid][2] for uid in unit_order if unit_info[uid][2] is not None}
    for uid, ti in adopt.items():
        if not 1 <= ti <= T:
            raise ParseError(f"unit {uid}: adoption_time {ti} outside 1..{T}", unit_info[uid][3])
    y = np.empty((n, T))
    for i, uid in enumerate(unit_order):
        for s, t in enumerate(times):
            y[i, s] = cells[(uid, t)][7]
    ds = PanelDataset(units, TreatmentSchedule(adopt), y, domain)
    ex = ds.exposure
    for i, uid in enumerate(unit_order):
        for s, t in enumerate(times):
            line, _, _, _, _, tr, _, _, extra = cells[(uid, t)]
            if tr != bool(ex.treated[i, s]):
                raise ParseError(f"row (unit {uid}, time {t}): treated={int(tr)} inconsistent with adoption_time", line)
            if "tau" in extra and extra["tau"] != ex.tau[i, s]:
                raise ParseError(f"row (unit {uid}, time {t}): tau={extra['tau']} but schedule implies {ex.tau[i, s]}", line)
            if "dist" in extra:
                want = ex.dist[i, s]
                got = extra["dist"]
                same = (math.isinf(want) and math.isinf(got)) or (
                    math.isfinite(want) and math.isfinite(got) and abs(got - want) <= 1e-9 * max(1.0, want))
                if not same:
                    raise ParseError(f"row (unit {uid}, time {t}): dist_nearest_treated={got} but geometry implies {want}", line)
    return ds

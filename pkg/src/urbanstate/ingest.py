"""Raw report / inspection exports -> ObservationPanel.

Column names are mapped through :class:`ColumnMap` so exports with different
headers (e.g. the 311 layout) can be read without renaming files.
"""
from __future__ import annotations

import csv
import datetime as dt
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import kernels
from .data_model import IncidentCatalog, ObservationPanel, carry_forward_ratings

log = logging.getLogger(__name__)

MAX_MALFORMED_FRACTION = 0.10
DEFAULT_MATCH_THRESHOLD_M = 100.0


class IngestError(RuntimeError):
    pass


@dataclass(frozen=True)
class RawReportRecord:
    week: int
    type_name: str
    node: int
    sub_unit: int | None = None
    lat: float | None = None
    lon: float | None = None
    agency: str = ""


@dataclass(frozen=True)
class RawInspectionRecord:
    week: int
    type_name: str
    node: int
    sub_unit: int
    rating: float
    lat: float | None = None
    lon: float | None = None


@dataclass
class ColumnMap:
    week: str = "week"
    date: str = "created_date"
    type_name: str = "complaint_type"
    agency: str = "agency"
    node: str = "tract"
    sub_unit: str = "sub_unit"
    lat: str = "latitude"
    lon: str = "longitude"
    rating: str = "rating"

    @classmethod
    def nyc_311(cls) -> "ColumnMap":
        """Header names used by the NYC 311 service-request export."""
        return cls(week="week", date="Created Date", type_name="Complaint Type",
                   agency="Agency", node="tract", sub_unit="sub_unit",
                   lat="Latitude", lon="Longitude")


@dataclass
class ParseStats:
    rows: int = 0
    malformed: int = 0
    reasons: dict = field(default_factory=dict)

    def bad(self, reason: str) -> None:
        self.malformed += 1
        self.reasons[reason] = self.reasons.get(reason, 0) + 1


def _parse_date(text: str) -> dt.date:
    text = text.strip()
    for fmt in ("%Y-%m-%d", "%m/%d/%Y %I:%M:%S %p", "%m/%d/%Y %H:%M:%S", "%m/%d/%Y",
                "%Y-%m-%dT%H:%M:%S.%f", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"):
        try:
            return dt.datetime.strptime(text, fmt).date()
        except ValueError:
            continue
    raise ValueError(f"unrecognised date {text!r}")


def _opt_float(row: dict, key: str) -> float | None:
    v = row.get(key)
    if v is None or str(v).strip() == "":
        return None
    x = float(v)
    if not math.isfinite(x):
        raise ValueError("non-finite coordinate")
    return x


def _opt_int(row: dict, key: str) -> int | None:
    v = row.get(key)
    if v is None or str(v).strip() == "":
        return None
    return int(float(v))


def _row_week(row: dict, cols: ColumnMap, panel_start: dt.date | None) -> int:
    w = row.get(cols.week)
    if w is not None and str(w).strip() != "":
        return int(str(w).strip())
    if panel_start is None or row.get(cols.date) in (None, ""):
        raise ValueError("no week column and no date to derive it from")
    return (_parse_date(row[cols.date]) - panel_start).days // 7


def _read_rows(path) -> Iterator[dict]:
    p = Path(path)
    if not p.is_file():
        raise IngestError(f"cannot read {p}")
    with p.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames:
            raise IngestError(f"{p} has no header row")
        yield from reader


def _finish(stats: ParseStats, what: str) -> None:
    if stats.malformed:
        log.warning("%s: skipped %d of %d rows %s", what, stats.malformed, stats.rows, stats.reasons)
    if stats.rows and stats.malformed / stats.rows > MAX_MALFORMED_FRACTION:
        raise IngestError(
            f"{what}: {stats.malformed}/{stats.rows} malformed rows exceeds "
            f"{MAX_MALFORMED_FRACTION:.0%}: {stats.reasons}")


def parse_report_records(path, cols: ColumnMap | None = None, n_weeks: int | None = None,
                         panel_start: str | dt.date | None = None,
                         stats: ParseStats | None = None) -> list[RawReportRecord]:
    """Read a report export. Malformed rows are skipped and counted in ``stats``."""
    cols = cols or ColumnMap()
    stats = stats if stats is not None else ParseStats()
    start = dt.date.fromisoformat(panel_start) if isinstance(panel_start, str) else panel_start
    out = []
    for row in _read_rows(path):
        stats.rows += 1
        try:
            week = _row_week(row, cols, start)
        except ValueError:
            stats.bad("week")
            continue
        if week < 0 or (n_weeks is not None and week >= n_weeks):
            stats.bad("week_range")
            continue
        name = (row.get(cols.type_name) or "").strip()
        if not name:
            stats.bad("type")
            continue
        try:
            node = int(str(row.get(cols.node, "")).strip())
            sub = _opt_int(row, cols.sub_unit)
            lat, lon = _opt_float(row, cols.lat), _opt_float(row, cols.lon)
        except (TypeError, ValueError):
            stats.bad("node_or_coords")
            continue
        agency = (row.get(cols.agency) or "").strip()
        out.append(RawReportRecord(week, name, node, sub, lat, lon, agency))
    _finish(stats, f"reports {path}")
    return out


def parse_inspection_records(path, cols: ColumnMap | None = None, n_weeks: int | None = None,
                             panel_start: str | dt.date | None = None,
                             stats: ParseStats | None = None) -> list[RawInspectionRecord]:
    cols = cols or ColumnMap()
    stats = stats if stats is not None else ParseStats()
    start = dt.date.fromisoformat(panel_start) if isinstance(panel_start, str) else panel_start
    out = []
    for row in _read_rows(path):
        stats.rows += 1
        try:
            week = _row_week(row, cols, start)
            name = (row.get(cols.type_name) or "").strip()
            node = int(str(row.get(cols.node, "")).strip())
            sub = _opt_int(row, cols.sub_unit)
            rating = float(row[cols.rating])
            lat, lon = _opt_float(row, cols.lat), _opt_float(row, cols.lon)
        except (KeyError, TypeError, ValueError):
            stats.bad("field")
            continue
        if not name or not math.isfinite(rating) or week < 0 or (
                n_weeks is not None and week >= n_weeks):
            stats.bad("range")
            continue
        out.append(RawInspectionRecord(week, name, node, -1 if sub is None else sub, rating, lat, lon))
    _finish(stats, f"inspections {path}")
    return out


def build_indicators(reports: Iterable[RawReportRecord], n: int, n_weeks: int,
                     type_names: Sequence[str] | None = None) -> tuple[np.ndarray, list[str]]:
    """Bool (n, types, weeks): at least one report of the type in the node-week."""
    reports = list(reports)
    names = list(type_names) if type_names is not None else sorted({r.type_name for r in reports})
    index = {name: k for k, name in enumerate(names)}
    T = np.zeros((n, len(names), n_weeks), dtype=bool)
    for r in reports:
        k = index.get(r.type_name)
        if k is None or not (0 <= r.node < n) or not (0 <= r.week < n_weeks):
            continue
        T[r.node, k, r.week] = True
    return T, names


def filter_types(indicators: np.ndarray, names: Sequence[str], min_rate: float = 0.001,
                 rated_names: Iterable[str] = (), agencies: dict | None = None
                 ) -> tuple[IncidentCatalog, np.ndarray, np.ndarray]:
    """Keep types whose mean indicator over (node, week) is strictly above ``min_rate``.

    Returns the catalog, the kept type indices into ``names`` and the filtered array.
    """
    rates = indicators.mean(axis=(0, 2))
    keep = np.flatnonzero(rates > min_rate)
    if keep.size == 0:
        raise IngestError(f"no type has a report rate above {min_rate}")
    rated = set(rated_names)
    agencies = agencies or {}
    kept_names = tuple(names[k] for k in keep)
    catalog = IncidentCatalog(kept_names, tuple(n in rated for n in kept_names),
                              tuple(agencies.get(n, "") for n in kept_names))
    return catalog, keep, indicators[:, keep, :]


def zscore(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        raise IngestError("need at least two ratings to z-score")
    sd = values.std()
    if sd <= 1e-12 * max(1.0, abs(values.mean())):
        raise IngestError("ratings are constant")
    return (values - values.mean()) / sd


def zscore_ratings(ratings: dict[str, np.ndarray] | np.ndarray, types: np.ndarray | None = None):
    """Per-type z-score with population sd.

    Accepts a ``{type: values}`` mapping or a flat value array plus a parallel
    type-label array.
    """
    if isinstance(ratings, dict):
        return {k: zscore(v) for k, v in ratings.items()}
    ratings = np.asarray(ratings, dtype=np.float64)
    out = np.empty_like(ratings)
    for k in np.unique(types):
        m = types == k
        try:
            out[m] = zscore(ratings[m])
        except IngestError as exc:
            raise IngestError(f"type {k}: {exc}") from None
    return out


@dataclass
class FilterStats:
    threshold: float
    n_kept: int
    n_dropped: int
    kept_mean_rating: float
    dropped_mean_rating: float
    kept_mean_lag_weeks: float
    dropped_mean_lag_weeks: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _report_lags(inspections, reports) -> np.ndarray:
    """Weeks since the latest report at/before each inspection (same type and sub-unit, else node)."""
    by_key: dict = {}
    for r in reports:
        key = (r.type_name, r.sub_unit if r.sub_unit is not None else ("node", r.node))
        by_key.setdefault(key, []).append(r.week)
        by_key.setdefault((r.type_name, ("node", r.node)), []).append(r.week)
    for v in by_key.values():
        v.sort()
    lags = np.full(len(inspections), np.nan)
    for j, ins in enumerate(inspections):
        for key in ((ins.type_name, ins.sub_unit), (ins.type_name, ("node", ins.node))):
            weeks = by_key.get(key)
            if not weeks:
                continue
            pos = np.searchsorted(weeks, ins.week, side="right")
            if pos:
                lags[j] = ins.week - weeks[pos - 1]
                break
    return lags


def _nanmean(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    x = x[np.isfinite(x)]
    return float(x.mean()) if x.size else float("nan")


def filter_responsive_inspections(inspections: Sequence[RawInspectionRecord],
                                  percentile: float = 50.0,
                                  reports: Sequence[RawReportRecord] | None = None
                                  ) -> tuple[list[RawInspectionRecord], FilterStats]:
    """Keep inspections in (node, week) cells whose inspection count reaches the percentile.

    The percentile is taken over the per-cell counts (one value per inspected
    cell) with linear interpolation. Scheduled block-by-block sweeps produce many
    inspections per tract-week; reactive ones are isolated.
    """
    inspections = list(inspections)
    if not inspections:
        return [], FilterStats(float("nan"), 0, 0, *([float("nan")] * 4))
    cells: dict[tuple[int, int], int] = {}
    for ins in inspections:
        key = (ins.node, ins.week)
        cells[key] = cells.get(key, 0) + 1
    threshold = float(np.percentile(np.fromiter(cells.values(), dtype=float), percentile))
    keep_mask = np.array([cells[(ins.node, ins.week)] >= threshold for ins in inspections])
    kept = [ins for ins, k in zip(inspections, keep_mask) if k]
    ratings = np.array([ins.rating for ins in inspections])
    lags = _report_lags(inspections, reports) if reports else np.full(len(inspections), np.nan)
    stats = FilterStats(
        threshold=threshold,
        n_kept=int(keep_mask.sum()),
        n_dropped=int((~keep_mask).sum()),
        kept_mean_rating=_nanmean(ratings[keep_mask]),
        dropped_mean_rating=_nanmean(ratings[~keep_mask]),
        kept_mean_lag_weeks=_nanmean(lags[keep_mask]),
        dropped_mean_lag_weeks=_nanmean(lags[~keep_mask]),
    )
    return kept, stats


@dataclass(frozen=True)
class MatchedPair:
    rating_index: int
    report_index: int
    distance_m: float


def match_ratings_to_reports(ratings: Sequence[RawInspectionRecord],
                             reports: Sequence[RawReportRecord],
                             threshold_m: float = DEFAULT_MATCH_THRESHOLD_M) -> list[MatchedPair]:
    """Pair each rating with its nearest report; drop ratings whose nearest is too far.

    Ties go to the lowest report index. Records without coordinates never match.
    """
    rep_idx = [j for j, r in enumerate(reports) if r.lat is not None and r.lon is not None]
    rat_idx = [j for j, r in enumerate(ratings) if r.lat is not None and r.lon is not None]
    if not rep_idx:
        if ratings:
            warnings.warn("no reports with coordinates: every rating is discarded")
        return []
    if not rat_idx:
        return []
    lat_b = np.array([reports[j].lat for j in rep_idx])
    lon_b = np.array([reports[j].lon for j in rep_idx])
    lat_a = np.array([ratings[j].lat for j in rat_idx])
    lon_a = np.array([ratings[j].lon for j in rat_idx])
    best, dist = kernels.nearest_haversine(lat_a, lon_a, lat_b, lon_b)
    out = []
    for a, (b, d) in enumerate(zip(best.tolist(), dist.tolist())):
        if b >= 0 and d <= threshold_m:
            out.append(MatchedPair(rat_idx[a], rep_idx[b], float(d)))
    return out


# -- panel assembly ----------------------------------------------------------


@dataclass
class IngestConfig:
    n_nodes: int
    n_weeks: int
    start_date: str | None = None
    min_rate: float = 0.001
    match_threshold_m: float = DEFAULT_MATCH_THRESHOLD_M
    matching_types: tuple[str, ...] = ()  # street/park style: nearest-report matching
    responsive_filter_types: tuple[str, ...] = ()  # rodent style: percentile filter
    percentile: float = 50.0
    carry_forward: bool = True
    report_cols: ColumnMap = field(default_factory=ColumnMap)
    inspection_cols: ColumnMap = field(default_factory=ColumnMap)


def build_panel(reports: Sequence[RawReportRecord], inspections: Sequence[RawInspectionRecord],
                cfg: IngestConfig) -> tuple[ObservationPanel, dict]:
    """Assemble indicators, filtered/matched/z-scored ratings and sub-node reports."""
    summary: dict = {}
    T_all, names = build_indicators(reports, cfg.n_nodes, cfg.n_weeks)
    agencies = {}
    for r in reports:
        agencies.setdefault(r.type_name, r.agency)
    rated_names = sorted({ins.type_name for ins in inspections})
    catalog, keep, T = filter_types(T_all, names, cfg.min_rate, rated_names, agencies)
    summary["types_total"] = len(names)
    summary["types_kept"] = catalog.n_types
    type_index = {name: k for k, name in enumerate(catalog.names)}

    by_type: dict[str, list[RawInspectionRecord]] = {}
    for ins in inspections:
        if ins.type_name in type_index and 0 <= ins.node < cfg.n_nodes:
            by_type.setdefault(ins.type_name, []).append(ins)
    reports_by_type: dict[str, list[RawReportRecord]] = {}
    for r in reports:
        reports_by_type.setdefault(r.type_name, []).append(r)

    records: list[RawInspectionRecord] = []
    for name in sorted(by_type):
        group = by_type[name]
        if name in cfg.responsive_filter_types:
            group, fstats = filter_responsive_inspections(group, cfg.percentile,
                                                          reports_by_type.get(name))
            summary[f"responsive_filter[{name}]"] = fstats.as_dict()
        if name in cfg.matching_types:
            cand = reports_by_type.get(name, [])
            pairs = match_ratings_to_reports(group, cand, cfg.match_threshold_m)
            matched = []
            for p in pairs:
                ins, rep = group[p.rating_index], cand[p.report_index]
                sub = rep.sub_unit if rep.sub_unit is not None else ins.sub_unit
                matched.append(RawInspectionRecord(ins.week, name, ins.node, sub, ins.rating,
                                                   ins.lat, ins.lon))
            summary[f"matched[{name}]"] = {"ratings": len(group), "kept": len(matched)}
            group = matched
        records.extend(group)

    sub_reports = {(r.sub_unit, type_index[r.type_name], r.week) for r in reports
                   if r.sub_unit is not None and r.type_name in type_index}
    if records:
        types = np.array([type_index[r.type_name] for r in records])
        z = zscore_ratings(np.array([r.rating for r in records]), types)
        subs = np.array([r.sub_unit for r in records])
        weeks = np.array([r.week for r in records])
        rep = np.array([(s, k, w) in sub_reports for s, k, w in zip(subs, types, weeks)], dtype=np.int8)
        obs = dict(obs_sub=subs, obs_node=np.array([r.node for r in records]), obs_type=types,
                   obs_week=weeks, obs_rating=z, obs_report=rep)
    else:
        e = np.array([], dtype=np.int64)
        obs = dict(obs_sub=e, obs_node=e, obs_type=e, obs_week=e, obs_rating=np.array([]),
                   obs_report=e)
    catalog = catalog.with_rated([k in set(obs["obs_type"].tolist()) for k in range(catalog.n_types)])
    panel = ObservationPanel(reports=T, catalog=catalog, start_date=cfg.start_date, **obs)
    if cfg.carry_forward:
        panel = carry_forward_ratings(panel, subnode_reports=sub_reports)
    summary["rating_records"] = panel.n_obs
    return panel, summary

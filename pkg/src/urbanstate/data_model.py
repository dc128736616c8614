"""Core containers: tract graph, demographics, observation panel, time splits."""
from __future__ import annotations

import datetime as dt
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

FEATURE_NAMES = (
    "log_pop_density",
    "pct_bachelors",
    "pct_renter",
    "log_median_income",
    "pct_white",
    "median_age",
)

PANEL_FORMAT_VERSION = 1


class DataError(ValueError):
    """Raised when inputs violate a container invariant."""


# -- graph -------------------------------------------------------------------


@dataclass(frozen=True)
class SpatialGraph:
    n: int
    edges: np.ndarray  # (m, 2) unordered pairs with u < v

    @property
    def node_ids(self) -> np.ndarray:
        return np.arange(self.n)

    @property
    def directed_edges(self) -> set[tuple[int, int]]:
        out = set()
        for u, v in self.edges.tolist():
            out.add((u, v))
            out.add((v, u))
        return out

    def adjacency(self) -> np.ndarray:
        A = np.zeros((self.n, self.n))
        if len(self.edges):
            A[self.edges[:, 0], self.edges[:, 1]] = 1.0
            A[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return A

    def normalized_adjacency(self):
        """Symmetric D^-1/2 (A + I) D^-1/2 as a CSR matrix."""
        import scipy.sparse as sp

        u = np.concatenate([self.edges[:, 0], self.edges[:, 1], np.arange(self.n)])
        v = np.concatenate([self.edges[:, 1], self.edges[:, 0], np.arange(self.n)])
        A = sp.csr_matrix((np.ones(u.shape[0]), (u, v)), shape=(self.n, self.n))
        deg = np.asarray(A.sum(axis=1)).ravel()
        d = sp.diags(1.0 / np.sqrt(deg))
        return (d @ A @ d).tocsr()

    def permuted(self, perm: Sequence[int]) -> "SpatialGraph":
        """Relabel node ``i`` as ``perm[i]``."""
        perm = np.asarray(perm)
        return build_graph([(perm[u], perm[v]) for u, v in self.edges.tolist()], self.n)


def build_graph(edges: Iterable[tuple[int, int]], n: int) -> SpatialGraph:
    pairs = set()
    for u, v in edges:
        u, v = int(u), int(v)
        if not (0 <= u < n and 0 <= v < n):
            raise DataError(f"edge ({u}, {v}) has an endpoint outside [0, {n})")
        if u == v:
            raise DataError(f"self-edge on node {u}")
        pairs.add((min(u, v), max(u, v)))
    arr = np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)
    return SpatialGraph(n=int(n), edges=arr)


# -- demographics ------------------------------------------------------------


@dataclass(frozen=True)
class Demographics:
    values: np.ndarray  # (n, D + 1), z-scored features then an intercept column
    feature_names: tuple[str, ...]
    mean: np.ndarray
    sd: np.ndarray

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    @property
    def features(self) -> np.ndarray:
        return self.values[:, :-1]

    def raw(self) -> np.ndarray:
        return self.features * self.sd + self.mean

    def raw_column(self, name: str) -> np.ndarray:
        """Raw (un-normalised) column; ``log_*`` columns are exponentiated."""
        j = self.feature_names.index(name)
        col = self.raw()[:, j]
        return np.exp(col) if name.startswith("log_") else col

    def normalization_record(self) -> dict:
        return {
            "feature_names": list(self.feature_names),
            "mean": self.mean.tolist(),
            "sd": self.sd.tolist(),
        }

    def subset(self, columns: Sequence[str]) -> "Demographics":
        idx = [self.feature_names.index(c) for c in columns]
        vals = np.column_stack([self.features[:, idx], np.ones(self.values.shape[0])])
        return Demographics(vals, tuple(columns), self.mean[idx], self.sd[idx])


def normalize_demographics(raw, feature_names: Sequence[str] | None = None) -> Demographics:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[0] < 2:
        raise DataError("need an (n, D) matrix with n >= 2")
    if not np.all(np.isfinite(raw)):
        raise DataError("demographics contain missing or non-finite values")
    names = tuple(feature_names) if feature_names is not None else tuple(
        f"x{j}" for j in range(raw.shape[1])
    )
    mean = raw.mean(axis=0)
    sd = raw.std(axis=0)
    for j, s in enumerate(sd):
        if s <= 1e-12 * max(1.0, abs(mean[j])):
            raise DataError(f"column {names[j]!r} has zero variance")
    z = (raw - mean) / sd
    values = np.column_stack([z, np.ones(raw.shape[0])])
    return Demographics(values=values, feature_names=names, mean=mean, sd=sd)


# -- incident types ----------------------------------------------------------


@dataclass(frozen=True)
class IncidentCatalog:
    names: tuple[str, ...]
    rated: tuple[bool, ...]
    agencies: tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.rated) != len(self.names):
            raise DataError("rated flags must align with type names")
        if not self.agencies:
            object.__setattr__(self, "agencies", tuple("" for _ in self.names))

    @property
    def n_types(self) -> int:
        return len(self.names)

    @property
    def rated_types(self) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.rated, dtype=bool))

    def with_rated(self, rated: Sequence[bool]) -> "IncidentCatalog":
        return IncidentCatalog(self.names, tuple(bool(r) for r in rated), self.agencies)


# -- observation panel -------------------------------------------------------


@dataclass
class ObservationPanel:
    """Report indicators at node level plus sub-node rating/report records.

    ``reports[i, k, t]`` is the node-level indicator. The ``obs_*`` arrays hold
    one record per (sub-unit, node, type, week) with an observed rating and the
    matching sub-node report indicator.
    """

    reports: np.ndarray
    obs_sub: np.ndarray
    obs_node: np.ndarray
    obs_type: np.ndarray
    obs_week: np.ndarray
    obs_rating: np.ndarray
    obs_report: np.ndarray
    catalog: IncidentCatalog
    start_date: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.reports = np.asarray(self.reports, dtype=bool)
        self.obs_sub = np.asarray(self.obs_sub, dtype=np.int64)
        self.obs_node = np.asarray(self.obs_node, dtype=np.int64)
        self.obs_type = np.asarray(self.obs_type, dtype=np.int64)
        self.obs_week = np.asarray(self.obs_week, dtype=np.int64)
        self.obs_rating = np.asarray(self.obs_rating, dtype=np.float64)
        self.obs_report = np.asarray(self.obs_report, dtype=np.int8)
        self.validate()

    @property
    def n(self) -> int:
        return self.reports.shape[0]

    @property
    def n_types(self) -> int:
        return self.reports.shape[1]

    @property
    def n_weeks(self) -> int:
        return self.reports.shape[2]

    @property
    def n_obs(self) -> int:
        return self.obs_node.shape[0]

    def validate(self) -> None:
        if self.reports.ndim != 3:
            raise DataError("reports must be (n, types, weeks)")
        if self.catalog.n_types != self.n_types:
            raise DataError("catalog size does not match the report array")
        lens = {len(a) for a in (self.obs_sub, self.obs_node, self.obs_type, self.obs_week,
                                 self.obs_rating, self.obs_report)}
        if len(lens) != 1:
            raise DataError("observation columns have different lengths")
        if self.n_obs:
            if self.obs_node.min() < 0 or self.obs_node.max() >= self.n:
                raise DataError("rating record refers to an unknown node")
            if self.obs_type.min() < 0 or self.obs_type.max() >= self.n_types:
                raise DataError("rating record refers to an unknown type")
            if self.obs_week.min() < 0 or self.obs_week.max() >= self.n_weeks:
                raise DataError("rating record outside the panel weeks")
            if not np.all(np.isfinite(self.obs_rating)):
                raise DataError("ratings must be finite")
            if not np.isin(self.obs_report, (0, 1)).all():
                raise DataError("report indicators must be binary")
            self.sub_to_node()

    def sub_to_node(self) -> dict[int, int]:
        mapping: dict[int, int] = {}
        for s, i in zip(self.obs_sub.tolist(), self.obs_node.tolist()):
            if mapping.setdefault(s, i) != i:
                raise DataError(f"sub-unit {s} maps to nodes {mapping[s]} and {i}")
        return mapping

    def observed_cells(self) -> np.ndarray:
        """Bool (n, types, weeks): cells holding at least one rating record."""
        mask = np.zeros(self.reports.shape, dtype=bool)
        mask[self.obs_node, self.obs_type, self.obs_week] = True
        return mask

    def types_with_ratings(self) -> np.ndarray:
        return np.unique(self.obs_type)

    def window(self, start: int, stop: int) -> "ObservationPanel":
        """Weeks ``[start, stop)`` re-indexed from zero."""
        start, stop = max(0, int(start)), min(self.n_weeks, int(stop))
        if stop <= start:
            raise DataError(f"empty week window [{start}, {stop})")
        keep = (self.obs_week >= start) & (self.obs_week < stop)
        start_date = None
        if self.start_date:
            start_date = (dt.date.fromisoformat(self.start_date) + dt.timedelta(weeks=start)).isoformat()
        return ObservationPanel(
            reports=self.reports[:, :, start:stop],
            obs_sub=self.obs_sub[keep],
            obs_node=self.obs_node[keep],
            obs_type=self.obs_type[keep],
            obs_week=self.obs_week[keep] - start,
            obs_rating=self.obs_rating[keep],
            obs_report=self.obs_report[keep],
            catalog=self.catalog,
            start_date=start_date,
            meta=dict(self.meta),
        )

    def replace_obs(self, keep: np.ndarray | None = None, **columns) -> "ObservationPanel":
        """Copy with observation records filtered by ``keep`` and/or columns replaced."""
        cols = {
            "obs_sub": self.obs_sub,
            "obs_node": self.obs_node,
            "obs_type": self.obs_type,
            "obs_week": self.obs_week,
            "obs_rating": self.obs_rating,
            "obs_report": self.obs_report,
        }
        cols.update(columns)
        if keep is not None:
            cols = {k: np.asarray(v)[keep] for k, v in cols.items()}
        return ObservationPanel(
            reports=self.reports.copy(), catalog=self.catalog, start_date=self.start_date,
            meta=dict(self.meta), **cols,
        )

    def pair_rating_means(self) -> tuple[np.ndarray, np.ndarray]:
        """Per (node, type): mean observed rating and record count over all weeks."""
        n, tau = self.n, self.n_types
        flat = self.obs_node * tau + self.obs_type
        sums = np.bincount(flat, weights=self.obs_rating, minlength=n * tau).reshape(n, tau)
        counts = np.bincount(flat, minlength=n * tau).reshape(n, tau)
        with np.errstate(invalid="ignore", divide="ignore"):
            means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
        return means, counts


def empirical_report_frequency(panel: ObservationPanel, i: int, k: int,
                               window: tuple[int, int] | None = None) -> float:
    start, stop = window if window is not None else (0, panel.n_weeks)
    if stop <= start:
        raise DataError("window must be non-empty")
    return float(panel.reports[i, k, start:stop].mean())


def report_frequencies(panel: ObservationPanel, window: tuple[int, int] | None = None) -> np.ndarray:
    """``empirical_report_frequency`` for every (node, type) at once."""
    start, stop = window if window is not None else (0, panel.n_weeks)
    if stop <= start:
        raise DataError("window must be non-empty")
    return panel.reports[:, :, start:stop].mean(axis=2)


def carry_forward_ratings(panel: ObservationPanel, end_week: int | None = None,
                          subnode_reports: set[tuple[int, int, int]] | None = None
                          ) -> ObservationPanel:
    """Hold each rating constant until the next inspection of the same sub-unit.

    Duplicate (sub-unit, type, week) records are averaged first. Filled weeks get
    a report indicator of 1 only if ``(sub_unit, type, week)`` is in
    ``subnode_reports``.
    """
    end = panel.n_weeks if end_week is None else min(int(end_week), panel.n_weeks)
    if panel.n_obs == 0:
        return panel.replace_obs()
    df = pd.DataFrame({
        "sub": panel.obs_sub, "node": panel.obs_node, "type": panel.obs_type,
        "week": panel.obs_week, "rating": panel.obs_rating, "report": panel.obs_report,
    })
    df = (df.groupby(["sub", "type", "week"], sort=True)
          .agg(node=("node", "first"), rating=("rating", "mean"), report=("report", "max"))
          .reset_index())
    nxt = df.groupby(["sub", "type"])["week"].shift(-1).fillna(end).astype(np.int64).to_numpy()
    week = df["week"].to_numpy()
    length = np.maximum(np.minimum(nxt, end) - week, 1)
    rep = np.repeat(np.arange(len(df)), length)
    offset = np.arange(rep.shape[0]) - np.repeat(np.cumsum(length) - length, length)
    new_week = week[rep] + offset
    sub = df["sub"].to_numpy()[rep]
    typ = df["type"].to_numpy()[rep]
    report = np.where(offset == 0, df["report"].to_numpy()[rep], 0).astype(np.int8)
    if subnode_reports:
        filled = np.flatnonzero(offset > 0)
        for j in filled:
            if (int(sub[j]), int(typ[j]), int(new_week[j])) in subnode_reports:
                report[j] = 1
    return panel.replace_obs(
        obs_sub=sub, obs_node=df["node"].to_numpy()[rep], obs_type=typ, obs_week=new_week,
        obs_rating=df["rating"].to_numpy()[rep], obs_report=report,
    )


# -- time splits -------------------------------------------------------------


def parse_month(value) -> int:
    """'2021-01' / date / (year, month) -> absolute month index."""
    if isinstance(value, int):
        return value
    if isinstance(value, (dt.date, dt.datetime)):
        return value.year * 12 + value.month - 1
    if isinstance(value, tuple):
        return value[0] * 12 + value[1] - 1
    year, month = str(value).split("-")[:2]
    return int(year) * 12 + int(month) - 1


def format_month(index: int) -> str:
    return f"{index // 12:04d}-{index % 12 + 1:02d}"


def month_of_week(start_date: str, week: int) -> int:
    d = dt.date.fromisoformat(start_date) + dt.timedelta(weeks=int(week))
    return d.year * 12 + d.month - 1


@dataclass(frozen=True)
class SplitSpec:
    """Half-open month windows; ``val_start`` (if set) lies inside the train window."""

    train_start: int
    train_end: int
    test_start: int
    test_end: int
    val_start: int | None = None

    def __post_init__(self):
        if not (self.train_start < self.train_end <= self.test_start < self.test_end):
            raise DataError("train must precede a non-empty, disjoint test window")
        if self.train_end != self.test_start:
            raise DataError("train and test windows must be contiguous")
        if self.val_start is not None and not (self.train_start < self.val_start < self.train_end):
            raise DataError("validation window must sit strictly inside the train window")

    @property
    def train_months(self) -> int:
        return self.train_end - self.train_start

    @property
    def test_months(self) -> int:
        return self.test_end - self.test_start

    def describe(self) -> dict:
        out = {
            "train": [format_month(self.train_start), format_month(self.train_end - 1)],
            "test": [format_month(self.test_start), format_month(self.test_end - 1)],
        }
        if self.val_start is not None:
            out["validation"] = [format_month(self.val_start), format_month(self.train_end - 1)]
        return out

    def week_ranges(self, start_date: str, n_weeks: int) -> dict[str, tuple[int, int]]:
        """Map month windows onto contiguous week-index ranges (by week start date)."""
        months = np.array([month_of_week(start_date, t) for t in range(n_weeks)])

        def rng(lo, hi):
            idx = np.flatnonzero((months >= lo) & (months < hi))
            return (int(idx[0]), int(idx[-1]) + 1) if idx.size else (0, 0)

        out = {"train": rng(self.train_start, self.train_end),
               "test": rng(self.test_start, self.test_end)}
        if self.val_start is not None:
            out["fit"] = rng(self.train_start, self.val_start)
            out["validation"] = rng(self.val_start, self.train_end)
        return out


def make_time_splits(panel_start, panel_end, window: int = 24, train: int = 18,
                     stride: int = 1, validation: int | None = 3) -> list[SplitSpec]:
    """Rolling windows over ``[panel_start, panel_end]`` (both months inclusive)."""
    lo, hi = parse_month(panel_start), parse_month(panel_end) + 1
    span = hi - lo
    if span < window:
        warnings.warn(f"panel spans {span} months, shorter than the {window}-month window")
        return []
    splits = []
    for s in range(lo, hi - window + 1, stride):
        val = s + train - validation if validation else None
        splits.append(SplitSpec(s, s + train, s + train, s + window, val))
    return splits


@dataclass(frozen=True)
class WeekSplit:
    """Week-index split used when a panel is shorter than the month windows."""

    fit: tuple[int, int]
    validation: tuple[int, int] | None
    test: tuple[int, int]

    @property
    def train(self) -> tuple[int, int]:
        return (self.fit[0], self.validation[1] if self.validation else self.fit[1])

    @classmethod
    def tail(cls, n_weeks: int, test_weeks: int, val_weeks: int = 0) -> "WeekSplit":
        if not 0 < test_weeks < n_weeks:
            raise DataError("test_weeks must lie in (0, n_weeks)")
        cut = n_weeks - test_weeks
        if val_weeks:
            if val_weeks >= cut:
                raise DataError("validation window would swallow the train window")
            return cls((0, cut - val_weeks), (cut - val_weeks, cut), (cut, n_weeks))
        return cls((0, cut), None, (cut, n_weeks))

    @classmethod
    def from_months(cls, split: SplitSpec, start_date: str, n_weeks: int) -> "WeekSplit":
        r = split.week_ranges(start_date, n_weeks)
        if r["test"][1] <= r["test"][0] or r["train"][1] <= r["train"][0]:
            raise DataError("split windows fall outside the panel weeks")
        if "validation" in r and r["validation"][1] > r["validation"][0]:
            return cls(r["fit"], r["validation"], r["test"])
        return cls(r["train"], None, r["test"])


# -- serialisation -----------------------------------------------------------


def write_panel(panel: ObservationPanel, directory, demographics: Demographics | None = None,
                extra_header: dict | None = None) -> None:
    """Columnar CSV (node, sub_unit, type, week, report, rating) plus a JSON header.

    Node-level rows appear only where the indicator is 1; absent cells are 0.
    Sub-node rows carry the sub-unit id and a rating.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    i, k, t = np.nonzero(panel.reports)
    node_rows = pd.DataFrame({"node": i, "sub_unit": pd.array([pd.NA] * len(i), dtype="Int64"),
                              "type": k, "week": t, "report": 1,
                              "rating": np.full(len(i), np.nan)})
    sub_rows = pd.DataFrame({"node": panel.obs_node,
                             "sub_unit": pd.array(panel.obs_sub, dtype="Int64"),
                             "type": panel.obs_type, "week": panel.obs_week,
                             "report": panel.obs_report.astype(np.int64),
                             "rating": panel.obs_rating})
    pd.concat([node_rows, sub_rows], ignore_index=True).to_csv(
        d / "panel.csv", index=False, float_format="%.17g")
    header = {
        "format_version": PANEL_FORMAT_VERSION,
        "n": panel.n,
        "n_types": panel.n_types,
        "n_weeks": panel.n_weeks,
        "start_date": panel.start_date,
        "type_names": list(panel.catalog.names),
        "rated": [bool(r) for r in panel.catalog.rated],
        "agencies": list(panel.catalog.agencies),
    }
    if demographics is not None:
        header["normalization"] = demographics.normalization_record()
    if panel.meta:
        header["meta"] = panel.meta
    if extra_header:
        header.update(extra_header)
    (d / "panel.json").write_text(json.dumps(header, indent=2, sort_keys=True))


def read_panel(directory) -> ObservationPanel:
    d = Path(directory)
    header = json.loads((d / "panel.json").read_text())
    df = pd.read_csv(d / "panel.csv", dtype={"sub_unit": "Int64"}, float_precision="round_trip")
    reports = np.zeros((header["n"], header["n_types"], header["n_weeks"]), dtype=bool)
    node_rows = df[df["sub_unit"].isna()]
    reports[node_rows["node"].to_numpy(), node_rows["type"].to_numpy(),
            node_rows["week"].to_numpy()] = node_rows["report"].to_numpy().astype(bool)
    sub = df[df["sub_unit"].notna()]
    catalog = IncidentCatalog(tuple(header["type_names"]), tuple(header["rated"]),
                              tuple(header.get("agencies", ())))
    return ObservationPanel(
        reports=reports,
        obs_sub=sub["sub_unit"].to_numpy(dtype=np.int64),
        obs_node=sub["node"].to_numpy(dtype=np.int64),
        obs_type=sub["type"].to_numpy(dtype=np.int64),
        obs_week=sub["week"].to_numpy(dtype=np.int64),
        obs_rating=sub["rating"].to_numpy(dtype=np.float64),
        obs_report=sub["report"].to_numpy(dtype=np.int64),
        catalog=catalog,
        start_date=header.get("start_date"),
        meta=header.get("meta", {}),
    )


def write_demographics(path, raw: np.ndarray, feature_names: Sequence[str]) -> None:
    df = pd.DataFrame(np.asarray(raw), columns=list(feature_names))
    df.insert(0, "node", np.arange(len(df)))
    df.to_csv(path, index=False, float_format="%.17g")


def read_demographics(path) -> Demographics:
    df = pd.read_csv(path, float_precision="round_trip").sort_values("node")
    names = [c for c in df.columns if c != "node"]
    return normalize_demographics(df[names].to_numpy(dtype=np.float64), names)


def write_edges(path, graph: SpatialGraph) -> None:
    pd.DataFrame(graph.edges, columns=["u", "v"]).to_csv(path, index=False)


def read_edges(path, n: int) -> SpatialGraph:
    df = pd.read_csv(path)
    return build_graph(zip(df["u"].tolist(), df["v"].tolist()), n)

"""Metrics and post-hoc analyses for trained models."""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats

from .data_model import Demographics, ObservationPanel

TOPK = (5, 10, 20, 50)


class EvaluationError(ValueError):
    pass


# -- point metrics -----------------------------------------------------------


@dataclass
class Correlation:
    r: float
    p: float
    n: int
    per_type: dict[int, float] = field(default_factory=dict)
    per_type_p: dict[int, float] = field(default_factory=dict)

    @property
    def defined(self) -> bool:
        return math.isfinite(self.r)


def pearson(pred, truth) -> tuple[float, float]:
    """Pearson r and the two-sided t-test p-value; (nan, nan) when undefined."""
    a = np.asarray(pred, dtype=np.float64)
    b = np.asarray(truth, dtype=np.float64)
    if a.shape != b.shape:
        raise EvaluationError("prediction and truth differ in length")
    if a.size < 3:
        return float("nan"), float("nan")
    # exact constancy test: the float mean of equal values need not equal them
    if np.all(a == a[0]) or np.all(b == b[0]):
        return float("nan"), float("nan")
    da, db = a - a.mean(), b - b.mean()
    r = float(np.clip(np.dot(da, db) / np.sqrt(np.dot(da, da) * np.dot(db, db)), -1.0, 1.0))
    dof = a.size - 2
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt(dof / (1.0 - r * r))
    return r, float(2.0 * stats.t.sf(abs(t), dof))


def pair_correlation(pred, truth, types=None) -> Correlation:
    """Correlation over pairs; with ``types`` given, per type and averaged over defined types."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if types is None:
        r, p = pearson(pred, truth)
        return Correlation(r, p, int(pred.size))
    types = np.asarray(types)
    per, per_p = {}, {}
    for k in np.unique(types).tolist():
        m = types == k
        per[k], per_p[k] = pearson(pred[m], truth[m])
    rs = [v for v in per.values() if math.isfinite(v)]
    ps = [per_p[k] for k in per if math.isfinite(per[k])]
    return Correlation(float(np.mean(rs)) if rs else float("nan"),
                       float(np.mean(ps)) if ps else float("nan"), int(pred.size), per, per_p)


def pair_rmse(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.size == 0:
        raise EvaluationError("RMSE of an empty set")
    if pred.shape != truth.shape:
        raise EvaluationError("prediction and truth differ in length")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def proxy_rating_eval(report_prob, truth, orientation: int = 1) -> float:
    """Correlation of predicted report probability with true ratings.

    ``orientation=-1`` flips the proxy so that more reports means a worse
    (lower) rating, which is the natural reading when reporting coefficients
    on the rating are negative.
    """
    if orientation not in (1, -1):
        raise EvaluationError("orientation must be +1 or -1")
    return pearson(orientation * np.asarray(report_prob, dtype=np.float64), truth)[0]


def worst_k(values, k: int) -> np.ndarray:
    """Indices of the k lowest values; ties resolved by position."""
    return np.argsort(np.asarray(values, dtype=np.float64), kind="stable")[:k]


def topk_coverage(pred, truth, k: int) -> float:
    pred = np.asarray(pred)
    if not 1 <= k <= pred.size:
        raise EvaluationError(f"k={k} must lie in [1, {pred.size}]")
    hit = np.intersect1d(worst_k(pred, k), worst_k(truth, k)).size
    return hit / k


def calibration_bins(pred, bins: int = 10) -> np.ndarray:
    """Bin index per prediction; edges at prediction quantiles."""
    pred = np.asarray(pred, dtype=np.float64)
    s = np.sort(pred)
    # linear-interpolated quantiles with integer positions, so a cut that lands
    # on a data point equals it exactly instead of falling a rounding error short
    inner = []
    for i in range(1, bins):
        j, rem = divmod(i * (s.size - 1), bins)
        inner.append(s[j] if rem == 0 else s[j] + (s[j + 1] - s[j]) * (rem / bins))
    return np.searchsorted(np.array(inner), pred, side="right")


def expected_calibration_error(pred, truth, bins: int = 10) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.size == 0:
        raise EvaluationError("ECE needs at least one pair")
    b = calibration_bins(pred, bins)
    ece = 0.0
    for j in np.unique(b):
        m = b == j
        ece += m.sum() / pred.size * abs(pred[m].mean() - truth[m].mean())
    return float(ece)


# -- subgroups and targeting -------------------------------------------------


@dataclass(frozen=True)
class SubgroupSpec:
    name: str
    labels: np.ndarray  # group name per node
    groups: tuple[str, ...]

    def __post_init__(self):
        extra = set(np.unique(self.labels).tolist()) - set(self.groups)
        if extra:
            raise EvaluationError(f"labels outside the declared groups: {sorted(extra)}")

    def members(self, group: str) -> np.ndarray:
        return np.flatnonzero(self.labels == group)


def income_terciles(income) -> SubgroupSpec:
    income = np.asarray(income, dtype=np.float64)
    q1, q2 = np.quantile(income, [1 / 3, 2 / 3])
    labels = np.where(income <= q1, "low", np.where(income <= q2, "middle", "high"))
    return SubgroupSpec("income", labels, ("low", "middle", "high"))


def race_groups(pct_white) -> SubgroupSpec:
    w = np.asarray(pct_white, dtype=np.float64)
    labels = np.where(w < 30, "minority", np.where(w <= 70, "mixed", "white"))
    return SubgroupSpec("race", labels, ("minority", "mixed", "white"))


def subgroup_gaps(metric, spec: SubgroupSpec, pred, truth, nodes=None) -> dict[str, float]:
    """``metric(group) - metric(everyone)`` per group.

    ``nodes`` maps each pair to its node; by default pair j is node j.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    nodes = np.arange(pred.size) if nodes is None else np.asarray(nodes)
    overall = metric(pred, truth)
    node_group = spec.labels[nodes]
    out = {}
    for g in spec.groups:
        m = node_group == g
        out[g] = metric(pred[m], truth[m]) - overall if m.sum() else float("nan")
    return out


def representation_ratio(pred, values, budget: float = 0.1) -> float:
    """Mean of ``values`` over the budget's worst-predicted nodes, relative to everyone."""
    if not 0 < budget <= 1:
        raise EvaluationError("budget must lie in (0, 1]")
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    count = max(1, int(np.floor(budget * n + 0.5)))
    sel = np.sort(worst_k(pred, count))
    return float(values[sel].mean() / values.mean())


# -- coefficients, clustering, PCA -------------------------------------------


def coefficient_recovery(estimated, true) -> tuple[float, float, pd.DataFrame]:
    """Pooled Pearson r and MAE over every coefficient component."""
    est = np.asarray(estimated, dtype=np.float64)
    tru = np.asarray(true, dtype=np.float64)
    if est.shape != tru.shape:
        raise EvaluationError("estimated and true coefficient tables differ in shape")
    rows, cols = np.indices(est.shape)
    table = pd.DataFrame({"row": rows.ravel(), "component": cols.ravel(),
                          "estimated": est.ravel(), "true": tru.ravel()})
    if np.array_equal(est, tru):
        return 1.0, 0.0, table
    return pearson(est.ravel(), tru.ravel())[0], float(np.mean(np.abs(est - tru))), table


@dataclass
class ClusterResult:
    labels: np.ndarray
    inertia: float
    degenerate: bool


def _canonical(labels: np.ndarray) -> np.ndarray:
    """Relabel clusters by order of first appearance."""
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(first)
    remap = np.empty(order.size, dtype=np.int64)
    remap[np.unique(labels)[order]] = np.arange(order.size)
    return remap[labels]


def kmeans(vectors, k: int, seed: int = 0, n_init: int = 50) -> ClusterResult:
    from sklearn.cluster import KMeans

    V = np.asarray(vectors, dtype=np.float64)
    if not 1 <= k <= V.shape[0]:
        raise EvaluationError(f"k={k} must lie in [1, {V.shape[0]}]")
    if np.unique(V, axis=0).shape[0] < k:
        warnings.warn("fewer distinct vectors than clusters; clustering is degenerate")
        return ClusterResult(np.zeros(V.shape[0], dtype=np.int64), 0.0, True)
    km = KMeans(n_clusters=k, n_init=n_init, random_state=seed).fit(V)
    return ClusterResult(_canonical(km.labels_), float(km.inertia_), False)


def cluster_nodes(node_vectors, k: int = 4, seed: int = 0) -> ClusterResult:
    return kmeans(node_vectors, k, seed)


def cluster_types(type_vectors, k: int = 8, seed: int = 0) -> ClusterResult:
    return kmeans(type_vectors, k, seed)


def demographic_tests(labels, demographics: pd.DataFrame) -> pd.DataFrame:
    """One-way ANOVA of each demographic column across clusters, plus cluster means."""
    labels = np.asarray(labels)
    groups = np.unique(labels)
    rows = []
    for col in demographics.columns:
        x = demographics[col].to_numpy(dtype=np.float64)
        samples = [x[labels == g] for g in groups]
        if len(samples) < 2 or any(s.size < 2 for s in samples):
            F, p = float("nan"), float("nan")
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                F, p = stats.f_oneway(*samples)
        rows.append({"feature": col, "F": float(F), "p_value": float(p),
                     **{f"mean_cluster_{g}": float(s.mean()) for g, s in zip(groups, samples)}})
    return pd.DataFrame(rows)


def pca_frequency_correlation(type_vectors, frequencies) -> float:
    """Correlation of each type's first-principal-component score with its report frequency."""
    from sklearn.decomposition import PCA

    V = np.asarray(type_vectors, dtype=np.float64)
    f = np.asarray(frequencies, dtype=np.float64)
    if V.shape[0] < 3:
        raise EvaluationError("need at least 3 types")
    score = PCA(n_components=1, svd_solver="full").fit_transform(V)[:, 0]
    return pearson(score, f)[0]


def node_error_analysis(errors, demographics: pd.DataFrame, top_fraction: float = 0.1,
                        seed: int = 0) -> pd.DataFrame:
    """Worst-error nodes against a random same-size set, Welch t-test per feature."""
    err = np.asarray(errors, dtype=np.float64)
    n = err.size
    size = max(2, int(np.floor(top_fraction * n + 0.5)))
    degenerate = np.all(err == err[0])
    worst = np.argsort(-err, kind="stable")[:size]
    rand = np.random.default_rng(seed).choice(n, size=size, replace=False)
    rows = []
    for col in demographics.columns:
        x = demographics[col].to_numpy(dtype=np.float64)
        a, b = x[worst], x[rand]
        if degenerate:
            t, p = 0.0, 1.0
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                t, p = stats.ttest_ind(a, b, equal_var=False)
            t, p = float(t), float(p) if np.isfinite(p) else 1.0
        rows.append({"feature": col, "worst_mean": float(a.mean()), "random_mean": float(b.mean()),
                     "t": t, "p_value": p, "degenerate": bool(degenerate)})
    return pd.DataFrame(rows)


# -- full report -------------------------------------------------------------


def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return float(x) if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


@dataclass
class MetricReport:
    metrics: dict
    header: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _clean({"header": self.header, "metrics": self.metrics})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def flat(self) -> list[tuple[str, object]]:
        out = []

        def walk(prefix, v):
            if isinstance(v, dict):
                for k in sorted(v, key=str):
                    walk(f"{prefix}.{k}" if prefix else str(k), v[k])
            else:
                out.append((prefix, v))

        walk("", self.to_dict()["metrics"])
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in self.flat():
            w.writerow([k, "" if v is None else repr(v) if isinstance(v, float) else v])
        return buf.getvalue()


def _mean_defined(values):
    vals = [v for v in values if v is not None and math.isfinite(v)]
    return float(np.mean(vals)) if vals else float("nan")


def evaluate(rhat: np.ndarray, report_prob: np.ndarray, test: ObservationPanel,
             demographics: Demographics, proxy: bool = False, budget: float = 0.1,
             true_coefs: np.ndarray | None = None, est_coefs: np.ndarray | None = None
             ) -> MetricReport:
    """Every metric on a test window.

    ``rhat`` and ``report_prob`` are (nodes, types). With ``proxy`` the rating
    predictions are replaced by the negated report probability; RMSE and ECE
    are then not on the rating scale and are left undefined.
    """
    m = {}
    freq = test.reports.mean(axis=2)
    rep_types = np.repeat(np.arange(test.n_types)[None, :], test.n, axis=0)
    rc = pair_correlation(report_prob.ravel(), freq.ravel(), rep_types.ravel())
    m["report"] = {
        "corr": rc.r, "p_value": rc.p, "rmse": pair_rmse(report_prob, freq),
        "per_type_corr": rc.per_type,
        "per_type_rmse": {k: pair_rmse(report_prob[:, k], freq[:, k]) for k in range(test.n_types)},
        "share_types_p_below_0.001": _mean_defined([float(p < 1e-3) for p in rc.per_type_p.values()
                                                    if math.isfinite(p)]),
    }

    means, counts = test.pair_rating_means()
    nodes, types = np.nonzero(counts > 0)
    truth = means[nodes, types]
    pred = -report_prob[nodes, types] if proxy else rhat[nodes, types]
    rt = pair_correlation(pred, truth, types)
    rating = {"corr": rt.r, "p_value": rt.p, "per_type_corr": rt.per_type,
              "per_type_p_value": rt.per_type_p, "n_pairs": int(truth.size), "proxy": proxy}
    per_type_idx = {k: np.flatnonzero(types == k) for k in np.unique(types).tolist()}
    if proxy:
        rating["rmse"] = float("nan")
        rating["ece"] = float("nan")
    else:
        rating["rmse"] = pair_rmse(pred, truth) if truth.size else float("nan")
        rating["per_type_rmse"] = {k: pair_rmse(pred[i], truth[i]) for k, i in per_type_idx.items()}
        rating["ece"] = _mean_defined([expected_calibration_error(pred[i], truth[i])
                                       for i in per_type_idx.values()])
    rating["topk_coverage"] = {
        str(k): _mean_defined([topk_coverage(pred[i], truth[i], k) for i in per_type_idx.values()
                               if i.size >= k]) for k in TOPK
    }
    m["rating"] = rating

    income = demographics.raw_column("log_median_income")
    white = demographics.raw_column("pct_white")
    gaps = {}
    for spec in (income_terciles(income), race_groups(white)):
        corr_gap = {g: [] for g in spec.groups}
        ece_gap = {g: [] for g in spec.groups}
        for k, i in per_type_idx.items():
            cg = subgroup_gaps(lambda a, b: pearson(a, b)[0], spec, pred[i], truth[i], nodes[i])
            for g, v in cg.items():
                corr_gap[g].append(v)
            if not proxy:
                eg = subgroup_gaps(expected_calibration_error_or_nan, spec, pred[i], truth[i], nodes[i])
                for g, v in eg.items():
                    ece_gap[g].append(v)
        gaps[spec.name] = {
            "corr_gap": {g: _mean_defined(v) for g, v in corr_gap.items()},
            "ece_gap": {g: _mean_defined(v) for g, v in ece_gap.items()},
            "group_sizes": {g: int(spec.members(g).size) for g in spec.groups},
        }
    m["subgroup_gaps"] = gaps

    rated = sorted(per_type_idx)
    node_pred = -report_prob if proxy else rhat
    m["representation_ratio"] = {
        "budget": budget,
        "income": _mean_defined([representation_ratio(node_pred[:, k], income, budget) for k in rated]),
        "pct_white": _mean_defined([representation_ratio(node_pred[:, k], white, budget) for k in rated]),
    }
    if true_coefs is not None and est_coefs is not None:
        r, mae, _ = coefficient_recovery(est_coefs, true_coefs)
        m["coefficient_recovery"] = {"corr": r, "mae": mae, "n_components": int(np.size(true_coefs))}
    return MetricReport(m)


def expected_calibration_error_or_nan(pred, truth) -> float:
    return expected_calibration_error(pred, truth) if np.size(pred) else float("nan")

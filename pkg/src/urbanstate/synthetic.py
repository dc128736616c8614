"""Synthetic ratings: invert the reporting model, draw coefficients, subsample.

Two modes:

* semi-synthetic - keep observed report indicators and the observed rating
  sparsity pattern, replace every rating by the value that makes the logistic
  reporting model reproduce the (clamped) empirical report frequency;
* fully synthetic - also draw a graph, demographics and latent ratings, then
  sample every report indicator from the logistic reporting model.
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit, logit

from .data_model import (FEATURE_NAMES, Demographics, IncidentCatalog, ObservationPanel,
                         SpatialGraph, WeekSplit, build_graph, normalize_demographics,
                         report_frequencies)

# Mean multivariate reporting coefficients reported for the NYC rated types,
# ordered as FEATURE_NAMES, and the mean coefficient on the true rating.
NYC_THETA_MEAN = (0.148, 0.234, 0.174, -0.126, -0.072, 0.155)
NYC_ALPHA_MEAN = -0.193


class SyntheticError(ValueError):
    pass


@dataclass
class ReportingCoefficients:
    alpha: np.ndarray  # (types,)
    theta: np.ndarray  # (types, D + 1); last column is the intercept

    def stacked(self, types=None) -> np.ndarray:
        """Rows ``[alpha_k, theta_k...]`` for the requested types."""
        idx = np.arange(self.alpha.shape[0]) if types is None else np.asarray(types)
        return np.column_stack([self.alpha[idx], self.theta[idx]])

    def to_dict(self) -> dict:
        return {"alpha": self.alpha.tolist(), "theta": self.theta.tolist()}


@dataclass
class GeneratorSpec:
    alpha_mean: float = NYC_ALPHA_MEAN
    theta_mean: tuple[float, ...] = NYC_THETA_MEAN + (-2.0,)
    sd: float = 0.1
    eps: float | None = None  # frequency clamp; None -> 1 / (2 * window weeks)
    seed: int = 0

    def __post_init__(self):
        if self.sd < 0:
            raise SyntheticError("sd must be >= 0")
        if self.eps is not None and not 0 < self.eps < 0.5:
            raise SyntheticError("eps must lie in (0, 0.5)")


def fit_logistic(ratings, X, labels) -> np.ndarray:
    """Unpenalised logistic regression of ``labels`` on ``[rating, X]``; X carries the intercept."""
    from sklearn.linear_model import LogisticRegression

    design = np.column_stack([np.asarray(ratings, dtype=np.float64), np.asarray(X, dtype=np.float64)])
    clf = LogisticRegression(penalty=None, fit_intercept=False, max_iter=5000, tol=1e-10)
    clf.fit(design, np.asarray(labels))
    return clf.coef_.ravel().copy()


def rating_from_frequency(freq, theta_x, alpha, intercept=0.0, eps: float | None = None):
    """Invert ``sigmoid(alpha r + theta_x + intercept) = clamp(freq)`` for r."""
    f = np.asarray(freq, dtype=np.float64)
    if eps is not None:
        f = np.clip(f, eps, 1.0 - eps)
    return (logit(f) - theta_x - intercept) / alpha


def fit_reference_coefficients(panel: ObservationPanel, demographics: Demographics
                               ) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """Unpenalised logistic fit ``report ~ rating + X`` per rated type; mean over types.

    Returns the mean vector ``[alpha, theta...]`` (intercept last) and the per-type fits.
    """
    X = demographics.values
    fits = {}
    for k in panel.types_with_ratings().tolist():
        m = panel.obs_type == k
        y = panel.obs_report[m]
        if np.unique(y).size < 2:
            warnings.warn(f"type {k}: report labels are single-class, excluded from the reference fit")
            continue
        fits[k] = fit_logistic(panel.obs_rating[m], X[panel.obs_node[m]], y)
    if not fits:
        raise SyntheticError("no rated type has both report labels present")
    return np.mean(np.stack(list(fits.values())), axis=0), fits


def draw_type_coefficients(alpha_mean: float, theta_mean, n_types: int, sd: float = 0.1,
                           seed: int = 0) -> ReportingCoefficients:
    """Independent Gaussian draws around the mean for every component of every type."""
    if sd < 0:
        raise SyntheticError("sd must be >= 0")
    rng = np.random.default_rng(seed)
    theta_mean = np.asarray(theta_mean, dtype=np.float64)
    theta = rng.normal(theta_mean, sd, size=(n_types, theta_mean.shape[0])) if sd > 0 else \
        np.tile(theta_mean, (n_types, 1))
    alpha = rng.normal(alpha_mean, sd, size=n_types) if sd > 0 else np.full(n_types, float(alpha_mean))
    return ReportingCoefficients(alpha, theta)


@dataclass
class GeneratedRatings:
    ratings: np.ndarray  # aligned with the panel's observation records
    alpha: np.ndarray  # calibrated, nan for types without records
    intercept: np.ndarray
    theta: np.ndarray  # drawn theta with the calibrated intercept in the last column
    pair_node: np.ndarray
    pair_type: np.ndarray
    pair_rating: np.ndarray
    pair_freq: np.ndarray  # clamped empirical report frequency
    eps: float


def generate_ratings(panel: ObservationPanel, demographics: Demographics,
                     coefs: ReportingCoefficients, eps: float | None = None) -> GeneratedRatings:
    """Ratings that make the reporting model reproduce the window's report frequencies.

    ``panel`` is already restricted to the window; its observation records are
    the sparsity pattern. Per type: ``z = logit(clamp(freq)) - theta_demo . X``,
    intercept ``= mean(z)``, ``alpha = -sd(z)``, ``r = (z - intercept) / alpha``
    over the distinct (node, type) pairs of the pattern.
    """
    T = panel.n_weeks
    eps = 1.0 / (2.0 * T) if eps is None else float(eps)
    if not 0 < eps < 0.5:
        raise SyntheticError("eps must lie in (0, 0.5)")
    freq = np.clip(report_frequencies(panel), eps, 1.0 - eps)
    Xd = demographics.features
    tau = panel.n_types
    alpha = np.full(tau, np.nan)
    intercept = np.full(tau, np.nan)
    theta = coefs.theta.copy()
    node_rating = np.full((panel.n, tau), np.nan)
    pn, pt, pr, pf = [], [], [], []
    for k in panel.types_with_ratings().tolist():
        nodes = np.unique(panel.obs_node[panel.obs_type == k])
        z = logit(freq[nodes, k]) - Xd[nodes] @ coefs.theta[k, :-1]
        sd = z.std()
        if nodes.size < 2 or sd <= 1e-12:
            raise SyntheticError(f"degenerate type {k}: no spread in logit frequencies")
        intercept[k] = z.mean()
        alpha[k] = -sd
        theta[k, -1] = intercept[k]
        r = (z - intercept[k]) / alpha[k]
        node_rating[nodes, k] = r
        pn.append(nodes)
        pt.append(np.full(nodes.size, k))
        pr.append(r)
        pf.append(freq[nodes, k])
    cat = (lambda xs, dt: np.concatenate(xs) if xs else np.array([], dtype=dt))
    return GeneratedRatings(
        ratings=node_rating[panel.obs_node, panel.obs_type],
        alpha=alpha, intercept=intercept, theta=theta,
        pair_node=cat(pn, np.int64), pair_type=cat(pt, np.int64), pair_rating=cat(pr, float),
        pair_freq=cat(pf, float), eps=eps,
    )


def round_trip_error(gen: GeneratedRatings, demographics: Demographics) -> float:
    """max |sigmoid(alpha r + theta . X) - clamped frequency| over generated pairs."""
    if gen.pair_node.size == 0:
        return 0.0
    k, i = gen.pair_type, gen.pair_node
    z = gen.alpha[k] * gen.pair_rating + np.einsum("rj,rj->r", gen.theta[k], demographics.values[i])
    return float(np.max(np.abs(expit(z) - gen.pair_freq)))


def make_semisynthetic(panel: ObservationPanel, demographics: Demographics, split: WeekSplit,
                       coefs: ReportingCoefficients, eps: float | None = None
                       ) -> tuple[ObservationPanel, dict]:
    """Replace ratings in the train and test windows, each generated from its own window.

    Records outside both windows are dropped. Returns the panel and a truth sidecar.
    """
    ratings = np.full(panel.n_obs, np.nan)
    truth = {"windows": {}}
    for name, (lo, hi) in (("train", split.train), ("test", split.test)):
        if hi <= lo:
            continue
        sub = panel.window(lo, hi)
        gen = generate_ratings(sub, demographics, coefs, eps)
        m = (panel.obs_week >= lo) & (panel.obs_week < hi)
        ratings[m] = gen.ratings
        truth["windows"][name] = {
            "weeks": [lo, hi],
            "alpha": _nan_to_none(gen.alpha),
            "theta": gen.theta.tolist(),
            "intercept": _nan_to_none(gen.intercept),
            "eps": gen.eps,
            "round_trip_max_error": round_trip_error(gen, demographics),
        }
    keep = np.isfinite(ratings)
    out = panel.replace_obs(keep=keep, obs_rating=ratings)
    truth["rated_types"] = out.types_with_ratings().tolist()
    return out, truth


def _nan_to_none(a) -> list:
    return [None if not np.isfinite(v) else float(v) for v in np.asarray(a, dtype=float)]


def subsample_ratings(panel: ObservationPanel, k: int, fraction: float, seed: int = 0,
                      window: tuple[int, int] | None = None) -> ObservationPanel:
    """Keep a uniform random ``round(fraction * count)`` of type ``k``'s records.

    Only records of type ``k`` (inside ``window`` when given) are touched.
    """
    if not 0.0 <= fraction <= 1.0:
        raise SyntheticError("fraction must lie in [0, 1]")
    cand = panel.obs_type == k
    if window is not None:
        cand &= (panel.obs_week >= window[0]) & (panel.obs_week < window[1])
    idx = np.flatnonzero(cand)
    n_keep = int(np.floor(fraction * idx.size + 0.5))
    rng = np.random.default_rng(seed)
    chosen = rng.choice(idx, size=n_keep, replace=False) if n_keep < idx.size else idx
    keep = ~cand
    keep[chosen] = True
    return panel.replace_obs(keep=keep)


# -- fully synthetic panels --------------------------------------------------


@dataclass
class SyntheticSpec:
    """Knobs for a fully synthetic panel.

    Latent ratings per type mix a low-rank spatial component shared across
    types (weight ``shared_fraction`` of the variance) with a type-specific
    field; ``specific_smoothing`` controls how spatially smooth that field is.
    """

    n_nodes: int = 200
    n_types: int = 20
    n_rated: int = 5
    n_weeks: int = 100
    rank: int = 4
    shared_fraction: float = 0.5
    shared_smoothing: int = 3
    specific_smoothing: int = 1
    subunits_per_node: int = 3
    rating_rate: float = 0.15  # P(a rated type is inspected in a node-week)
    subunit_noise: float = 0.25
    alpha_mean: float = NYC_ALPHA_MEAN
    theta_mean: tuple[float, ...] = NYC_THETA_MEAN + (-2.0,)
    coef_sd: float = 0.1
    alpha_overrides: dict = field(default_factory=dict)  # type id -> alpha
    rated_types: tuple[int, ...] | None = None
    knn: int = 4
    start_date: str = "2021-01-04"
    seed: int = 0


def _smooth(A_hat, x, steps):
    for _ in range(steps):
        x = A_hat @ x
    return np.asarray(x)


def _standardize(x, axis=0):
    return (x - x.mean(axis=axis, keepdims=True)) / x.std(axis=axis, keepdims=True)


def knn_graph(points: np.ndarray, k: int) -> SpatialGraph:
    from scipy.spatial import cKDTree

    _, nbr = cKDTree(points).query(points, k=k + 1)
    edges = {(min(i, j), max(i, j)) for i, row in enumerate(nbr.tolist()) for j in row[1:] if i != j}
    return build_graph(sorted(edges), points.shape[0])


def synthetic_demographics(A_hat, n: int, rng) -> np.ndarray:
    """Raw tract features with spatial structure and plausible ranges."""
    base = _standardize(_smooth(A_hat, rng.normal(size=(n, 3)), 4))
    wealth, density, age = base[:, 0], base[:, 1], base[:, 2]
    noise = lambda: rng.normal(size=n) * 0.5  # noqa: E731
    z = np.column_stack([
        density + noise(),
        0.8 * wealth + noise(),
        0.5 * density - 0.5 * wealth + noise(),
        wealth + noise(),
        0.7 * wealth + noise(),
        age - 0.3 * density + noise(),
    ])
    z = _standardize(z)
    raw = np.column_stack([
        9.5 + 1.0 * z[:, 0],
        np.clip(36 + 15 * z[:, 1], 1, 99),
        np.clip(61 + 15 * z[:, 2], 1, 99),
        11.1 + 0.45 * z[:, 3],
        np.clip(30 + 22 * z[:, 4], 0.5, 99.5),
        38 + 5 * z[:, 5],
    ])
    return raw


def make_synthetic_panel(spec: SyntheticSpec):
    """Graph, demographics, panel with sampled reports, and the ground truth.

    Returns ``(panel, graph, demographics, truth)`` where ``truth`` holds the
    latent ratings and the coefficients reports were drawn from.
    """
    rng = np.random.default_rng(spec.seed)
    n, tau, T = spec.n_nodes, spec.n_types, spec.n_weeks
    graph = knn_graph(rng.uniform(size=(n, 2)), spec.knn)
    A_hat = graph.normalized_adjacency()
    demo = normalize_demographics(synthetic_demographics(A_hat, n, rng), FEATURE_NAMES)
    X = demo.values

    shared = _smooth(A_hat, rng.normal(size=(n, spec.rank)), spec.shared_smoothing)
    shared = _standardize(_standardize(shared) @ rng.normal(size=(spec.rank, tau)))
    specific = _standardize(_smooth(A_hat, rng.normal(size=(n, tau)), spec.specific_smoothing))
    w = spec.shared_fraction
    latent = _standardize(np.sqrt(w) * shared + np.sqrt(1 - w) * specific)

    theta_mean = np.asarray(spec.theta_mean, dtype=float)
    if theta_mean.shape[0] != X.shape[1]:
        raise SyntheticError(f"theta_mean needs {X.shape[1]} entries (features + intercept)")
    coefs = draw_type_coefficients(spec.alpha_mean, theta_mean, tau, spec.coef_sd,
                                   seed=int(rng.integers(2**31)))
    for k, a in spec.alpha_overrides.items():
        coefs.alpha[int(k)] = float(a)

    if spec.rated_types is not None:
        rated = np.array(sorted(spec.rated_types), dtype=np.int64)
    else:
        rated = np.sort(rng.choice(tau, size=spec.n_rated, replace=False))

    logits = latent * coefs.alpha[None, :] + X @ coefs.theta.T
    reports = rng.random((n, tau, T)) < expit(logits)[:, :, None]

    S = spec.subunits_per_node
    cols = {c: [] for c in ("sub", "node", "type", "week", "rating", "report")}
    for k in rated.tolist():
        inspected = rng.random((n, T)) < spec.rating_rate
        ii, tt = np.nonzero(inspected)
        counts = 1 + rng.binomial(S - 1, 0.5, size=ii.size)
        for i, t, c in zip(ii.tolist(), tt.tolist(), counts.tolist()):
            subs = rng.choice(S, size=c, replace=False)
            for s in np.sort(subs).tolist():
                r = latent[i, k] + spec.subunit_noise * rng.normal()
                p = expit(coefs.alpha[k] * r + X[i] @ coefs.theta[k])
                cols["sub"].append(i * S + s)
                cols["node"].append(i)
                cols["type"].append(k)
                cols["week"].append(t)
                cols["rating"].append(r)
                cols["report"].append(int(rng.random() < p))
    catalog = IncidentCatalog(tuple(f"type_{k:02d}" for k in range(tau)),
                              tuple(k in set(rated.tolist()) for k in range(tau)),
                              tuple("SYN" for _ in range(tau)))
    panel = ObservationPanel(
        reports=reports,
        obs_sub=np.array(cols["sub"], dtype=np.int64),
        obs_node=np.array(cols["node"], dtype=np.int64),
        obs_type=np.array(cols["type"], dtype=np.int64),
        obs_week=np.array(cols["week"], dtype=np.int64),
        obs_rating=np.array(cols["rating"], dtype=float),
        obs_report=np.array(cols["report"], dtype=np.int64),
        catalog=catalog,
        start_date=spec.start_date,
        meta={"synthetic": "full", "seed": spec.seed},
    )
    spec_dict = asdict(spec)
    spec_dict["alpha_overrides"] = {str(k): v for k, v in spec.alpha_overrides.items()}
    truth = {
        "mode": "full",
        "alpha": coefs.alpha.tolist(),
        "theta": coefs.theta.tolist(),
        "rated_types": rated.tolist(),
        "latent_ratings": latent.tolist(),
        "spec": spec_dict,
    }
    return panel, graph, demo, truth

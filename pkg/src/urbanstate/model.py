"""GCN node embeddings, type embeddings and the logistic reporting head.

The forward and backward passes are written out by hand in numpy so that
training needs no autodiff framework. The node input is one-hot, so the first
graph convolution reduces to ``A_hat @ W1``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data_model import Demographics, ObservationPanel, SpatialGraph

CHECKPOINT_VERSION = 1

PARAM_NAMES = (
    "gcn.W1", "gcn.bn1.weight", "gcn.bn1.bias",
    "gcn.W2", "gcn.bn2.weight", "gcn.bn2.bias",
    "type_table", "head.alpha", "head.theta",
)
HEAD_PARAMS = ("head.alpha", "head.theta")
BUFFER_NAMES = (
    "gcn.bn1.running_mean", "gcn.bn1.running_var",
    "gcn.bn2.running_mean", "gcn.bn2.running_var",
)


class ModelError(ValueError):
    pass


@dataclass
class ModelShape:
    n: int
    n_types: int
    n_coef: int  # demographic features + intercept
    hidden: int
    emb: int = 50
    slope: float = 0.01
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1


def _leaky(x, slope):
    return np.where(x > 0, x, slope * x)


def _bn_forward(h, gamma, beta, rm, rv, eps, train):
    if train:
        mu = h.mean(axis=0)
        var = h.var(axis=0)
    else:
        mu, var = rm, rv
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (h - mu) * inv
    return gamma * xhat + beta, (xhat, inv, mu, var)


def _bn_backward(dout, gamma, cache, train):
    xhat, inv, _, _ = cache
    dgamma = np.sum(dout * xhat, axis=0)
    dbeta = np.sum(dout, axis=0)
    if train:
        dh = gamma * inv * (dout - dout.mean(axis=0) - xhat * np.mean(dout * xhat, axis=0))
    else:
        dh = dout * gamma * inv
    return dh, dgamma, dbeta


@dataclass
class UrbanModel:
    shape: ModelShape
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    own_coef: np.ndarray  # types that use their own [alpha, theta]
    rated: np.ndarray  # types averaged into the Case 3 mean coefficients
    meta: dict = field(default_factory=dict)

    # -- construction ---------------------------------------------------------

    @classmethod
    def init(cls, shape: ModelShape, rated, own_coef=None, seed: int = 0) -> "UrbanModel":
        """Gaussian fan-in init for weights; zero reporting head."""
        rng = np.random.default_rng(seed)
        n, h, e = shape.n, shape.hidden, shape.emb
        params = {
            "gcn.W1": rng.normal(0.0, 1.0 / np.sqrt(n), (n, h)),
            "gcn.bn1.weight": np.ones(h),
            "gcn.bn1.bias": np.zeros(h),
            "gcn.W2": rng.normal(0.0, 1.0 / np.sqrt(h), (h, e)),
            "gcn.bn2.weight": np.ones(e),
            "gcn.bn2.bias": np.zeros(e),
            "type_table": rng.normal(0.0, 1.0 / np.sqrt(e), (shape.n_types, e)),
            "head.alpha": np.zeros(shape.n_types),
            "head.theta": np.zeros((shape.n_types, shape.n_coef)),
        }
        buffers = {
            "gcn.bn1.running_mean": np.zeros(h), "gcn.bn1.running_var": np.ones(h),
            "gcn.bn2.running_mean": np.zeros(e), "gcn.bn2.running_var": np.ones(e),
        }
        rated = np.asarray(rated, dtype=bool)
        own = rated.copy() if own_coef is None else np.asarray(own_coef, dtype=bool)
        return cls(shape, params, buffers, own, rated)

    def copy(self) -> "UrbanModel":
        return UrbanModel(
            self.shape,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            self.own_coef.copy(), self.rated.copy(), dict(self.meta),
        )

    # -- embeddings -----------------------------------------------------------

    def embed(self, A_hat, train: bool = False, update_stats: bool = False):
        """Node embeddings (n, emb) and the cache needed by :meth:`embed_backward`."""
        s, p, b = self.shape, self.params, self.buffers
        if A_hat.shape != (s.n, s.n):
            raise ModelError(f"graph has {A_hat.shape[0]} nodes, model expects {s.n}")
        z1 = A_hat @ p["gcn.W1"]
        h1 = _leaky(z1, s.slope)
        o1, c1 = _bn_forward(h1, p["gcn.bn1.weight"], p["gcn.bn1.bias"],
                             b["gcn.bn1.running_mean"], b["gcn.bn1.running_var"], s.bn_eps, train)
        m1 = A_hat @ o1
        z2 = m1 @ p["gcn.W2"]
        h2 = _leaky(z2, s.slope)
        o2, c2 = _bn_forward(h2, p["gcn.bn2.weight"], p["gcn.bn2.bias"],
                             b["gcn.bn2.running_mean"], b["gcn.bn2.running_var"], s.bn_eps, train)
        if train and update_stats:
            n = s.n
            mom = s.bn_momentum
            for tag, c in (("bn1", c1), ("bn2", c2)):
                mu, var = c[2], c[3]
                unbiased = var * n / max(n - 1, 1)
                b[f"gcn.{tag}.running_mean"] = (1 - mom) * b[f"gcn.{tag}.running_mean"] + mom * mu
                b[f"gcn.{tag}.running_var"] = (1 - mom) * b[f"gcn.{tag}.running_var"] + mom * unbiased
        cache = dict(A=A_hat, z1=z1, c1=c1, m1=m1, z2=z2, c2=c2, train=train)
        return o2, cache

    def embed_backward(self, cache, d_emb) -> dict[str, np.ndarray]:
        s, p = self.shape, self.params
        train = cache["train"]
        A = cache["A"]
        dh2, dg2, db2 = _bn_backward(d_emb, p["gcn.bn2.weight"], cache["c2"], train)
        dz2 = dh2 * np.where(cache["z2"] > 0, 1.0, s.slope)
        dW2 = cache["m1"].T @ dz2
        dm1 = dz2 @ p["gcn.W2"].T
        do1 = A.T @ dm1
        dh1, dg1, db1 = _bn_backward(do1, p["gcn.bn1.weight"], cache["c1"], train)
        dz1 = dh1 * np.where(cache["z1"] > 0, 1.0, s.slope)
        dW1 = A.T @ dz1
        return {"gcn.W1": np.asarray(dW1), "gcn.bn1.weight": dg1, "gcn.bn1.bias": db1,
                "gcn.W2": np.asarray(dW2), "gcn.bn2.weight": dg2, "gcn.bn2.bias": db2}

    # -- predictions ----------------------------------------------------------

    def rating_matrix(self, emb) -> np.ndarray:
        """Predicted rating for every (node, type): row-wise dot products."""
        return emb @ self.params["type_table"].T

    def predict_ratings(self, A_hat) -> np.ndarray:
        emb, _ = self.embed(A_hat, train=False)
        return self.rating_matrix(emb)

    def head(self) -> "ReportingHead":
        return ReportingHead(self.params["head.alpha"], self.params["head.theta"],
                             self.own_coef, self.rated)

    def report_probabilities(self, A_hat, X) -> np.ndarray:
        """Node-level P(report) for every (node, type) using predicted ratings."""
        return self.head().node_probabilities(self.predict_ratings(A_hat), X)

    # -- checkpoint -----------------------------------------------------------

    def save(self, path) -> None:
        header = {
            "format": "urbanstate-checkpoint",
            "version": CHECKPOINT_VERSION,
            "shape": self.shape.__dict__,
            "tensors": {k: list(v.shape) for k, v in {**self.params, **self.buffers}.items()},
            "order": "C",
            "meta": self.meta,
        }
        arrays = {k: np.ascontiguousarray(v) for k, v in {**self.params, **self.buffers}.items()}
        arrays["own_coef"] = self.own_coef
        arrays["rated"] = self.rated
        arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
        with open(Path(path), "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "UrbanModel":
        with np.load(Path(path)) as z:
            header = json.loads(bytes(z["__header__"]).decode())
            if header.get("format") != "urbanstate-checkpoint":
                raise ModelError(f"{path} is not a model checkpoint")
            if header["version"] > CHECKPOINT_VERSION:
                raise ModelError(f"checkpoint version {header['version']} is newer than supported")
            params = {k: z[k].copy() for k in PARAM_NAMES}
            buffers = {k: z[k].copy() for k in BUFFER_NAMES}
            own, rated = z["own_coef"].copy(), z["rated"].copy()
        return cls(ModelShape(**header["shape"]), params, buffers, own, rated, header.get("meta", {}))


def predict_rating(i: int, k: int, node_emb: np.ndarray, type_table: np.ndarray) -> float:
    return float(node_emb[i] @ type_table[k])


def mean_reporting_coefficients(alpha, theta, rated) -> tuple[float, np.ndarray]:
    rated = np.asarray(rated, dtype=bool)
    if not rated.any():
        raise ModelError("no rated types to average reporting coefficients over")
    return float(np.mean(np.asarray(alpha)[rated])), np.mean(np.asarray(theta)[rated], axis=0)


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


@dataclass
class ReportingHead:
    alpha: np.ndarray
    theta: np.ndarray
    own_coef: np.ndarray
    rated: np.ndarray

    def means(self) -> tuple[float, np.ndarray]:
        return mean_reporting_coefficients(self.alpha, self.theta, self.rated)

    def effective(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-type coefficients actually used at node level, and the mask of types on the mean."""
        on_mean = ~np.asarray(self.own_coef, dtype=bool)
        a = np.array(self.alpha, dtype=np.float64)
        th = np.array(self.theta, dtype=np.float64)
        if on_mean.any():
            a_bar, th_bar = self.means()
            a[on_mean] = a_bar
            th[on_mean] = th_bar
        return a, th, on_mean

    def case(self, k: int, rating_observed: bool) -> int:
        if rating_observed:
            return 1
        return 2 if self.own_coef[k] else 3

    def node_probabilities(self, rhat: np.ndarray, X: np.ndarray) -> np.ndarray:
        a, th, _ = self.effective()
        return sigmoid(rhat * a[None, :] + X @ th.T)


def predict_report_probability(panel: ObservationPanel, head: ReportingHead, rhat: np.ndarray,
                               X: np.ndarray, node: int, k: int, week: int,
                               sub_unit: int | None = None) -> float:
    """P(report) for one key, dispatching on the observation mask only.

    Case 1: the key names a rated sub-unit record -> true rating, own coefficients.
    Case 2/3: node-level cell without a rating -> predicted rating with own or mean coefficients.
    """
    if sub_unit is not None:
        m = ((panel.obs_sub == sub_unit) & (panel.obs_node == node) & (panel.obs_type == k)
             & (panel.obs_week == week))
        idx = np.flatnonzero(m)
        if idx.size == 0:
            raise ModelError(f"no rating/report record for sub-unit {sub_unit}, type {k}, week {week}")
        r = float(panel.obs_rating[idx[0]])
        return float(sigmoid(head.alpha[k] * r + head.theta[k] @ X[node]))
    a, th, _ = head.effective()
    return float(sigmoid(a[k] * rhat[node, k] + th[k] @ X[node]))


def make_shape(graph: SpatialGraph, demographics: Demographics, n_types: int,
               hidden: int | None = None, emb: int = 50) -> ModelShape:
    return ModelShape(n=graph.n, n_types=n_types, n_coef=demographics.values.shape[1],
                      hidden=hidden or graph.n, emb=emb)

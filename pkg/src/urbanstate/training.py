"""Batching, the optimisation loop and a finite-difference gradient check."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .data_model import Demographics, ObservationPanel, SpatialGraph, WeekSplit
from .model import HEAD_PARAMS, PARAM_NAMES, UrbanModel, make_shape
from .objective import (COMPONENTS, Batch, LossWeights, VariantConfig, theta_penalty,
                        total_loss, variant_config)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.01
    batch_size: int = 16000
    epochs: int = 200
    seed: int = 0
    variant: str = "full"
    validation: str = "best"  # "best": keep the best validation epoch; "last": keep the final one
    hidden: int | None = None
    emb: int = 50
    target_type: int | None = None  # type whose ratings were subsampled

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.validation not in ("best", "last"):
            raise ValueError("validation must be 'best' or 'last'")


# -- rows and batches --------------------------------------------------------


@dataclass
class TrainingRows:
    """Observed-rating records and node-level unobserved cells for one window."""

    obs_node: np.ndarray
    obs_type: np.ndarray
    obs_label: np.ndarray
    obs_rating: np.ndarray
    unobs_cell: np.ndarray  # flat indices into the (n, types, weeks) report array
    unobs_label: np.ndarray
    shape: tuple[int, int, int]

    @property
    def n_observed(self) -> int:
        return int(self.obs_node.shape[0])

    @property
    def n_unobserved(self) -> int:
        return int(self.unobs_cell.shape[0])

    def batch(self, observed: bool, idx: np.ndarray) -> Batch:
        if observed:
            return Batch(True, self.obs_node[idx], self.obs_type[idx], self.obs_label[idx],
                         self.obs_rating[idx])
        cell = self.unobs_cell[idx]
        n, tau, T = self.shape
        return Batch(False, cell // (tau * T), (cell // T) % tau, self.unobs_label[idx])


def training_rows(panel: ObservationPanel, use_ratings: bool = True) -> TrainingRows:
    if use_ratings:
        unobs = ~panel.observed_cells()
        obs = (panel.obs_node, panel.obs_type, panel.obs_report.astype(np.float64), panel.obs_rating)
    else:
        unobs = np.ones(panel.reports.shape, dtype=bool)
        e = np.array([], dtype=np.int64)
        obs = (e, e, np.array([]), np.array([]))
    cell = np.flatnonzero(unobs.ravel())
    return TrainingRows(*obs, unobs_cell=cell,
                        unobs_label=panel.reports.ravel()[cell].astype(np.float64),
                        shape=panel.reports.shape)


def build_batches(n_observed: int, n_unobserved: int, batch_size: int, seed: int,
                  epoch: int = 0) -> list[tuple[bool, np.ndarray]]:
    """Separate observed/unobserved batches, rows shuffled, batch order shuffled."""
    rng = np.random.default_rng([seed, epoch])
    batches = []
    for observed, count in ((True, n_observed), (False, n_unobserved)):
        order = rng.permutation(count)
        for s in range(0, count, batch_size):
            batches.append((observed, order[s : s + batch_size]))
    perm = rng.permutation(len(batches))
    return [batches[j] for j in perm]


# -- gradients ---------------------------------------------------------------


def batch_objective(model: UrbanModel, A_hat, X: np.ndarray, batch: Batch, weights: LossWeights,
                    target_type: int | None = None, train_mode: bool = True,
                    update_stats: bool = False, with_grad: bool = True):
    """Weighted loss of one batch, its components and the gradient of every parameter."""
    emb, cache = model.embed(A_hat, train=train_mode, update_stats=update_stats)
    rhat = model.rating_matrix(emb)
    p = model.params
    alpha, theta = p["head.alpha"], p["head.theta"]
    a_eff, th_eff, on_mean = model.head().effective()
    comps = dict.fromkeys(COMPONENTS, 0.0)
    tau = alpha.shape[0]
    d_alpha = np.zeros(tau)
    d_theta = np.zeros_like(theta)
    if batch.observed:
        bce, sq, d_rhat, d_a, d_th = kernels.observed_rows(
            batch.nodes, batch.types, batch.labels, batch.ratings, rhat, alpha, theta, X,
            weights.obs, weights.rating)
        comps["obs"], comps["rating"] = bce, sq
        d_alpha += d_a
        d_theta += d_th
    else:
        bce, reg, d_rhat, d_a, d_th = kernels.unobserved_rows(
            batch.nodes, batch.types, batch.labels, rhat, a_eff, th_eff, X, weights.unobs,
            weights.reg)
        comps["unobs"], comps["reg"] = bce, reg
        own = ~on_mean
        d_alpha[own] += d_a[own]
        d_theta[own] += d_th[own]
        if on_mean.any() and model.rated.any():
            r = model.rated
            d_alpha[r] += d_a[on_mean].sum() / r.sum()
            d_theta[r] += d_th[on_mean].sum(axis=0) / r.sum()
    if target_type is not None:
        comps["theta_reg"] = theta_penalty(theta[target_type])
        comps["alpha_relu"] = max(0.0, float(alpha[target_type]))
    loss = total_loss(comps, weights)
    if not with_grad:
        return loss, comps, None
    grads = model.embed_backward(cache, d_rhat @ p["type_table"])
    grads["type_table"] = d_rhat.T @ emb
    grads["head.alpha"] = d_alpha
    grads["head.theta"] = d_theta
    if target_type is not None:
        grads["head.theta"][target_type, :-1] += 2.0 * weights.theta_reg * theta[target_type, :-1]
        if alpha[target_type] > 0:
            grads["head.alpha"][target_type] += weights.alpha_relu
    return loss, comps, grads


def gradient_check(model: UrbanModel, A_hat, X: np.ndarray, batches: list[Batch],
                   weights: LossWeights, target_type: int | None = None, eps: float = 1e-5,
                   grad_fn=None) -> tuple[float, dict[str, float]]:
    """Compare analytic gradients with central differences, group by group.

    The error per group is ``|g_a - g_fd| / (|g_a| + |g_fd|)`` in the L2 norm;
    the maximum over groups is returned with the per-group table. ``grad_fn``
    lets a caller substitute the analytic gradient (used for mutation tests).
    """
    model = model.copy()

    def loss_at(m):
        return sum(batch_objective(m, A_hat, X, b, weights, target_type, with_grad=False)[0]
                   for b in batches)

    if grad_fn is None:
        analytic = {k: np.zeros_like(v) for k, v in model.params.items()}
        for b in batches:
            _, _, g = batch_objective(model, A_hat, X, b, weights, target_type)
            for k in analytic:
                analytic[k] += g[k]
    else:
        analytic = grad_fn(model)
    errors = {}
    for name in PARAM_NAMES:
        param = model.params[name]
        numeric = np.zeros_like(param)
        flat = param.reshape(-1)
        nflat = numeric.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + eps
            up = loss_at(model)
            flat[j] = old - eps
            down = loss_at(model)
            flat[j] = old
            nflat[j] = (up - down) / (2 * eps)
        a = analytic[name]
        denom = np.linalg.norm(a) + np.linalg.norm(numeric)
        errors[name] = 0.0 if denom < 1e-12 else float(np.linalg.norm(a - numeric) / denom)
    return max(errors.values()), errors


# -- optimiser ---------------------------------------------------------------


class Adam:
    """Adam with per-element step counts so partially frozen tensors stay exact."""

    def __init__(self, params: dict[str, np.ndarray], lr=0.01, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = {k: np.zeros(v.shape, dtype=np.int64) for k, v in params.items()}

    def step(self, params, grads, rows: dict[str, np.ndarray] | None = None) -> None:
        """Update every tensor; ``rows[name]`` (bool over axis 0) restricts which rows move."""
        rows = rows or {}
        for k, g in grads.items():
            mask = rows.get(k)
            if mask is None:
                sel = slice(None)
            else:
                if not mask.any():
                    continue
                sel = mask
            m, v, t = self.m[k], self.v[k], self.t[k]
            t[sel] += 1
            m[sel] = self.b1 * m[sel] + (1 - self.b1) * g[sel]
            v[sel] = self.b2 * v[sel] + (1 - self.b2) * g[sel] ** 2
            mhat = m[sel] / (1 - self.b1 ** t[sel])
            vhat = v[sel] / (1 - self.b2 ** t[sel])
            params[k][sel] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# -- validation metrics used for epoch selection -----------------------------


def _pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 3 or np.std(a) == 0 or np.std(b) == 0:
        return float("nan")
    return float(np.corrcoef(a, b)[0, 1])


def validation_scores(model: UrbanModel, A_hat, X, panel: ObservationPanel,
                      variant: VariantConfig) -> dict[str, float]:
    """Mean per-type report and rating correlations on a held-out window."""
    rhat = model.predict_ratings(A_hat)
    out = {}
    means, counts = panel.pair_rating_means()
    rating_corr = []
    for k in panel.types_with_ratings():
        m = counts[:, k] > 0
        if variant.head_policy == "all_rows":
            pred = -model.head().node_probabilities(rhat, X)[:, k]
        else:
            pred = rhat[:, k]
        rating_corr.append(_pearson(pred[m], means[m, k]))
    out["rating_corr"] = float(np.nanmean(rating_corr)) if np.isfinite(rating_corr).any() else float("nan")
    if variant.head_policy != "none":
        freq = panel.reports.mean(axis=2)
        prob = model.head().node_probabilities(rhat, X)
        rc = [_pearson(prob[:, k], freq[:, k]) for k in range(panel.n_types)]
        out["report_corr"] = float(np.nanmean(rc)) if np.isfinite(rc).any() else float("nan")
    vals = [v for v in out.values() if np.isfinite(v)]
    out["objective"] = float(np.mean(vals)) if vals else float("nan")
    return out


# -- training loop -----------------------------------------------------------


@dataclass
class TrainedModel:
    model: UrbanModel
    history: list[dict] = field(default_factory=list)
    selected_epoch: int = -1
    config: dict = field(default_factory=dict)

    def history_jsonl(self) -> str:
        return "".join(json.dumps(h, sort_keys=True) + "\n" for h in self.history)


def _masks_for(model: UrbanModel, variant: VariantConfig, observed: bool,
               target_type: int | None) -> tuple[np.ndarray, np.ndarray]:
    """Per-type (gradient scale, update mask) for the reporting head on one batch."""
    tau = model.shape.n_types
    if variant.head_policy == "none":
        return np.zeros(tau), np.zeros(tau, dtype=bool)
    own = model.own_coef.copy()
    if observed or variant.head_policy == "all_rows":
        scale = own.astype(np.float64)
        if not observed:
            scale *= variant.unobs_head_weight
    else:
        scale = np.zeros(tau)
        if target_type is not None and variant.unobs_head_weight > 0:
            scale[target_type] = variant.unobs_head_weight
    update = scale > 0
    if target_type is not None and (variant.weights.theta_reg > 0 or variant.weights.alpha_relu > 0):
        update[target_type] = True
    return scale, update


def train(panel: ObservationPanel, graph: SpatialGraph, demographics: Demographics,
          split: WeekSplit | None = None, variant: VariantConfig | str = "full",
          config: TrainConfig | None = None, step_log=None) -> TrainedModel:
    """Fit a model on the split's fit window; pick the epoch by validation score.

    ``step_log`` (a writable text handle) receives one JSON line per step and
    component.
    """
    config = config or TrainConfig()
    if isinstance(variant, str):
        variant = variant_config(variant)
    if split is None:
        split = WeekSplit((0, panel.n_weeks), None, (panel.n_weeks, panel.n_weeks))
    fit_panel = panel.window(*split.fit)
    val_panel = panel.window(*split.validation) if split.validation else None

    rows = training_rows(fit_panel, variant.uses_ratings)
    tau = panel.n_types
    rated = np.zeros(tau, dtype=bool)
    if variant.uses_ratings:
        rated[fit_panel.types_with_ratings()] = True
        if not rated.any():
            raise TrainingError(f"variant {variant.name!r} needs ratings but the fit window has none")
    if variant.head_policy == "all_rows":
        own = np.ones(tau, dtype=bool)
        rated = np.ones(tau, dtype=bool)
    else:
        own = rated.copy()
    if config.target_type is not None and not own[config.target_type] and variant.head_policy != "none":
        raise TrainingError(f"target type {config.target_type} has no observed ratings")

    A_hat = graph.normalized_adjacency()
    X = demographics.values
    shape = make_shape(graph, demographics, tau, config.hidden, config.emb)
    model = UrbanModel.init(shape, rated, own, seed=config.seed)
    model.meta = {"variant": variant.name, "seed": config.seed}
    opt = Adam(model.params, lr=config.lr)
    weights = variant.weights
    tgt = config.target_type

    history = []
    best = (-np.inf, -1, None)
    step = 0
    for epoch in range(config.epochs):
        sums = dict.fromkeys(COMPONENTS, 0.0)
        for observed, idx in build_batches(rows.n_observed, rows.n_unobserved, config.batch_size,
                                           config.seed, epoch):
            batch = rows.batch(observed, idx)
            loss, comps, grads = batch_objective(model, A_hat, X, batch, weights, tgt,
                                                 train_mode=True, update_stats=True)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}: {comps}")
            scale, update = _masks_for(model, variant, observed, tgt)
            if tgt is not None:
                # penalty gradients are not scaled by the per-batch head weight
                pen_a = np.zeros(tau)
                pen_t = np.zeros_like(grads["head.theta"])
                pen_t[tgt, :-1] = 2.0 * weights.theta_reg * model.params["head.theta"][tgt, :-1]
                if model.params["head.alpha"][tgt] > 0:
                    pen_a[tgt] = weights.alpha_relu
                grads["head.alpha"] = (grads["head.alpha"] - pen_a) * scale + pen_a
                grads["head.theta"] = (grads["head.theta"] - pen_t) * scale[:, None] + pen_t
            else:
                grads["head.alpha"] = grads["head.alpha"] * scale
                grads["head.theta"] = grads["head.theta"] * scale[:, None]
            opt.step(model.params, grads, {"head.alpha": update, "head.theta": update})
            for c in COMPONENTS:
                sums[c] += comps[c]
            if step_log is not None:
                for c in COMPONENTS:
                    step_log.write(json.dumps({"step": step, "component": c, "value": comps[c],
                                               "variant": variant.name}) + "\n")
            step += 1
        entry = {"epoch": epoch, **{f"loss_{c}": v for c, v in sums.items()},
                 "loss_total": total_loss(sums, weights)}
        if val_panel is not None:
            scores = validation_scores(model, A_hat, X, val_panel, variant)
            entry.update({f"val_{k}": v for k, v in scores.items()})
            score = scores["objective"]
            if config.validation == "best" and np.isfinite(score) and score > best[0]:
                best = (score, epoch, model.copy())
        history.append(entry)
        log.debug("epoch %d %s", epoch, entry)

    if config.validation == "best" and best[2] is not None:
        chosen, epoch_sel = best[2], best[1]
    else:
        chosen, epoch_sel = model, config.epochs - 1
    chosen.meta.update({"selected_epoch": epoch_sel})
    return TrainedModel(chosen, history, epoch_sel,
                        {"train": asdict(config), "variant": variant.name,
                         "weights": asdict(weights)})

from __future__ import annotations

import io
import json

import numpy as np
import pytest

from conftest import make_panel
from urbanstate.data_model import WeekSplit, build_graph, normalize_demographics
from urbanstate.model import UrbanModel, make_shape
from urbanstate.objective import Batch, LossWeights, variant_config
from urbanstate.training import (Adam, TrainConfig, TrainingError, build_batches, gradient_check, train,
                                 training_rows)

FAST = dict(epochs=4, batch_size=500)


def test_batch_partition_arithmetic():
    batches = build_batches(10, 20, 16, seed=0)
    sizes = sorted((obs, len(idx)) for obs, idx in batches)
    assert sizes == [(False, 4), (False, 16), (True, 10)]
    seen = np.concatenate([idx for obs, idx in batches if not obs])
    assert sorted(seen.tolist()) == list(range(20))


def test_empty_and_unobserved_only_batches():
    assert build_batches(0, 0, 16, seed=0) == []
    assert all(not obs for obs, _ in build_batches(0, 40, 16, seed=0))


def test_batches_depend_on_seed_and_epoch():
    a = build_batches(50, 50, 16, seed=1, epoch=0)
    b = build_batches(50, 50, 16, seed=1, epoch=0)
    c = build_batches(50, 50, 16, seed=1, epoch=1)
    assert all(x[0] == y[0] and np.array_equal(x[1], y[1]) for x, y in zip(a, b))
    assert any(not np.array_equal(x[1], y[1]) for x, y in zip(a, c))


def test_training_rows_split_cells(small_world):
    panel = small_world[0]
    rows = training_rows(panel)
    assert rows.n_observed == panel.n_obs
    assert rows.n_unobserved == panel.reports.size - panel.observed_cells().sum()
    only = training_rows(panel, use_ratings=False)
    assert only.n_observed == 0 and only.n_unobserved == panel.reports.size


def _tiny(seed=0):
    rng = np.random.default_rng(seed)
    n, tau, T = 5, 3, 6
    g = build_graph([(0, 1), (1, 2), (3, 4), (0, 4)], n)
    demo = normalize_demographics(rng.normal(size=(n, 2)), ["a", "b"])
    reports = rng.random((n, tau, T)) < 0.4
    rows = [(i, i, k, t, rng.normal(), int(rng.random() < 0.5))
            for i in range(n) for k in (0, 1) for t in range(T) if rng.random() < 0.4]
    return make_panel(reports, rows), g, demo


def _model_for(panel, g, demo, seed=0, scale=0.3):
    rated = np.zeros(panel.n_types, dtype=bool)
    rated[panel.types_with_ratings()] = True
    m = UrbanModel.init(make_shape(g, demo, panel.n_types, emb=4), rated, seed=seed)
    rng = np.random.default_rng(seed + 100)
    m.params["head.alpha"][:] = rng.normal(size=panel.n_types) * scale
    m.params["head.theta"][:] = rng.normal(size=m.params["head.theta"].shape) * scale
    return m


def _all_batches(panel):
    rows = training_rows(panel)
    return [rows.batch(True, np.arange(rows.n_observed)), rows.batch(False, np.arange(rows.n_unobserved))]


def test_gradient_check_passes(backend):
    panel, g, demo = _tiny()
    m = _model_for(panel, g, demo)
    err, per = gradient_check(m, g.normalized_adjacency(), demo.values, _all_batches(panel),
                              LossWeights(20, 1, 1e-3, 0.1, 0.1), target_type=0)
    assert err < 1e-3, per
    assert set(per) >= {"gcn.W1", "type_table", "head.theta"}


def test_gradient_check_flags_sign_flip():
    panel, g, demo = _tiny()
    m = _model_for(panel, g, demo)
    A, X, batches = g.normalized_adjacency(), demo.values, _all_batches(panel)
    w = LossWeights()

    def flipped(model):
        from urbanstate.training import batch_objective

        total = None
        for b in batches:
            _, _, gr = batch_objective(model, A, X, b, w)
            total = gr if total is None else {k: total[k] + gr[k] for k in gr}
        return {k: -v for k, v in total.items()}

    err, _ = gradient_check(m, A, X, batches, w, grad_fn=flipped)
    assert err > 0.5


def test_zero_head_on_balanced_labels_is_stationary():
    from urbanstate.training import batch_objective

    n, tau = 4, 2
    g = build_graph([(0, 1), (2, 3)], n)
    demo = normalize_demographics(np.random.default_rng(0).normal(size=(n, 2)))
    m = UrbanModel.init(make_shape(g, demo, tau, emb=3), np.array([True, True]), seed=0)
    nodes = np.repeat(np.arange(n), 2 * tau)
    types = np.tile(np.repeat(np.arange(tau), 2), n)
    labels = np.tile([0.0, 1.0], n * tau)
    _, _, grads = batch_objective(m, g.normalized_adjacency(), demo.values, Batch(False, nodes, types, labels),
                                  LossWeights(reg=0.0))
    assert np.abs(grads["head.alpha"]).max() < 1e-12
    assert np.abs(grads["head.theta"]).max() < 1e-12


def test_adam_matches_reference_and_skips_frozen_rows():
    p = {"w": np.array([[1.0, -1.0], [0.5, 2.0]])}
    opt = Adam(p, lr=0.1)
    g = np.array([[0.2, -0.4], [1.0, 3.0]])
    frozen_before = p["w"][1].copy()
    opt.step(p, {"w": g}, rows={"w": np.array([True, False])})
    # first Adam step moves each free element by lr * sign(g)
    assert np.allclose(p["w"][0], [1.0 - 0.1, -1.0 + 0.1], atol=1e-7)
    assert np.array_equal(p["w"][1], frozen_before)
    assert opt.t["w"][1].tolist() == [0, 0]
    # when the row is released it takes a first-step-sized move, not a decayed one
    opt.step(p, {"w": g}, rows={"w": np.array([False, True])})
    assert np.allclose(p["w"][1], frozen_before - 0.1 * np.sign(g[1]), atol=1e-7)


def test_same_seed_same_history(small_world):
    panel, g, demo, _ = small_world
    split = WeekSplit.tail(panel.n_weeks, 6, 4)
    a = train(panel, g, demo, split, "full", TrainConfig(seed=2, **FAST))
    b = train(panel, g, demo, split, "full", TrainConfig(seed=2, **FAST))
    assert a.history_jsonl() == b.history_jsonl()
    for k in a.model.params:
        assert np.array_equal(a.model.params[k], b.model.params[k])


def test_reports_only_never_reads_ratings(small_world):
    panel, g, demo, _ = small_world
    scrambled = panel.replace_obs(obs_rating=np.random.default_rng(0).normal(size=panel.n_obs) * 50)
    split = WeekSplit((0, panel.n_weeks), None, (panel.n_weeks - 5, panel.n_weeks))
    a = train(panel, g, demo, split, "reports_only", TrainConfig(**FAST))
    b = train(scrambled, g, demo, split, "reports_only", TrainConfig(**FAST))
    for k in a.model.params:
        assert np.array_equal(a.model.params[k], b.model.params[k]), k


def test_ratings_only_fits_rank_one_ratings():
    n = 5
    g = build_graph([(0, 1), (1, 2), (2, 3), (3, 4)], n)
    demo = normalize_demographics(np.arange(10.0).reshape(n, 2) ** 1.5)
    u = np.array([1.0, -0.5, 0.3, 2.0, -1.2])
    rows = [(i, i, 0, t, u[i] * 0.8, 0) for i in range(n) for t in range(4)]
    panel = make_panel(np.zeros((n, 1, 4), dtype=bool), rows)
    tm = train(panel, g, demo, None, "ratings_only", TrainConfig(epochs=600, batch_size=64, validation="last"))
    assert tm.history[-1]["loss_rating"] < 1e-3


def test_full_variant_loss_decreases(small_world):
    panel, g, demo, _ = small_world
    tm = train(panel, g, demo, WeekSplit.tail(panel.n_weeks, 6), "full",
               TrainConfig(epochs=30, batch_size=2000, validation="last"))
    totals = [h["loss_total"] for h in tm.history]
    assert np.mean(totals[-5:]) <= np.mean(totals[:5])


def test_step_log_has_one_line_per_component(small_world):
    panel, g, demo, _ = small_world
    buf = io.StringIO()
    tm = train(panel, g, demo, None, "full", TrainConfig(epochs=1, batch_size=100_000), step_log=buf)
    lines = [json.loads(x) for x in buf.getvalue().splitlines()]
    assert {x["component"] for x in lines} == {"unobs", "obs", "rating", "reg", "theta_reg", "alpha_relu"}
    assert len(lines) == 6 * 2  # one observed and one unobserved batch
    assert tm.selected_epoch == 0


def test_full_variant_needs_ratings(small_world):
    panel, g, demo, _ = small_world
    with pytest.raises(TrainingError):
        train(panel.replace_obs(keep=np.zeros(panel.n_obs, dtype=bool)), g, demo, None, "full",
              TrainConfig(epochs=1))


def test_unrated_target_rejected(small_world):
    panel, g, demo, truth = small_world
    unrated = next(k for k in range(panel.n_types) if k not in truth["rated_types"])
    with pytest.raises(TrainingError):
        train(panel, g, demo, None, "subsampled_full_real", TrainConfig(epochs=1, target_type=unrated))


def test_real_variant_moves_only_target_on_unobserved_batches(small_world):
    panel, g, demo, truth = small_world
    tgt, other = truth["rated_types"]
    rows = training_rows(panel)
    # keep only unobserved rows by training on a panel with the observed batch made empty of signal:
    # the head of the non-target rated type must stay at its initial zeros
    tm = train(panel, g, demo, None, variant_config("subsampled_full_real").with_weights(obs=0.0),
               TrainConfig(epochs=3, batch_size=rows.n_unobserved, target_type=tgt, validation="last"))
    assert np.all(tm.model.params["head.theta"][other] == 0.0)
    assert tm.model.params["head.alpha"][other] == 0.0
    assert np.any(tm.model.params["head.theta"][tgt] != 0.0)

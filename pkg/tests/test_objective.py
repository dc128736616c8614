from __future__ import annotations

import numpy as np
import pytest

from urbanstate.objective import (COMPONENTS, Batch, LossWeights, ObjectiveError, loss_components,
                                  total_loss, variant_config)


def _batch(observed, nodes, types, labels, ratings=None):
    return Batch(observed, np.array(nodes), np.array(types), np.array(labels, dtype=float),
                 None if ratings is None else np.array(ratings, dtype=float))


def _call(batch, rhat, alpha=None, theta=None, X=None, target=None):
    n, tau = rhat.shape
    alpha = np.zeros(tau) if alpha is None else np.asarray(alpha, dtype=float)
    theta = np.zeros((tau, 1)) if theta is None else np.asarray(theta, dtype=float)
    X = np.ones((n, theta.shape[1])) if X is None else X
    return loss_components(rhat, alpha, theta, alpha, theta, X, batch, target)


def test_confident_correct_report_costs_nothing():
    # a large positive logit with label 1 saturates at the clamp
    out = _call(_batch(False, [0], [0], [1]), np.zeros((1, 1)), theta=[[40.0]])
    assert out["unobs"] < 1e-6


def test_half_probability_costs_ln2():
    out = _call(_batch(False, [0], [0], [1]), np.zeros((1, 1)))
    assert np.isclose(out["unobs"], 0.6931471805599453, atol=1e-12)


def test_rating_regulariser_sums_squares():
    out = _call(_batch(False, [0, 0], [0, 1], [0, 0]), np.array([[1.0, -2.0]]))
    assert np.isclose(out["reg"], 5.0)


@pytest.mark.parametrize("alpha,expected", [(-0.5, 0.0), (0.3, 0.3)])
def test_alpha_relu(alpha, expected):
    out = _call(_batch(False, [], [], []), np.zeros((1, 1)), alpha=[alpha], target=0)
    assert out["alpha_relu"] == expected


def test_theta_penalty_skips_intercept():
    out = _call(_batch(False, [], [], []), np.zeros((1, 1)), theta=[[1.0, 2.0, 100.0]], X=np.ones((1, 3)), target=0)
    assert out["theta_reg"] == 5.0


def test_exact_ratings_cost_nothing():
    rhat = np.array([[0.3, -1.2]])
    out = _call(_batch(True, [0, 0], [0, 1], [0, 1], [0.3, -1.2]), rhat)
    assert out["rating"] == 0.0
    assert out["unobs"] == 0.0 and out["reg"] == 0.0


def test_observed_rows_use_true_rating():
    # r-hat is far off but the head sees the true rating, so BCE is ln 2 at alpha r = 0
    out = _call(_batch(True, [0], [0], [1], [0.0]), np.array([[9.0]]), alpha=[1.0])
    assert np.isclose(out["obs"], np.log(2)) and out["rating"] == 81.0


def test_total_loss_examples():
    comps = dict(zip(COMPONENTS, (1.0, 1.0, 1.0, 1.0, 0.0, 0.0)))
    assert total_loss(comps, LossWeights(20, 1, 1e-6, 0, 0)) == 22 + 1e-6
    assert total_loss(comps, LossWeights(0, 0, 0, 0, 0)) == 1.0
    assert total_loss(dict.fromkeys(COMPONENTS, 0.0), LossWeights()) == 0.0


def test_negative_weight_rejected():
    with pytest.raises(ObjectiveError):
        LossWeights(obs=-1)


def test_variants():
    full = variant_config("full")
    assert full.weights.as_tuple() == (1.0, 20.0, 1.0, 1e-6, 0.0, 0.0)
    real = variant_config("subsampled_full_real")
    assert real.weights.theta_reg == 0.1 and real.weights.alpha_relu == 0.1 and real.unobs_head_weight == 0.6
    assert variant_config("subsampled_full_synth").weights.rating == 10.0
    assert variant_config("reports_only").weights.rating == 0.0
    ro = variant_config("ratings_only")
    assert ro.weights.unobs == 0.0 and ro.weights.obs == 0.0 and ro.head_policy == "none"
    with pytest.raises(ObjectiveError):
        variant_config("bogus")


def test_non_finite_component_raises():
    with pytest.raises(ObjectiveError):
        _call(_batch(True, [0], [0], [1], [np.inf]), np.zeros((1, 1)))

from __future__ import annotations

import numpy as np
import pytest

from conftest import make_panel
from urbanstate.data_model import build_graph, normalize_demographics
from urbanstate.model import (ModelError, ModelShape, ReportingHead, UrbanModel, make_shape,
                              mean_reporting_coefficients, predict_rating, predict_report_probability,
                              sigmoid)


def _model(n=4, tau=3, d=3, hidden=None, emb=5, rated=(True, True, False), seed=0):
    return UrbanModel.init(ModelShape(n, tau, d, hidden or n, emb), np.array(rated), seed=seed)


def _leaky(x):
    return x if x > 0 else 0.01 * x


@pytest.mark.parametrize("x", [0.7, -2.0])
def test_single_node_forward_by_hand(x):
    m = _model(n=1, tau=1, hidden=1, emb=1, rated=(True,))
    m.params["gcn.W1"][:] = x  # one-hot input times W1 puts x in the hidden unit
    m.params["gcn.W2"][:] = 1.0
    A = build_graph([], 1).normalized_adjacency()
    emb, _ = m.embed(A, train=False)
    s = 1 / np.sqrt(1 + 1e-5)  # eval-mode BN with unit running stats
    assert np.isclose(emb[0, 0], _leaky(_leaky(x) * s) * s, atol=1e-15)


def test_zero_weights_give_bn_shift():
    m = _model()
    for k in ("gcn.W1", "gcn.W2"):
        m.params[k][:] = 0.0
    m.params["gcn.bn2.bias"][:] = np.arange(5.0)
    A = build_graph([(0, 1), (2, 3)], 4).normalized_adjacency()
    for train in (True, False):
        m.params["gcn.bn1.bias"][:] = 0.0
        emb, _ = m.embed(A, train=train)
        assert np.allclose(emb, np.arange(5.0)[None, :].repeat(4, axis=0))


def test_permutation_equivariance():
    g = build_graph([(0, 1), (1, 2), (2, 3)], 4)
    perm = np.array([2, 0, 3, 1])  # node i becomes perm[i]
    m = _model(seed=3)
    p = m.copy()
    inv = np.argsort(perm)
    p.params["gcn.W1"] = m.params["gcn.W1"][inv]
    e1, _ = m.embed(g.normalized_adjacency(), train=True)
    e2, _ = p.embed(g.permuted(perm).normalized_adjacency(), train=True)
    assert np.allclose(e2[perm], e1, atol=1e-12)


def test_isolated_nodes_swap_embeddings():
    g = build_graph([], 2)
    m = _model(n=2, rated=(True, True, False), seed=1)
    e1, _ = m.embed(g.normalized_adjacency(), train=True)
    m.params["gcn.W1"] = m.params["gcn.W1"][::-1].copy()
    e2, _ = m.embed(g.normalized_adjacency(), train=True)
    assert np.allclose(e1[::-1], e2)


def test_running_stats_update():
    m = _model(seed=2)
    A = build_graph([(0, 1)], 4).normalized_adjacency()
    _, cache = m.embed(A, train=True, update_stats=True)
    mu, var = cache["c1"][2], cache["c1"][3]
    assert np.allclose(m.buffers["gcn.bn1.running_mean"], 0.1 * mu)
    assert np.allclose(m.buffers["gcn.bn1.running_var"], 0.9 + 0.1 * var * 4 / 3)


def test_predict_rating_examples():
    T = np.zeros((2, 50))
    assert predict_rating(0, 0, np.zeros((1, 50)), T) == 0.0
    e = np.eye(50)[[3]]
    assert predict_rating(0, 0, e, np.eye(50)[[3]]) == 1.0
    a = np.zeros((1, 50))
    a[0, :2] = [1, 2]
    b = np.zeros((1, 50))
    b[0, :2] = [3, -1]
    assert predict_rating(0, 0, a, b) == 1.0


def test_mean_coefficients():
    a, th = mean_reporting_coefficients([-1, -3], [[1, 0], [0, 2]], [True, True])
    assert a == -2 and th.tolist() == [0.5, 1.0]
    a, th = mean_reporting_coefficients([-1, -3], [[1, 0], [0, 2]], [False, True])
    assert a == -3 and th.tolist() == [0, 2]
    with pytest.raises(ModelError):
        mean_reporting_coefficients([-1], [[1]], [False])


def test_report_probability_cases():
    reports = np.zeros((2, 2, 3), dtype=bool)
    panel = make_panel(reports, [(7, 0, 0, 1, 1.0, 1)])
    X = np.array([[0.0, 1.0], [0.5, 1.0]])
    head = ReportingHead(np.array([-0.197, -1.0]), np.array([[0.0, 0.0], [0.3, -1.0]]),
                         own_coef=np.array([True, False]), rated=np.array([True, False]))
    rhat = np.array([[2.0, 0.4], [-1.0, 1.5]])
    # Case 1: the sub-unit record uses the true rating (1.0), not r-hat
    assert np.isclose(predict_report_probability(panel, head, rhat, X, 0, 0, 1, sub_unit=7), 0.4509095798698186)
    # Case 2: node-level cell, own coefficients, r-hat
    assert np.isclose(predict_report_probability(panel, head, rhat, X, 1, 0, 2), sigmoid(-0.197 * -1.0))
    # Case 3 with a single rated type collapses onto that type's coefficients
    assert np.isclose(predict_report_probability(panel, head, rhat, X, 1, 1, 2),
                      sigmoid(-0.197 * 1.5 + 0.0))
    with pytest.raises(ModelError):
        predict_report_probability(panel, head, rhat, X, 0, 0, 2, sub_unit=7)
    assert head.case(0, True) == 1 and head.case(0, False) == 2 and head.case(1, False) == 3


def test_zero_logit_is_half():
    head = ReportingHead(np.zeros(1), np.zeros((1, 2)), np.array([True]), np.array([True]))
    assert head.node_probabilities(np.zeros((3, 1)), np.ones((3, 2))).tolist() == [[0.5]] * 3


def test_checkpoint_round_trip(tmp_path):
    m = _model(seed=4)
    m.meta = {"variant": "full", "seed": 4}
    m.buffers["gcn.bn2.running_var"][:] = 2.5
    m.save(tmp_path / "m.npz")
    back = UrbanModel.load(tmp_path / "m.npz")
    for k in m.params:
        assert np.array_equal(m.params[k], back.params[k])
    for k in m.buffers:
        assert np.array_equal(m.buffers[k], back.buffers[k])
    assert back.meta == m.meta and back.shape == m.shape
    assert np.array_equal(back.own_coef, m.own_coef)


def test_checkpoint_rejects_other_files(tmp_path):
    np.savez(tmp_path / "x.npz", __header__=np.frombuffer(b'{"format": "other"}', dtype=np.uint8))
    with pytest.raises(ModelError):
        UrbanModel.load(tmp_path / "x.npz")


def test_graph_size_mismatch():
    m = _model()
    with pytest.raises(ModelError):
        m.embed(build_graph([], 3).normalized_adjacency())


def test_make_shape_defaults_hidden_to_node_count():
    g = build_graph([(0, 1)], 3)
    d = normalize_demographics(np.arange(6.0).reshape(3, 2) ** 2)
    s = make_shape(g, d, 5)
    assert (s.n, s.hidden, s.emb, s.n_coef, s.n_types) == (3, 3, 50, 3, 5)

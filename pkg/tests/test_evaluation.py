from __future__ import annotations

import json
import math
from fractions import Fraction

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from urbanstate.evaluation import (EvaluationError, SubgroupSpec, calibration_bins, cluster_nodes,
                                   cluster_types, coefficient_recovery, demographic_tests, evaluate,
                                   expected_calibration_error, income_terciles, kmeans, node_error_analysis,
                                   pair_correlation, pair_rmse, pca_frequency_correlation, pearson,
                                   proxy_rating_eval, race_groups, representation_ratio, subgroup_gaps,
                                   topk_coverage, worst_k)

# -- brute-force references written with plain loops ------------------------


def bf_pearson(a, b):
    n = len(a)
    ma, mb = math.fsum(a) / n, math.fsum(b) / n
    cov = math.fsum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = math.fsum((x - ma) ** 2 for x in a)
    vb = math.fsum((y - mb) ** 2 for y in b)
    return cov / math.sqrt(va * vb)


def bf_rmse(a, b):
    return math.sqrt(math.fsum((x - y) ** 2 for x, y in zip(a, b)) / len(a))


def bf_worst(values, k):
    order = sorted(range(len(values)), key=lambda j: (values[j], j))
    return set(order[:k])


def bf_coverage(a, b, k):
    return len(bf_worst(a, k) & bf_worst(b, k)) / k


def bf_ece(pred, truth, bins=10):
    # decile cut points in exact rational arithmetic
    data = sorted(Fraction(x) for x in pred)
    m = len(data) - 1
    edges = []
    for i in range(1, bins):
        pos = Fraction(i * m, bins)
        j = int(pos)
        edges.append(data[j] if pos == j else data[j] + (data[j + 1] - data[j]) * (pos - j))
    groups = {}
    for p, t in zip(pred, truth):
        j = sum(1 for e in edges if e <= Fraction(p))
        groups.setdefault(j, []).append((p, t))
    total = 0.0
    for members in groups.values():
        mp = math.fsum(p for p, _ in members) / len(members)
        mt = math.fsum(t for _, t in members) / len(members)
        total += len(members) / len(pred) * abs(mp - mt)
    return total


def bf_ratio(pred, values, budget):
    count = max(1, int(math.floor(budget * len(pred) + 0.5)))
    chosen = bf_worst(pred, count)
    sel = math.fsum(values[j] for j in chosen) / count
    return sel / (math.fsum(values) / len(values))


def _instance(seed, n=None):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(10, 101))
    truth = rng.normal(size=n)
    pred = 0.6 * truth + rng.normal(size=n)
    return pred, truth


# -- worked examples ---------------------------------------------------------


def test_pearson_examples():
    assert pearson([1, 2, 3], [1, 2, 3])[0] == 1.0
    assert pearson([0.1, 0.2, 0.3], [5, 6, 7])[0] == pytest.approx(1.0, abs=1e-15)
    assert round(pearson([1, 2, 4], [1, 2, 3])[0], 4) == 0.9820
    assert pearson([1, 2, 3], [3, 2, 1])[0] == -1.0


def test_pearson_undefined_cases():
    assert math.isnan(pearson([1, 2], [1, 2])[0])
    assert math.isnan(pearson([1, 1, 1], [1, 2, 3])[0])
    with pytest.raises(EvaluationError):
        pearson([1, 2, 3], [1, 2])


def test_pearson_p_value_matches_scipy():
    from scipy import stats

    a, b = _instance(4, 30)
    r, p = pearson(a, b)
    ref = stats.pearsonr(a, b)
    assert np.isclose(r, ref[0], atol=1e-12) and np.isclose(p, ref[1], rtol=1e-9)


def test_rmse_examples():
    assert pair_rmse([1.5, 2], [1.5, 2]) == 0.0
    assert round(pair_rmse([0, 0], [3, 4]), 4) == 3.5355
    with pytest.raises(EvaluationError):
        pair_rmse([], [])


def test_grouped_correlation_averages_defined_types():
    pred = [1, 2, 3, 1, 2, 4, 5, 5, 5]
    truth = [1, 2, 3, 1, 2, 3, 1, 2, 3]
    c = pair_correlation(pred, truth, [0, 0, 0, 1, 1, 1, 2, 2, 2])
    assert math.isnan(c.per_type[2])
    assert np.isclose(c.r, (1 + bf_pearson([1, 2, 4], [1, 2, 3])) / 2, atol=1e-12)


def test_proxy_orientation():
    r = np.array([0.1, 0.5, -0.3, 2.0])
    assert np.isclose(proxy_rating_eval(3 * r + 1, r), 1.0)
    assert np.isclose(proxy_rating_eval(3 * r + 1, r, orientation=-1), -1.0)
    with pytest.raises(EvaluationError):
        proxy_rating_eval(r, r, orientation=0)


def test_topk_examples():
    assert topk_coverage([1, 2, 3, 4], [10, 20, 30, 40], 2) == 1.0
    assert topk_coverage([1, 2, 3, 4], [40, 30, 20, 10], 2) == 0.0
    with pytest.raises(EvaluationError):
        topk_coverage([1, 2], [1, 2], 3)
    assert worst_k([2, 1, 1, 0], 3).tolist() == [3, 1, 2]


def test_ece_examples():
    x = np.linspace(-1, 1, 37)
    assert expected_calibration_error(x, x) == 0.0
    truth = np.random.default_rng(0).normal(size=50)
    assert np.isclose(expected_calibration_error(np.full(50, truth.mean()), truth), 0.0, atol=1e-15)
    assert calibration_bins(np.arange(100.0)).tolist() == np.repeat(np.arange(10), 10).tolist()


def test_subgroup_examples():
    pred, truth = _instance(1, 40)
    everyone = SubgroupSpec("all", np.array(["all"] * 40), ("all",))
    assert subgroup_gaps(lambda a, b: pearson(a, b)[0], everyone, pred, truth) == {"all": 0.0}
    labels = np.array(["a"] * 15 + ["b"] * 25)
    gaps = subgroup_gaps(lambda a, b: pearson(a, b)[0], SubgroupSpec("ab", labels, ("a", "b")), pred, truth)
    overall = bf_pearson(pred, truth)
    assert np.isclose(gaps["a"], bf_pearson(pred[:15], truth[:15]) - overall, atol=1e-12)
    assert np.isclose(gaps["b"], bf_pearson(pred[15:], truth[15:]) - overall, atol=1e-12)
    with pytest.raises(EvaluationError):
        SubgroupSpec("bad", np.array(["a", "c"]), ("a", "b"))


def test_subgroup_gaps_vanish_for_symmetric_groups():
    base_p, base_t = _instance(2, 30)
    pred, truth = np.tile(base_p, 2), np.tile(base_t, 2)
    spec = SubgroupSpec("twin", np.array(["x"] * 30 + ["y"] * 30), ("x", "y"))
    gaps = subgroup_gaps(pair_rmse, spec, pred, truth)
    assert abs(gaps["x"]) < 1e-12 and abs(gaps["y"]) < 1e-12


def test_group_definitions():
    inc = income_terciles([10, 20, 30, 40, 50, 60])
    assert inc.labels.tolist() == ["low", "low", "middle", "middle", "high", "high"]
    race = race_groups([10, 30, 70, 71])
    assert race.labels.tolist() == ["minority", "mixed", "mixed", "white"]


def test_representation_examples():
    assert representation_ratio([1.0, 0.0], [50_000, 100_000], budget=0.5) == pytest.approx(100 / 75, abs=1e-12)
    vals = np.random.default_rng(0).uniform(1, 9, 33)
    assert representation_ratio(np.random.default_rng(1).normal(size=33), vals, budget=1.0) == 1.0
    with pytest.raises(EvaluationError):
        representation_ratio([1, 2], [1, 2], budget=0.0)


def test_coefficient_recovery_examples():
    true = np.random.default_rng(0).uniform(-1, 1, (20, 7))
    r, mae, table = coefficient_recovery(true, true)
    assert (r, mae) == (1.0, 0.0) and len(table) == 140
    noise = np.random.default_rng(1).uniform(-0.05, 0.05, true.shape)
    r, mae, _ = coefficient_recovery(true + noise, true)
    assert r > 0.99 and abs(mae - np.abs(noise).mean()) < 1e-15 and abs(mae - 0.025) < 0.005


def test_two_blobs_separate():
    rng = np.random.default_rng(0)
    V = np.vstack([rng.normal(size=(15, 3)) * 0.1, rng.normal(size=(10, 3)) * 0.1 + 5])
    res = cluster_nodes(V, k=2)
    assert res.labels.tolist() == [0] * 15 + [1] * 10 and not res.degenerate


def test_identical_vectors_flag_degeneracy():
    with pytest.warns(UserWarning):
        assert kmeans(np.ones((6, 2)), 4).degenerate


def test_eight_families_give_pure_clusters():
    rng = np.random.default_rng(3)
    centers = np.eye(8) * 10
    family = np.repeat(np.arange(8), 5)
    V = centers[family] + rng.normal(size=(40, 8)) * 0.2
    a = cluster_types(V, k=8, seed=1)
    b = cluster_types(V, k=8, seed=1)
    assert np.array_equal(a.labels, b.labels)
    # each family maps to exactly one cluster and vice versa
    pairs = set(zip(family.tolist(), a.labels.tolist()))
    assert len(pairs) == 8


def test_anova_detects_planted_difference():
    labels = np.repeat([0, 1, 2], 20)
    rng = np.random.default_rng(0)
    df = pd.DataFrame({"income": labels * 3.0 + rng.normal(size=60), "noise": rng.normal(size=60)})
    out = demographic_tests(labels, df).set_index("feature")
    assert out.loc["income", "p_value"] < 1e-6 and out.loc["noise", "p_value"] > 1e-3


def test_pca_oracle():
    rng = np.random.default_rng(0)
    freq = rng.uniform(0.01, 0.5, 12)
    direction = rng.normal(size=30)
    V = freq[:, None] * direction[None, :] + rng.normal(size=(12, 30)) * 1e-4
    assert abs(pca_frequency_correlation(V, freq)) > 0.999
    assert math.isnan(pca_frequency_correlation(V, np.full(12, 0.2)))
    with pytest.raises(EvaluationError):
        pca_frequency_correlation(V[:2], freq[:2])


def test_node_errors_uniform_are_insignificant():
    df = pd.DataFrame({"income": np.random.default_rng(0).normal(size=100)})
    out = node_error_analysis(np.ones(100), df)
    assert out["p_value"].iloc[0] == 1.0 and out["degenerate"].iloc[0]


def test_node_errors_planted_on_low_income():
    rng = np.random.default_rng(0)
    income = rng.normal(60_000, 15_000, 400)
    errors = np.where(income < np.quantile(income, 0.15), 5.0, 0.0) + rng.random(400) * 0.1
    out = node_error_analysis(errors, pd.DataFrame({"income": income}), seed=2)
    row = out.iloc[0]
    assert row["p_value"] < 1e-3 and row["worst_mean"] < row["random_mean"]


# -- brute-force equivalence and invariances ---------------------------------


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_metrics_match_brute_force(seed):
    pred, truth = _instance(seed)
    n = pred.size
    assert abs(pearson(pred, truth)[0] - bf_pearson(pred, truth)) < 1e-12
    assert abs(pair_rmse(pred, truth) - bf_rmse(pred, truth)) < 1e-12
    for k in (1, 5, n // 2, n):
        assert abs(topk_coverage(pred, truth, k) - bf_coverage(pred.tolist(), truth.tolist(), k)) < 1e-12
    assert abs(expected_calibration_error(pred, truth) - bf_ece(pred.tolist(), truth.tolist())) < 1e-12
    vals = np.abs(truth) + 1
    for b in (0.1, 0.37, 1.0):
        assert abs(representation_ratio(pred, vals, b) - bf_ratio(pred.tolist(), vals.tolist(), b)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100), st.floats(-50, 50))
def test_correlation_affine_invariance(seed, slope, shift):
    pred, truth = _instance(seed, 40)
    assert abs(pearson(slope * pred + shift, truth)[0] - pearson(pred, truth)[0]) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 40))
def test_coverage_monotone_invariance(seed, k):
    pred, truth = _instance(seed, 40)
    base = topk_coverage(pred, truth, k)
    assert topk_coverage(np.exp(pred), truth, k) == base
    assert topk_coverage(pred, truth ** 3, k) == base


# -- the full report ---------------------------------------------------------


def test_evaluate_with_oracle_predictions(small_world):
    panel, graph, demo, truth = small_world
    test = panel.window(20, 30)
    means, counts = test.pair_rating_means()
    rhat = np.where(counts > 0, means, 0.0)
    freq = test.reports.mean(axis=2)
    rep = evaluate(rhat, freq, test, demo)
    m = rep.metrics
    assert np.isclose(m["rating"]["corr"], 1.0) and m["rating"]["rmse"] < 1e-12
    assert m["rating"]["ece"] < 1e-12 and m["report"]["rmse"] == 0.0
    assert set(m["rating"]["topk_coverage"]) == {"5", "10", "20", "50"}
    assert set(m["subgroup_gaps"]) == {"income", "race"}
    assert set(m["representation_ratio"]) == {"budget", "income", "pct_white"}
    # json keeps undefined values as null and stays valid
    json.loads(rep.to_json())
    assert rep.to_csv().startswith("metric,value\n")


def test_evaluate_proxy_leaves_rating_scale_metrics_undefined(small_world):
    panel, graph, demo, truth = small_world
    test = panel.window(20, 30)
    prob = np.random.default_rng(0).random((panel.n, panel.n_types))
    m = evaluate(np.zeros_like(prob), prob, test, demo, proxy=True).metrics
    assert math.isnan(m["rating"]["rmse"]) and math.isnan(m["rating"]["ece"]) and m["rating"]["proxy"]
    assert json.loads(evaluate(np.zeros_like(prob), prob, test, demo, proxy=True).to_json())[
        "metrics"]["rating"]["rmse"] is None

import json

import numpy as np
import pytest

from rfdebias.data import Dataset
from rfdebias.explain import (Cover, brute_force_shap, cfc_forest, cfc_tree, cover_prediction,
                              global_cfc, mdi_via_cfc, node_values, shap_expected_value,
                              shap_forest, split_importance, tree_shap, weighted_shap)
from rfdebias.forest import Forest, ForestParams, Tree, fit_forest

from conftest import random_forest
from oracles import variance_mdi


def hand_tree(feature, threshold, left, right, k_in, n_in, k_oob=None, n_oob=None):
    """Tree from node arrays plus class-1 / total counts per node."""
    k_in, n_in = np.asarray(k_in, float), np.asarray(n_in, float)
    k_oob = k_in if k_oob is None else np.asarray(k_oob, float)
    n_oob = n_in if n_oob is None else np.asarray(n_oob, float)
    return Tree(feature, threshold, left, right, np.column_stack([n_in - k_in, k_in]),
                np.column_stack([n_oob - k_oob, k_oob]), np.ones(int(n_in[0]), int))


def and_tree():
    # x0 <= 0.5 ? 0 : (x1 <= 0.5 ? 0 : 1), balanced cover
    return hand_tree([0, -1, 1, -1, -1], [0.5, 0, 0.5, 0, 0], [1, -1, 3, -1, -1], [2, -1, 4, -1, -1],
                     [1, 0, 1, 0, 1], [4, 2, 2, 1, 1])


def symmetric_and_tree():
    # both features split at the root level in a balanced 2x2 layout
    return hand_tree([0, 1, 1, -1, -1, -1, -1], [0.5] * 3 + [0] * 4,
                     [1, 3, 5, -1, -1, -1, -1], [2, 4, 6, -1, -1, -1, -1],
                     [1, 0, 1, 0, 0, 0, 1], [4, 2, 2, 1, 1, 1, 1])


def test_stump_attributions():
    tree = hand_tree([0, -1, -1], [0.5, 0, 0], [1, -1, -1], [2, -1, -1], [3, 0, 3], [6, 3, 3])
    x = np.array([1.0, 7.0])
    np.testing.assert_allclose(cfc_tree(tree, x), [0.5, 0.0])
    np.testing.assert_allclose(tree_shap(tree, x), [0.5, 0.0])
    assert shap_expected_value(tree) == pytest.approx(0.5)


def test_single_leaf_is_zero():
    tree = hand_tree([-1], [0], [-1], [-1], [2], [5])
    np.testing.assert_array_equal(tree_shap(tree, np.zeros(3)), 0)
    np.testing.assert_array_equal(brute_force_shap(tree, np.zeros(3)), 0)
    np.testing.assert_array_equal(cfc_tree(tree, np.zeros(3), p=3), 0)


def test_symmetric_and_tree():
    x = np.array([1.0, 1.0])
    phi = tree_shap(symmetric_and_tree(), x)
    assert phi[0] == pytest.approx(phi[1])
    assert phi.sum() == pytest.approx(1 - 0.25)
    # CFC is order dependent on the asymmetric layout, SHAP is not
    tree = and_tree()
    np.testing.assert_allclose(cfc_tree(tree, x), [0.5 - 0.25, 0.5])
    np.testing.assert_allclose(tree_shap(tree, x), [0.375, 0.375])


def test_same_feature_twice():
    tree = hand_tree([0, -1, 0, -1, -1], [0.5, 0, 1.5, 0, 0], [1, -1, 3, -1, -1], [2, -1, 4, -1, -1],
                     [0, 0, 2, 0, 2], [4, 2, 2, 0 + 1, 1])
    for x in ([0.0, 5.0, 5.0], [1.0, 0.0, 0.0], [2.0, 9.0, -1.0]):
        phi = brute_force_shap(tree, np.array(x))
        assert phi[1] == 0 and phi[2] == 0
        np.testing.assert_allclose(tree_shap(tree, np.array(x)), phi, atol=1e-12)


def test_brute_force_limit():
    tree = hand_tree([-1], [0], [-1], [-1], [2], [5])
    with pytest.raises(ValueError):
        brute_force_shap(tree, np.zeros(16))


def test_oob_node_values_inherit():
    # right child has no OOB samples
    tree = hand_tree([0, -1, -1], [0.5, 0, 0], [1, -1, -1], [2, -1, -1], [3, 0, 3], [6, 3, 3],
                     k_oob=[1, 1, 0], n_oob=[2, 2, 0])
    np.testing.assert_allclose(node_values(tree, Cover.OOB), [0.5, 0.5, 0.5])
    empty = hand_tree([0, -1, -1], [0.5, 0, 0], [1, -1, -1], [2, -1, -1], [3, 0, 3], [6, 3, 3],
                      k_oob=[0, 0, 0], n_oob=[0, 0, 0])
    np.testing.assert_allclose(node_values(empty, "oob"), [0.5, 0.5, 0.5])
    # zero OOB cover everywhere: marginalization falls back to equal weights
    np.testing.assert_allclose(tree_shap(empty, np.array([1.0]), Cover.OOB), 0.0)
    np.testing.assert_allclose(brute_force_shap(empty, np.array([1.0]), Cover.OOB), 0.0)


def test_tree_shap_matches_brute_force():
    for seed in range(30):
        ds, forest = random_forest(seed, n_trees=3, n=int(30 + seed), p=min(2 + seed % 5, 6))
        for tree in forest.trees:
            for cover in Cover:
                for x in ds.features[:3]:
                    np.testing.assert_allclose(tree_shap(tree, x, cover), brute_force_shap(tree, x, cover),
                                               atol=1e-9)


def test_local_accuracy():
    for seed in range(5):
        ds, forest = random_forest(seed, n_trees=6)
        for cover in Cover:
            pred = cover_prediction(forest, ds.features, cover)
            for build in (cfc_forest, shap_forest):
                attr = build(forest, ds.features, cover)
                np.testing.assert_allclose(attr.prediction(), pred, atol=1e-9)


def test_restricted_aggregation():
    ds, forest = random_forest(2, n_trees=40, n=60)
    M = forest.inbag_matrix()
    for agg, mask in (("oob", M == 0), ("inbag", M > 0)):
        attr = shap_forest(forest, ds.features, Cover.INBAG, aggregate=agg)
        leaf = np.stack([node_values(t)[t.apply(ds.features)] for t in forest.trees])
        expect = (mask * leaf).sum(axis=0) / mask.sum(axis=0)
        np.testing.assert_allclose(attr.prediction(), expect, atol=1e-9)
    ds2, small = random_forest(2, n_trees=1, n=60)
    with pytest.raises(ValueError):
        cfc_forest(small, ds2.features, aggregate="oob")
    with pytest.raises(ValueError):
        cfc_forest(forest, ds.features[:5], aggregate="oob")


def test_cfc_zero_sum_inbag():
    for seed in range(5):
        ds, forest = random_forest(seed, n_trees=4)
        for tree in forest.trees:
            f = np.stack([cfc_tree(tree, x, p=ds.p) for x in ds.features])
            np.testing.assert_allclose(tree.inbag_multiplicity @ f, 0.0, atol=1e-10)


def test_dummy_player():
    ds, forest = random_forest(4, n_trees=10, p=6)
    for tree in forest.trees:
        unused = sorted(set(range(ds.p)) - set(tree.feature[tree.internal].tolist()))
        for x in ds.features[:10]:
            assert np.all(cfc_tree(tree, x, p=ds.p)[unused] == 0)
            assert np.all(tree_shap(tree, x, Cover.OOB)[unused] == 0)


def test_symmetry_relabelled_tree():
    ds, forest = random_forest(6, n_trees=5, p=4)
    perm = np.array([2, 0, 3, 1])  # new column j holds old column perm[j]
    inv = np.argsort(perm)
    for tree in forest.trees:
        feat = np.where(tree.feature >= 0, inv[np.maximum(tree.feature, 0)], -1)
        relabelled = Tree(feat, tree.threshold, tree.left, tree.right, tree.counts_in,
                          tree.counts_oob, tree.inbag_multiplicity)
        for x in ds.features[:10]:
            for cover in Cover:
                np.testing.assert_allclose(tree_shap(relabelled, x[perm], cover),
                                           tree_shap(tree, x, cover)[perm], atol=1e-14)
            np.testing.assert_allclose(cfc_tree(relabelled, x[perm]), cfc_tree(tree, x)[perm], atol=1e-14)


def test_symmetry_under_column_swap():
    # shallow trees on continuous features: no exact split ties between columns,
    # which would otherwise go to the lower column index
    rng = np.random.default_rng(0)
    n = 200
    X = rng.normal(size=(n, 3))
    y = (X[:, 0] + X[:, 1] + rng.normal(0, 0.5, n) > 0).astype(int)
    a = Dataset(X, y, ("a", "b", "c"), (None,) * 3, 2)
    b = Dataset(X[:, [1, 0, 2]], y, ("b", "a", "c"), (None,) * 3, 2)
    params = ForestParams(n_trees=10, mtry=3, max_depth=2, seed=5)
    fa, fb = fit_forest(a, params), fit_forest(b, params)
    for build in (cfc_forest, shap_forest):
        va = build(fa, a.features).values
        vb = build(fb, b.features).values
        np.testing.assert_allclose(va, vb[:, [1, 0, 2]], atol=1e-12)


def test_mdi_via_cfc_bridge():
    for seed in range(5):
        ds, forest = random_forest(seed, n_trees=3)
        for tree in forest.trees:
            got = mdi_via_cfc(tree, ds, "inbag")
            np.testing.assert_allclose(got, variance_mdi(tree, ds.features, ds.labels), rtol=1e-10, atol=1e-15)
            w = tree.inbag_multiplicity
            y = ds.labels
            scale = w.sum() / (w * y).sum()
            np.testing.assert_allclose(mdi_via_cfc(tree, ds, "inbag", restricted=True), got * scale,
                                       rtol=1e-10, atol=1e-15)


def test_mdi_via_cfc_edge_cases(small):
    ds, forest = small
    tree = forest.trees[0]
    zero = Dataset(ds.features, np.zeros(ds.n, int), ds.column_names, ds.arity, 2)
    assert np.all(mdi_via_cfc(tree, zero, "inbag") == 0)
    with pytest.raises(ValueError):
        mdi_via_cfc(tree, zero, "inbag", restricted=True)  # no positive rows
    with pytest.raises(ValueError):
        mdi_via_cfc(tree, ds, "test")
    assert mdi_via_cfc(tree, ds, "oob").shape == (ds.p,)


def test_split_importance_weighting(small):
    ds, forest = small
    attr = shap_forest(forest, ds.features, feature_names=ds.column_names)
    zeros = np.zeros(ds.n)
    ones = np.ones(ds.n)
    for split in ("all", "inbag", "oob"):
        assert np.all(split_importance(attr, zeros, split).scores == 0)
        np.testing.assert_allclose(split_importance(attr, ones, split).scores, _mean_signed(attr, split))
    rep = weighted_shap(attr, ds.labels, "oob", normalize=True)
    assert rep.scores.max() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        weighted_shap(cfc_forest(forest, ds.features), ds.labels)
    with pytest.raises(ValueError):
        split_importance(attr, None, "all", weighted=True)


def _mean_signed(attr, split):
    if split == "all":
        return np.abs(attr.values.mean(axis=0))
    M = attr.membership
    mask = (M == 0) if split == "oob" else (M > 0)
    phi = np.einsum("tn,tnp->np", mask, attr.per_tree) / mask.sum(axis=0)[:, None]
    return np.abs(phi.mean(axis=0))


def test_global_cfc_and_serialization(small):
    ds, forest = small
    attr = cfc_forest(forest, ds.features, feature_names=ds.column_names)
    rep = global_cfc(attr)
    np.testing.assert_allclose(rep.scores, np.abs(attr.values).sum(axis=0))
    with pytest.raises(ValueError):
        global_cfc(shap_forest(forest, ds.features[:3]))
    lines = attr.to_csv().splitlines()
    assert lines[0] == "sample_id,feature,value,membership"
    assert len(lines) == 1 + ds.n * ds.p
    d = json.loads(attr.to_json())
    assert len(d["base_value"]) == ds.n and d["kind"] == "cfc"
    assert isinstance(forest, Forest)

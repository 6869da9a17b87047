import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_acc, brute_assignment, dbscan_count, eps_graph_components
from vaegrad.clustering import (NOISE, DbscanParams, GmmParams, Labeling, acc, dbscan,
                                distance_matrix, distance_row, fit_gmm, hungarian, kmeans,
                                top_k_relabel)
from vaegrad.data_io import MixtureSpec, gen_mixture, subsample
from vaegrad.numeric import RandomSource


def two_blobs(n=1000, seed=0):
    rng = RandomSource(seed)
    lab = rng.child("lab").gen.integers(0, 2, n)
    X = np.where(lab[:, None] == 0, [-10.0, 0.0], [10.0, 0.0]) + rng.child("x").normal((n, 2))
    return X, lab


# --- Labeling ---------------------------------------------------------------


def test_labeling_counts_and_canonical_form():
    lab = Labeling([4, NOISE, 4, 9, 2, NOISE])
    assert lab.n_clusters == 3 and lab.n_noise == 2
    assert lab.canonical().labels.tolist() == [0, NOISE, 0, 1, 2, NOISE]


# --- DBSCAN -----------------------------------------------------------------


def test_two_close_points_form_one_cluster():
    lab = dbscan(np.array([[0.0, 0.0], [0.1, 0.0]]), DbscanParams(0.2, 1))
    assert lab.labels.tolist() == [0, 0]


def test_isolated_point_is_noise():
    X = np.array([[0.0, 0.0], [0.1, 0.0], [5.0, 5.0]])
    assert dbscan(X, DbscanParams(0.2, 1)).labels.tolist() == [0, 0, NOISE]


def test_core_count_excludes_self():
    # each point has exactly one other point in range: core for m=1, not for m=2
    X = np.array([[0.0], [0.5]])
    assert dbscan(X, DbscanParams(1.0, 1)).n_clusters == 1
    assert dbscan(X, DbscanParams(1.0, 2)).n_noise == 2


def test_border_point_takes_lowest_adjacent_cluster():
    # cores at both ends, a border point in the middle reachable from both
    X = np.array([[1.0], [0.0], [0.1], [0.2], [0.3], [1.7], [1.8], [1.9], [2.0]])
    lab = dbscan(X, DbscanParams(0.75, 3)).labels
    assert lab.tolist() == [0, 0, 0, 0, 0, 1, 1, 1, 1]
    # reversed input order: the right group now holds the lowest core index
    lab = dbscan(X[::-1].copy(), DbscanParams(0.75, 3)).labels
    assert lab.tolist() == [0, 0, 0, 0, 1, 1, 1, 1, 0]


def test_params_validation():
    with pytest.raises(ValueError):
        DbscanParams(0.0)
    with pytest.raises(ValueError):
        DbscanParams(1.0, 0)


def _isolation_free(rng, n):
    X = rng.normal((n, 2))
    eps = float(np.sort(distance_matrix(X), axis=1)[:, 1].max()) * 1.0001
    return X, eps * float(rng.gen.uniform(1.0, 1.6))


def test_dbscan_m1_matches_union_find_components():
    root = RandomSource(100)
    for s in range(100):
        rng = root.child(s)
        n = int(rng.gen.integers(5, 201))
        X, eps = _isolation_free(rng, n)
        assert dbscan(X, DbscanParams(eps, 1)).n_clusters == eps_graph_components(X, eps)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 60), st.integers(1, 4),
       st.floats(0.05, 1.5))
def test_dbscan_count_matches_core_graph_oracle(seed, n, m, eps):
    X = RandomSource(seed).normal((n, 2))
    lab = dbscan(X, DbscanParams(eps, m))
    assert lab.n_clusters == dbscan_count(X, eps, m)
    # labels are dense and numbered by lowest core index
    ids = [v for v in lab.labels.tolist() if v != NOISE]
    assert sorted(set(ids)) == list(range(lab.n_clusters))


def test_distance_matrix_rows_match_distance_row():
    X = RandomSource(3).normal((50, 4))
    D = distance_matrix(X)
    for i in (0, 17, 49):
        assert np.array_equal(D[i], distance_row(X, i))
    assert np.allclose(D, D.T) and np.all(np.diag(D) == 0)


def test_three_mode_subsample_has_three_dominant_clusters():
    spec = MixtureSpec([[0, 0], [1, 0], [0.5, 0.866]], [0.13 ** 2 * np.eye(2)] * 3,
                       np.full(3, 1 / 3), 10_000, seed=0)
    sub = subsample(gen_mixture(spec), 300, RandomSource(1))
    lab = dbscan(sub.points, DbscanParams(0.2, 2))
    sizes = np.sort(np.bincount(lab.labels[lab.labels != NOISE]))[::-1]
    assert sizes[:3].sum() >= 0.95 * sizes.sum()


def test_top_k_relabel():
    lab = top_k_relabel(Labeling([2, 2, 2, 0, 0, 1, NOISE, 3]), 2)
    assert lab.labels.tolist() == [0, 0, 0, 1, 1, NOISE, NOISE, NOISE]


# --- k-means ----------------------------------------------------------------


def test_kmeans_k_equals_n():
    X = RandomSource(0).normal((6, 2))
    res = kmeans(X, 6, seed=1)
    assert sorted(res.labeling.labels.tolist()) == list(range(6))
    assert res.inertia == 0.0


def test_kmeans_single_cluster_is_mean():
    X = RandomSource(1).normal((40, 3))
    res = kmeans(X, 1)
    np.testing.assert_allclose(res.centers[0], X.mean(axis=0), rtol=1e-12)


def test_kmeans_separated_blobs():
    X, lab = two_blobs()
    assert acc(lab, kmeans(X, 2, seed=0).labeling) >= 0.99


def test_kmeans_reseeds_empty_clusters():
    X = np.array([[0.0], [0.0], [0.0], [10.0]])
    res = kmeans(X, 2, seed=0)
    assert res.labeling.n_clusters == 2


# --- GMM --------------------------------------------------------------------


def test_gmm_single_component_closed_form():
    X = RandomSource(2).normal((300, 3)) @ np.array([[2, 0, 0], [0.5, 1, 0], [0, 0.3, 0.2]])
    reg = 1e-6
    res = fit_gmm(X, GmmParams(1, reg=reg))
    np.testing.assert_allclose(res.means[0], X.mean(axis=0), rtol=0, atol=1e-8)
    cov = np.cov(X.T, bias=True) + reg * np.eye(3)
    np.testing.assert_allclose(res.covariances[0], cov, rtol=0, atol=1e-8)


def test_gmm_separated_blobs():
    X, lab = two_blobs()
    res = fit_gmm(X, GmmParams(2, seed=0))
    assert acc(lab, res.labeling) >= 0.99
    assert np.isclose(res.weights.sum(), 1.0)


def test_gmm_trace_non_decreasing():
    spec = MixtureSpec([[0, 0], [2, 0], [1, 2]], [np.eye(2)] * 3, np.full(3, 1 / 3), 500, 4)
    X = gen_mixture(spec).points
    for seed in range(5):
        trace = fit_gmm(X, GmmParams(3, seed=seed, n_init=1)).trace
        assert all(b >= a - 1e-9 for a, b in zip(trace, trace[1:]))


def test_gmm_rejects_bad_params():
    with pytest.raises(ValueError):
        fit_gmm(np.zeros((2, 2)), GmmParams(3))
    with pytest.raises(ValueError):
        GmmParams(2, reg=0.0)


# --- assignment and accuracy -------------------------------------------------


def test_hungarian_examples():
    perm, cost = hungarian([[0, 1], [1, 0]])
    assert perm.tolist() == [0, 1] and cost == 0
    perm, cost = hungarian([[4, 1], [2, 3]])
    assert perm.tolist() == [1, 0] and cost == 3
    assert hungarian([[5]])[1] == 5
    with pytest.raises(ValueError):
        hungarian([[np.inf, 0], [0, 0]])
    with pytest.raises(ValueError):
        hungarian([[1, 2, 3]])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10_000))
def test_hungarian_matches_brute_force(k, seed):
    C = RandomSource(seed).gen.integers(-20, 20, (k, k)).astype(float)
    perm, cost = hungarian(C)
    assert cost == brute_assignment(C)[1]
    assert sorted(perm.tolist()) == list(range(k))


def test_acc_examples():
    assert acc([0, 1, 1, 2], [0, 1, 1, 2]) == 1.0
    assert acc([0, 1, 1, 2], [5, 3, 3, 9]) == 1.0
    assert acc([0, 0, 1, 1], [1, 1, 1, 0]) == 0.75
    with pytest.raises(ValueError):
        acc([], [])


def test_acc_noise_is_one_more_label():
    # noise may match one true label, but only one
    assert acc([0, 0, 1, 1], [NOISE, NOISE, NOISE, NOISE]) == 0.5


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_acc_invariances(seed):
    rng = RandomSource(seed)
    n = int(rng.gen.integers(1, 40))
    t = rng.child("t").gen.integers(0, 4, n)
    p = rng.child("p").gen.integers(-1, 5, n)
    base = acc(t, p)
    relabel = rng.child("r").gen.permutation(10)[:6]
    assert acc(t, relabel[p + 1]) == base
    order = rng.child("o").gen.permutation(n)
    assert acc(t[order], p[order]) == base


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_acc_matches_exhaustive_bijections(seed):
    rng = RandomSource(seed)
    n = int(rng.gen.integers(1, 20))
    t = rng.child("t").gen.integers(0, 4, n)
    p = rng.child("p").gen.integers(-1, 4, n)
    assert acc(t, p) == pytest.approx(brute_acc(t, p), abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 80), st.integers(1, 4), st.floats(0.05, 1.5))
def test_tree_neighbours_match_dense_distances(seed, n, m, eps):
    X = RandomSource(seed).normal((n, 3))
    a = dbscan(X, DbscanParams(eps, m))
    b = dbscan(X, DbscanParams(eps, m), dist=distance_matrix(X))
    assert np.array_equal(a.labels, b.labels)

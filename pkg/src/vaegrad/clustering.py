"""DBSCAN, Gaussian mixtures, k-means and unsupervised clustering accuracy."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from scipy.special import logsumexp

from .numeric import RandomSource, as_source

NOISE = -1


@dataclass(frozen=True)
class Labeling:
    """Per-point cluster ids ``0..n_clusters-1``; ``NOISE`` (-1) marks noise."""

    labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))

    @property
    def n_clusters(self) -> int:
        lab = self.labels[self.labels != NOISE]
        return int(np.unique(lab).size)

    @property
    def n_noise(self) -> int:
        return int(np.sum(self.labels == NOISE))

    def canonical(self) -> "Labeling":
        """Relabel clusters densely in order of first appearance."""
        out = np.full_like(self.labels, NOISE)
        mapping: dict[int, int] = {}
        for i, l in enumerate(self.labels):
            if l == NOISE:
                continue
            if l not in mapping:
                mapping[l] = len(mapping)
            out[i] = mapping[l]
        return Labeling(out)

    def __len__(self):
        return self.labels.shape[0]


def _as_labels(x) -> np.ndarray:
    return np.asarray(getattr(x, "labels", x), dtype=np.int64)


@dataclass(frozen=True)
class DbscanParams:
    eps: float
    m_core: int = 2

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be > 0")
        if self.m_core < 1:
            raise ValueError("m_core must be >= 1")


_BLOCK_ENTRIES = 1 << 22


def distance_row(X, i) -> np.ndarray:
    diff = X - X[i]
    return np.sqrt(np.sum(diff * diff, axis=1))


def distance_matrix(X) -> np.ndarray:
    """Dense Euclidean distances, elementwise identical to :func:`distance_row`."""
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    out = np.empty((n, n))
    rows = max(1, _BLOCK_ENTRIES // max(1, n * d))
    for s in range(0, n, rows):
        diff = X[s:s + rows, None, :] - X[None, :, :]
        out[s:s + rows] = np.sqrt(np.sum(diff * diff, axis=2))
    return out


def neighbor_pairs(X, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs ``i < j`` with ``|X_i - X_j| <= eps``.

    A k-d tree proposes candidates with a slightly widened radius; the test
    itself uses the same arithmetic as :func:`distance_row`."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] < 2:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    pairs = cKDTree(X).query_pairs(eps * (1 + 1e-9) + 1e-300, output_type="ndarray")
    i, j = pairs[:, 0].astype(np.int64), pairs[:, 1].astype(np.int64)
    diff = X[i] - X[j]
    keep = np.sqrt(np.sum(diff * diff, axis=1)) <= eps
    i, j = i[keep], j[keep]
    order = np.lexsort((j, i))
    return i[order], j[order]


def dbscan(points, params: DbscanParams, dist: np.ndarray | None = None) -> Labeling:
    """DBSCAN where a core point has at least ``m_core`` *other* points within
    ``eps`` (the point itself does not count).

    Clusters are numbered in order of their lowest-index core point.  A border
    point joins the cluster that reaches it first when clusters are expanded
    one after another in that order, i.e. the lowest-numbered adjacent cluster.
    """
    if dist is None:
        i, j = neighbor_pairs(points, params.eps)
        n = np.asarray(points).shape[0]
    else:
        D = np.asarray(dist)
        n = D.shape[0]
        i, j = np.nonzero(np.triu(D <= params.eps, k=1))
    if n == 0:
        return Labeling(np.empty(0, dtype=np.int64))
    # symmetric edge list without self loops
    src, dst = np.concatenate([i, j]), np.concatenate([j, i])
    core = np.bincount(src, minlength=n) >= params.m_core
    labels = np.full(n, NOISE, dtype=np.int64)
    core_idx = np.flatnonzero(core)
    if core_idx.size == 0:
        return Labeling(labels)
    pos = np.full(n, -1, dtype=np.int64)
    pos[core_idx] = np.arange(core_idx.size)
    both = core[src] & core[dst]
    sub = csr_matrix((np.ones(int(both.sum())), (pos[src[both]], pos[dst[both]])),
                     shape=(core_idx.size, core_idx.size))
    _, comp = connected_components(sub, directed=False)
    # renumber components by their lowest core index
    first = {}
    for c in comp:
        if c not in first:
            first[c] = len(first)
    labels[core_idx] = [first[c] for c in comp]
    # border points take the lowest adjacent cluster id
    edge = ~core[src] & core[dst]
    if np.any(edge):
        best = np.full(n, np.iinfo(np.int64).max)
        np.minimum.at(best, src[edge], labels[dst[edge]])
        hit = best != np.iinfo(np.int64).max
        labels[hit] = best[hit]
    return Labeling(labels)


def top_k_relabel(labeling, k: int, bucket: int = NOISE) -> Labeling:
    """Keep the ``k`` most frequent clusters (relabelled 0..k-1 by size) and
    send everything else, noise included, to ``bucket``."""
    lab = _as_labels(labeling)
    ids, counts = np.unique(lab[lab != NOISE], return_counts=True)
    order = np.lexsort((ids, -counts))[:k]
    out = np.full_like(lab, bucket)
    for new, old in enumerate(ids[order]):
        out[lab == old] = new
    return Labeling(out)


# --------------------------------------------------------------------------
# k-means


def _kmeanspp(X: np.ndarray, k: int, rng: RandomSource) -> np.ndarray:
    n = X.shape[0]
    centers = [X[rng.gen.integers(n)]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.gen.integers(n)
        else:
            idx = int(rng.gen.choice(n, p=d2 / total))
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers)


def _sq_dists(X, C):
    return np.sum((X[:, None, :] - C[None, :, :]) ** 2, axis=2)


@dataclass
class KMeansResult:
    labeling: Labeling
    centers: np.ndarray
    inertia: float
    iterations: int


def kmeans(points, k: int, seed: int = 0, max_iter: int = 300) -> KMeansResult:
    """k-means++ seeding then Lloyd iterations until assignments stop changing.

    An empty cluster is re-seeded at the point farthest from its centroid.
    """
    X = np.asarray(points, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    C = _kmeanspp(X, k, as_source(seed).child("kmeans++"))
    assign = None
    it = 0
    for it in range(1, max_iter + 1):
        dist = _sq_dists(X, C)
        new = np.argmin(dist, axis=1)
        counts = np.bincount(new, minlength=k)
        for j in np.flatnonzero(counts == 0):
            far = int(np.argmax(dist[np.arange(n), new]))
            C[j] = X[far]
            dist = _sq_dists(X, C)
            new = np.argmin(dist, axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(k):
            members = X[assign == j]
            if members.shape[0]:
                C[j] = members.mean(axis=0)
    inertia = float(np.sum((X - C[assign]) ** 2))
    return KMeansResult(Labeling(assign), C, inertia, it)


# --------------------------------------------------------------------------
# Gaussian mixture


@dataclass(frozen=True)
class GmmParams:
    k: int
    max_iter: int = 200
    tol: float = 1e-6
    n_init: int = 3
    seed: int = 0
    reg: float = 1e-6

    def __post_init__(self):
        if self.k < 1 or self.n_init < 1 or self.max_iter < 1:
            raise ValueError("invalid GMM parameters")
        if not self.reg > 0:
            raise ValueError("covariance regularisation must be > 0")


@dataclass
class GmmResult:
    labeling: Labeling
    means: np.ndarray
    covariances: np.ndarray
    weights: np.ndarray
    trace: list  # objective per EM iteration (per-point average)

    @property
    def log_likelihood(self) -> float:
        return self.trace[-1]


def _component_logpdf(X, means, covs):
    n, d = X.shape
    out = np.empty((n, means.shape[0]))
    for j in range(means.shape[0]):
        try:
            L = np.linalg.cholesky(covs[j])
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(f"covariance {j} is singular") from exc
        r = np.linalg.solve(L, (X - means[j]).T)
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        out[:, j] = -0.5 * (np.sum(r * r, axis=0) + logdet + d * np.log(2 * np.pi))
    return out


def _objective(X, means, covs, weights, reg_total):
    lp = _component_logpdf(X, means, covs) + np.log(weights)[None, :]
    norm = logsumexp(lp, axis=1)
    penalty = 0.0
    for c in covs:
        penalty += np.trace(np.linalg.inv(c))
    n = X.shape[0]
    return (float(norm.sum()) - 0.5 * reg_total * penalty) / n, lp - norm[:, None]


def _m_step(X, resp, reg_total):
    n, d = X.shape
    nk = resp.sum(axis=0) + 10 * np.finfo(float).tiny
    means = (resp.T @ X) / nk[:, None]
    covs = np.empty((resp.shape[1], d, d))
    for j in range(resp.shape[1]):
        diff = X - means[j]
        covs[j] = ((resp[:, j, None] * diff).T @ diff + reg_total * np.eye(d)) / nk[j]
    return means, covs, nk / n


def _em(X, resp, params: GmmParams):
    reg_total = params.reg * X.shape[0]
    means, covs, weights = _m_step(X, resp, reg_total)
    trace = []
    for _ in range(params.max_iter):
        obj, log_resp = _objective(X, means, covs, weights, reg_total)
        trace.append(obj)
        if len(trace) > 1 and trace[-1] - trace[-2] < params.tol:
            break
        means, covs, weights = _m_step(X, np.exp(log_resp), reg_total)
    return means, covs, weights, trace, log_resp


def fit_gmm(points, params: GmmParams) -> GmmResult:
    """Full-covariance EM with k-means++ initialised restarts.

    Each M-step sets ``cov_j = (S_j + reg * n * I) / N_j``, the exact maximiser
    of the log-likelihood penalised by ``reg * n / 2 * sum_j tr(cov_j^-1)``.
    The recorded trace is that penalised objective divided by n, so it never
    decreases; for ``k = 1`` the fit is the sample covariance plus ``reg * I``.
    """
    X = np.asarray(points, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= params.k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={params.k}, n={n}")
    root = RandomSource(params.seed)
    best = None
    for r in range(params.n_init):
        C = _kmeanspp(X, params.k, root.child("init", r))
        resp = np.zeros((n, params.k))
        resp[np.arange(n), np.argmin(_sq_dists(X, C), axis=1)] = 1.0
        means, covs, weights, trace, log_resp = _em(X, resp, params)
        if best is None or trace[-1] > best[3][-1]:
            best = (means, covs, weights, trace, log_resp)
    means, covs, weights, trace, log_resp = best
    labels = np.argmax(log_resp, axis=1)
    return GmmResult(Labeling(labels), means, covs, weights, trace)


# --------------------------------------------------------------------------
# accuracy


def hungarian(cost) -> tuple[np.ndarray, float]:
    """Minimum-cost assignment for a square matrix: ``(perm, cost)`` with row
    ``i`` assigned to column ``perm[i]``."""
    C = np.asarray(cost, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError("cost matrix must be square")
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix has non-finite entries")
    rows, cols = linear_sum_assignment(C)
    perm = np.empty(C.shape[0], dtype=np.int64)
    perm[rows] = cols
    return perm, float(C[rows, cols].sum())


def contingency(true_labels, predicted) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    t = _as_labels(true_labels)
    p = _as_labels(predicted)
    if t.shape != p.shape:
        raise ValueError("label arrays differ in length")
    tv, ti = np.unique(t, return_inverse=True)
    pv, pi = np.unique(p, return_inverse=True)
    M = np.zeros((pv.size, tv.size), dtype=np.int64)
    np.add.at(M, (pi, ti), 1)
    return M, pv, tv


def acc(true_labels, predicted) -> float:
    """Best one-to-one matching of predicted ids (noise is just another id)
    to true labels, as a fraction of points matched correctly."""
    t = _as_labels(true_labels)
    if t.size == 0:
        raise ValueError("acc of empty labelings")
    M, _, _ = contingency(t, predicted)
    size = max(M.shape)
    padded = np.zeros((size, size))
    padded[:M.shape[0], :M.shape[1]] = M
    _, cost = hungarian(-padded)
    return -cost / t.size

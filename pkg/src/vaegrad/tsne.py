"""Exact (O(n^2)) t-SNE to two dimensions."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numba
import numpy as np

from .numeric import RandomSource

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 30.0
    iterations: int = 1000
    learning_rate: float = 200.0
    momentum: float = 0.5
    final_momentum: float = 0.8
    momentum_switch: int = 250
    exaggeration: float = 12.0
    exaggeration_iters: int = 250
    seed: int = 0
    entropy_tol: float = 1e-4
    record_every: int = 50

    def __post_init__(self):
        if self.perplexity <= 1 or self.iterations < 1:
            raise ValueError("perplexity must be > 1 and iterations >= 1")


@dataclass
class TsneResult:
    embedding: np.ndarray
    kl: list = field(default_factory=list)  # (iteration, KL(P||Q)) pairs


def _sq_distances(X):
    sq = np.sum(X * X, axis=1)
    D = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.maximum(D, 0.0, out=D)
    np.fill_diagonal(D, 0.0)
    return D


def _row_entropy(D, beta):
    """Entropy (nats) and normalised rows of exp(-beta * D).

    Rows of ``D`` hold squared distances to the *other* points only."""
    E = D - D.min(axis=1, keepdims=True)
    P = np.exp(-beta[:, None] * E)
    s = P.sum(axis=1)
    H = np.log(s) + beta * np.sum(E * P, axis=1) / s
    return H, P / s[:, None]


def conditional_affinities(X, perplexity: float, tol: float = 1e-4,
                           max_iter: int = 200) -> tuple[np.ndarray, np.ndarray]:
    """Row-stochastic p(j|i) with per-row precision found by bisection so that
    each row's entropy equals ``log(perplexity)`` within ``tol``.

    Returns ``(P_cond, entropies)``.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < 3 * perplexity + 1:
        raise ValueError(f"perplexity {perplexity} infeasible for {n} points "
                         f"(need 3 * perplexity < n)")
    # drop the diagonal: row i keeps distances to the n - 1 other points
    off = ~np.eye(n, dtype=bool)
    D = _sq_distances(X)[off].reshape(n, n - 1)
    target = np.log(perplexity)
    scale = D.mean(axis=1)
    beta = 1.0 / np.where(scale > 0, scale, 1.0)
    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    H = np.empty(n)
    Pc = np.empty((n, n - 1))
    active = np.arange(n)
    for _ in range(max_iter):
        h, p = _row_entropy(D[active], beta[active])
        H[active] = h
        Pc[active] = p
        err = h - target
        todo = np.abs(err) >= tol
        if not np.any(todo):
            active = active[:0]
            break
        active, err = active[todo], err[todo]
        b = beta[active]
        too_flat = err > 0  # entropy too high: sharpen
        lo[active] = np.where(too_flat, b, lo[active])
        hi[active] = np.where(too_flat, hi[active], b)
        beta[active] = np.where(np.isinf(hi[active]), b * 2.0, 0.5 * (lo[active] + hi[active]))
    if active.size:
        raise ValueError(f"perplexity search did not converge for row {int(active[0])}")
    P = np.zeros((n, n))
    P[off] = Pc.ravel()
    return P, H


def joint_affinities(X, perplexity: float, tol: float = 1e-4) -> np.ndarray:
    P, _ = conditional_affinities(X, perplexity, tol)
    P = P + P.T
    P = np.maximum(P / P.sum(), 1e-12)
    np.fill_diagonal(P, 0.0)
    return P / P.sum()


@numba.njit(cache=True)
def _gradient(Y, P, exag):
    """KL gradient w.r.t. Y and KL(P || Q) for the un-exaggerated P.

    Serial loops with a fixed summation order; no n x n temporaries."""
    n = Y.shape[0]
    z = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            d0 = Y[i, 0] - Y[j, 0]
            d1 = Y[i, 1] - Y[j, 1]
            z += 2.0 / (1.0 + d0 * d0 + d1 * d1)
    grad = np.zeros((n, 2))
    kl = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            d0 = Y[i, 0] - Y[j, 0]
            d1 = Y[i, 1] - Y[j, 1]
            num = 1.0 / (1.0 + d0 * d0 + d1 * d1)
            q = num / z
            p = P[i, j]
            if p > 0.0:
                kl += 2.0 * p * np.log(p / max(q, 1e-300))
            w = 4.0 * (exag * p - q) * num
            grad[i, 0] += w * d0
            grad[i, 1] += w * d1
            grad[j, 0] -= w * d0
            grad[j, 1] -= w * d1
    return grad, kl


def tsne(points, cfg: TsneConfig = TsneConfig()) -> TsneResult:
    X = np.asarray(getattr(points, "points", points), dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise ValueError("points contain non-finite values")
    n = X.shape[0]
    P = joint_affinities(X, cfg.perplexity, cfg.entropy_tol)
    Y = 1e-4 * RandomSource(cfg.seed).child("tsne-init").normal((n, 2))
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    trace = []
    for it in range(cfg.iterations):
        exag = cfg.exaggeration if it < cfg.exaggeration_iters else 1.0
        mom = cfg.momentum if it < cfg.momentum_switch else cfg.final_momentum
        grad, kl = _gradient(Y, P, exag)
        same = np.sign(grad) == np.sign(update)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        update = mom * update - cfg.learning_rate * gains * grad
        Y = Y + update
        Y = Y - Y.mean(axis=0)
        if not np.all(np.isfinite(Y)):
            raise FloatingPointError(f"t-SNE embedding became non-finite at iteration {it}")
        if (it + 1) % cfg.record_every == 0 or it == cfg.iterations - 1:
            trace.append((it + 1, kl))
    log.debug("t-SNE final KL %.4f", trace[-1][1])
    return TsneResult(Y, trace)


def embed(points, cfg: TsneConfig = TsneConfig()) -> np.ndarray:
    """Centred n x 2 t-SNE coordinates."""
    return tsne(points, cfg).embedding

"""Density-gradient estimates for a VAE and gradient ascent on them.

For a Gaussian decoder p(x|z) = N(mu(z), s2 I) the score of the marginal is

    s2 * grad log p(x) = E_{p(z|x)}[mu(z)] - x,

so sampling z from the posterior (here: the encoder q(z|x)) and averaging
reconstructions gives an unbiased direction.  Smoothing draws the posterior
at x + eps, eps ~ N(0, sigma I), where ``sigma`` is a variance.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .numeric import RandomSource, as_source
from .vae import VaeModel, decode, encode


@dataclass(frozen=True)
class SmoothedGradConfig:
    sigma: float = 0.0005
    m_outer: int = 1
    n_inner: int = 1

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("smoothing variance must be >= 0")
        if self.m_outer < 1 or self.n_inner < 1:
            raise ValueError("sample counts must be >= 1")


@dataclass(frozen=True)
class AscentConfig:
    eta: float = 0.001
    steps: int = 7000
    seed: int = 0
    record_every: int | None = None

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("step size must be > 0")
        if self.steps < 0:
            raise ValueError("iteration count must be >= 0")
        if self.record_every is not None and self.record_every < 1:
            raise ValueError("record stride must be >= 1")


@dataclass(frozen=True)
class GradientEstimate:
    direction: np.ndarray
    n_samples: int


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite {what}")


def direction_samples(model: VaeModel, x, n: int, rng) -> np.ndarray:
    """``n`` single-draw directions ``mu(z_i) - x`` with ``z_i ~ q(z|x)``, one per row."""
    rng = as_source(rng)
    x = np.asarray(x, dtype=np.float64)
    mu, logvar = encode(model, x)
    u = rng.normal((n, model.latent_dim))
    z = mu + np.exp(0.5 * logvar) * u
    rec = decode(model, z)
    _check_finite(rec, "decoder output")
    return rec - x


def grad_direction(model: VaeModel, x, n_inner: int, rng) -> GradientEstimate:
    """Posterior-sampled estimate of ``s2 * grad log p(x)``."""
    if n_inner < 1:
        raise ValueError("n_inner must be >= 1")
    d = direction_samples(model, x, n_inner, rng).mean(axis=0)
    return GradientEstimate(d, n_inner)


def _smoothed_batch(model: VaeModel, X: np.ndarray, noise: np.ndarray,
                    cfg: SmoothedGradConfig) -> np.ndarray:
    """Smoothed directions for rows of X given per-row standard normals.

    ``noise`` has shape (P, m*D + m*n*L): the first m*D entries perturb the
    input, the rest reparameterise latent draws.
    """
    P, D = X.shape
    L, m, n = model.latent_dim, cfg.m_outer, cfg.n_inner
    eps = noise[:, :m * D].reshape(P, m, D)
    u = noise[:, m * D:].reshape(P, m, n, L)
    xt = X[:, None, :] + math.sqrt(cfg.sigma) * eps
    mu, logvar = encode(model, xt.reshape(P * m, D))
    z = mu.reshape(P, m, 1, L) + np.exp(0.5 * logvar).reshape(P, m, 1, L) * u
    rec = decode(model, z.reshape(P * m * n, L)).reshape(P, m * n, D)
    return rec.mean(axis=1) - X


def _noise_width(model: VaeModel, cfg: SmoothedGradConfig) -> int:
    m, n = cfg.m_outer, cfg.n_inner
    return m * model.data_dim + m * n * model.latent_dim


def grad_direction_smoothed(model: VaeModel, x, cfg: SmoothedGradConfig,
                            rng) -> GradientEstimate:
    """Estimate of ``s2 * grad log p_sigma(x)``:
    ``(1/m) sum_k (1/n) sum_i mu(z_i) - x`` with ``z_i ~ q(z | x + eps_k)``."""
    rng = as_source(rng)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != model.data_dim:
        raise ValueError(f"expected a vector of length {model.data_dim}")
    noise = rng.normal((1, _noise_width(model, cfg)))
    d = _smoothed_batch(model, x[None, :], noise, cfg)[0]
    _check_finite(d, "gradient estimate")
    return GradientEstimate(d, cfg.m_outer * cfg.n_inner)


def _gaussian_log_density(x, mean, s2):
    D = x.shape[-1]
    r = x - mean
    return -0.5 * np.sum(r * r, axis=-1) / s2 - 0.5 * D * math.log(2 * math.pi * s2)


def naive_grad_p(model: VaeModel, x, n: int, rng) -> np.ndarray:
    """Prior-sampling estimate ``(1/n) sum_j grad_x p(x|z_j)``, ``z_j ~ N(0, I)``.

    Diagnostic only; most draws land where p(x|z) is negligible.
    """
    return _naive_terms(model, x, n, rng)[0]


def naive_grad_log_p(model: VaeModel, x, n: int, rng) -> np.ndarray:
    """Self-normalised prior-sampling estimate of ``grad log p(x)``
    (same draws for numerator and denominator)."""
    g, p = _naive_terms(model, x, n, rng)
    return g / p


def _naive_terms(model: VaeModel, x, n: int, rng):
    rng = as_source(rng)
    x = np.asarray(x, dtype=np.float64)
    z = rng.normal((n, model.latent_dim))
    mu = decode(model, z)
    logp = _gaussian_log_density(x, mu, model.sigma2_x)
    with np.errstate(over="raise", under="ignore"):
        try:
            dens = np.exp(logp)
        except FloatingPointError as exc:
            raise OverflowError("conditional density overflows") from exc
    if not np.any(dens > 0):
        raise ArithmeticError("conditional density underflows for every prior draw")
    grads = dens[:, None] * (mu - x) / model.sigma2_x
    return grads.mean(axis=0), float(dens.mean())


# --------------------------------------------------------------------------
# ascent

_BLOCK = 256
_NOISE_BUDGET = 1 << 22  # float64 entries buffered per block


def _point_source(seed: int, index: int) -> RandomSource:
    return RandomSource(seed).child("ascend", int(index))


def _ascend_block(model, X0, indices, acfg: AscentConfig, scfg: SmoothedGradConfig):
    X = np.array(X0, dtype=np.float64, copy=True)
    P = X.shape[0]
    K = _noise_width(model, scfg)
    sources = [_point_source(acfg.seed, i) for i in indices]
    traj = [X.copy()] if acfg.record_every else None
    chunk = max(1, min(acfg.steps, _NOISE_BUDGET // max(1, P * K)))
    t = 0
    while t < acfg.steps:
        c = min(chunk, acfg.steps - t)
        # per-point streams: concatenated chunks equal one long draw
        noise = np.stack([s.normal((c, K)) for s in sources], axis=0)
        for j in range(c):
            d = _smoothed_batch(model, X, noise[:, j, :], scfg)
            X = X + acfg.eta * d
            bad = ~np.all(np.isfinite(X), axis=1)
            if np.any(bad):
                p = int(indices[int(np.flatnonzero(bad)[0])])
                raise FloatingPointError(f"non-finite iterate at iteration {t + j} (point {p})")
            if traj is not None and (t + j + 1) % acfg.record_every == 0:
                traj.append(X.copy())
        t += c
    return X, traj


def ascend(model: VaeModel, x0, acfg: AscentConfig, scfg: SmoothedGradConfig,
           index: int = 0):
    """``steps`` iterations of ``x <- x + eta * d`` with fresh smoothed
    directions each step.  Noise comes from the stream of point ``index``
    under ``acfg.seed``, so this matches row ``index`` of :func:`ascend_dataset`.

    Returns ``x_T``, or ``(x_T, trajectory)`` when ``record_every`` is set.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    X, traj = _ascend_block(model, x0[None, :], [index], acfg, scfg)
    if acfg.record_every:
        return X[0], np.stack([s[0] for s in traj])
    return X[0]


def ascend_dataset(model: VaeModel, points, acfg: AscentConfig,
                   scfg: SmoothedGradConfig, threads: int = 1):
    """Ascend every row of ``points``; row i uses the stream of index i.

    Output is independent of ``threads``.  With ``record_every`` set, also
    returns trajectories of shape (n_records, n, D).
    """
    X = np.asarray(getattr(points, "points", points), dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.data_dim:
        raise ValueError(f"points must have shape (n, {model.data_dim})")
    n = X.shape[0]
    blocks = [np.arange(s, min(s + _BLOCK, n)) for s in range(0, n, _BLOCK)]

    def run(idx):
        return _ascend_block(model, X[idx], idx, acfg, scfg)

    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(run, blocks))
    else:
        results = [run(b) for b in blocks]
    out = np.concatenate([r[0] for r in results], axis=0) if results else X.copy()
    if acfg.record_every:
        if not results:
            return out, np.empty((1, 0, model.data_dim))
        traj = np.concatenate([np.stack(r[1]) for r in results], axis=1)
        return out, traj
    return out

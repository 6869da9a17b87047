"""Cluster-count suggestion from DBSCAN counts over a range of radii.

For every eps on a grid the number of DBSCAN clusters (noise ignored) is
recorded; the count that stays constant over the most consecutive grid
points is the suggestion.  Repeating on random subsamples and averaging
suppresses bridges between nearby clusters.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .clustering import DbscanParams, dbscan, distance_matrix, distance_row
from .numeric import RandomSource

log = logging.getLogger(__name__)


class NoSignalError(ValueError):
    """Raised when no count above one persists anywhere on the curve."""


@dataclass(frozen=True)
class EpsGrid:
    eps_min: float
    eps_max: float
    step: float

    def __post_init__(self):
        if not (self.eps_min > 0 and self.eps_max > self.eps_min and self.step > 0):
            raise ValueError(f"invalid eps grid {self}")
        if len(self.values()) < 3:
            raise ValueError("eps grid must have at least 3 points")

    @classmethod
    def uniform(cls, eps_min: float, eps_max: float, n_points: int = 200) -> "EpsGrid":
        return cls(eps_min, eps_max, (eps_max - eps_min) / (n_points - 1))

    def values(self) -> np.ndarray:
        k = int(np.floor((self.eps_max - self.eps_min) / self.step + 1e-9)) + 1
        return self.eps_min + self.step * np.arange(k)


@dataclass
class PersistenceCurve:
    eps: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        self.eps = np.asarray(self.eps, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.eps.shape != self.counts.shape:
            raise ValueError("eps and counts differ in length")
        if np.any(np.diff(self.eps) <= 0):
            raise ValueError("eps must be strictly increasing")


@dataclass(frozen=True)
class ScanConfig:
    m_core: int = 2
    grid: EpsGrid | None = None  # None: default grid per subsample
    subsample: int = 1000
    runs: int = 50
    seed: int = 0
    grid_points: int = 200

    def __post_init__(self):
        if self.runs < 1 or self.m_core < 1 or self.subsample < 1:
            raise ValueError("invalid scan config")


@dataclass
class ScanResult:
    mean: float
    counts: list  # per run; None where the run had no signal
    no_signal: int
    curves: list = field(default_factory=list, repr=False)

    @property
    def valid_counts(self) -> list:
        return [c for c in self.counts if c is not None]

    def mode(self) -> int:
        vals, freq = np.unique(self.valid_counts, return_counts=True)
        return int(vals[np.argmax(freq)])


# --------------------------------------------------------------------------
# distances and the mutual-reachability tree

_BLOCK_ENTRIES = 1 << 22


def core_radii(X, m_core: int) -> np.ndarray:
    """Distance to the ``m_core``-th nearest *other* point (inf if too few)."""
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if n - 1 < m_core:
        return np.full(n, np.inf)
    r = np.empty(n)
    rows = max(1, _BLOCK_ENTRIES // max(1, n * d))
    for s in range(0, n, rows):
        diff = X[s:s + rows, None, :] - X[None, :, :]
        D = np.sqrt(np.sum(diff * diff, axis=2))
        # self distance is 0 and sorts first, so index m_core is the m-th other
        r[s:s + rows] = np.partition(D, m_core, axis=1)[:, m_core]
    return r


def reachability_tree(X, m_core: int) -> tuple[np.ndarray, np.ndarray]:
    """``(core radii, MST edge weights)`` of the mutual-reachability graph
    ``w(i, j) = max(d(i, j), r_i, r_j)`` (Prim, O(n^2) time, O(n) memory)."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    r = core_radii(X, m_core)
    if n <= 1:
        return r, np.empty(0)
    in_tree = np.zeros(n, dtype=bool)
    best = np.full(n, np.inf)
    weights = np.empty(n - 1)
    v = 0
    for k in range(n - 1):
        in_tree[v] = True
        w = np.maximum(np.maximum(distance_row(X, v), r[v]), r)
        np.minimum(best, w, out=best)
        best[in_tree] = np.inf
        v = int(np.argmin(best))
        weights[k] = best[v]
    return r, np.sort(weights)


def counts_from_tree(radii, weights, eps) -> np.ndarray:
    eps = np.asarray(eps, dtype=np.float64)
    cores = np.searchsorted(np.sort(radii), eps, side="right")
    merged = np.searchsorted(weights, eps, side="right")
    return (cores - merged).astype(np.int64)


# --------------------------------------------------------------------------
# curves


def curve(points, m_core: int, grid, method: str = "tree") -> PersistenceCurve:
    """DBSCAN cluster counts (noise ignored) at every grid radius.

    ``method="tree"`` reads all counts off one mutual-reachability spanning
    tree; ``method="dbscan"`` reruns :func:`dbscan` per radius.  Both give the
    same counts.
    """
    X = np.asarray(getattr(points, "points", points), dtype=np.float64)
    eps = grid.values() if isinstance(grid, EpsGrid) else np.asarray(grid, dtype=np.float64)
    if method == "tree":
        radii, weights = reachability_tree(X, m_core)
        counts = counts_from_tree(radii, weights, eps)
    elif method == "dbscan":
        D = distance_matrix(X)
        counts = np.array([dbscan(X, DbscanParams(e, m_core), dist=D).n_clusters
                           for e in eps])
    else:
        raise ValueError(f"unknown method {method!r}")
    return PersistenceCurve(eps, counts)


def default_grid(points, m_core: int, n_points: int = 200) -> EpsGrid:
    """Grid from the 1st percentile of nearest-neighbour distances up to the
    first doubling of that radius beyond which the count stays at one."""
    X = np.asarray(getattr(points, "points", points), dtype=np.float64)
    if X.shape[0] <= m_core:
        raise ValueError("need more points than m_core for a default grid")
    nn = core_radii(X, 1)
    pos = nn[nn > 0]
    if pos.size == 0:
        raise ValueError("all points coincide")
    eps_min = float(np.percentile(pos, 1))
    radii, weights = reachability_tree(X, m_core)
    breaks = np.unique(np.concatenate([radii, weights]))
    at_breaks = counts_from_tree(radii, weights, breaks)
    not_one = np.flatnonzero(at_breaks != 1)
    settle = breaks[not_one[-1] + 1] if not_one.size else breaks[0]
    eps_max = 2.0 * eps_min
    while eps_max < settle:
        eps_max *= 2.0
    return EpsGrid.uniform(eps_min, eps_max, n_points)


def _runs(counts):
    """(value, start, length) for maximal runs of equal consecutive values."""
    out = []
    start = 0
    for i in range(1, len(counts) + 1):
        if i == len(counts) or counts[i] != counts[start]:
            out.append((int(counts[start]), start, i - start))
            start = i
    return out


def most_persistent(c: PersistenceCurve) -> int:
    """Count with the longest run of consecutive grid points, ignoring counts
    0 and 1.  Ties go to the run at larger eps."""
    counts = c.counts if isinstance(c, PersistenceCurve) else np.asarray(c)
    if len(counts) == 0:
        raise ValueError("empty curve")
    best = None
    for value, start, length in _runs(counts):
        if value <= 1:
            continue
        if best is None or length >= best[2]:
            best = (value, start, length)
    if best is None:
        raise NoSignalError("no count above one on the curve")
    return best[0]


def plateau_length(c: PersistenceCurve, count: int) -> int:
    """Longest run (in grid points) at which the curve equals ``count``."""
    counts = c.counts if isinstance(c, PersistenceCurve) else np.asarray(c)
    lengths = [length for value, _, length in _runs(counts) if value == count]
    return max(lengths, default=0)


def scan_average(points, cfg: ScanConfig) -> ScanResult:
    """Average most persistent count over ``cfg.runs`` random subsamples."""
    X = np.asarray(getattr(points, "points", points), dtype=np.float64)
    n = X.shape[0]
    if cfg.subsample > n:
        raise ValueError(f"subsample size {cfg.subsample} exceeds {n} points")
    root = RandomSource(cfg.seed)
    counts, curves = [], []
    for r in range(cfg.runs):
        idx = root.child("scan", r).gen.choice(n, size=cfg.subsample, replace=False)
        sub = X[idx]
        grid = cfg.grid if cfg.grid is not None else default_grid(sub, cfg.m_core,
                                                                   cfg.grid_points)
        c = curve(sub, cfg.m_core, grid)
        curves.append(c)
        try:
            counts.append(most_persistent(c))
        except NoSignalError:
            counts.append(None)
    valid = [k for k in counts if k is not None]
    if not valid:
        raise NoSignalError(f"all {cfg.runs} runs lacked a persistent count")
    res = ScanResult(float(np.mean(valid)), counts, cfg.runs - len(valid), curves)
    log.info("scan mean %.2f over %d runs (%d without signal)", res.mean, len(valid),
             res.no_signal)
    return res

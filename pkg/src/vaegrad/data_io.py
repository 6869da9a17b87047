"""Datasets: IDX image/label files, synthetic Gaussian mixtures, subsampling,
and the CSV/JSON artifacts written by the pipeline."""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numeric import RandomSource, as_source

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
NOISE_CODE = -1


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    points: np.ndarray
    labels: np.ndarray | None = None
    note: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2:
            raise ValueError("points must be a 2-D array")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.points.shape[0],):
                raise ValueError("labels length must equal number of points")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("points contain non-finite values")

    def __len__(self):
        return self.points.shape[0]


# --------------------------------------------------------------------------
# IDX


def _read_header(buf: bytes, path, expected_magic: int, ndim: int):
    if len(buf) < 4 + 4 * ndim:
        raise IdxFormatError(f"{path}: truncated header")
    magic = struct.unpack(">I", buf[:4])[0]
    if magic != expected_magic:
        raise IdxFormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    dims = struct.unpack(f">{ndim}I", buf[4:4 + 4 * ndim])
    return dims, 4 + 4 * ndim


def read_idx_images(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (count, rows, cols), off = _read_header(buf, path, IDX_IMAGES, 3)
    need = count * rows * cols
    if len(buf) - off < need:
        raise IdxFormatError(f"{path}: expected {need} pixel bytes, found {len(buf) - off}")
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=off).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (count,), off = _read_header(buf, path, IDX_LABELS, 1)
    if len(buf) - off < count:
        raise IdxFormatError(f"{path}: expected {count} label bytes, found {len(buf) - off}")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=off)


def load_idx(images_path, labels_path=None) -> Dataset:
    """Images flattened to rows and scaled to [0, 1] by /255."""
    imgs = read_idx_images(images_path)
    points = imgs.reshape(imgs.shape[0], -1).astype(np.float64) / 255.0
    labels = None
    if labels_path is not None:
        labels = read_idx_labels(labels_path).astype(np.int64)
        if labels.shape[0] != points.shape[0]:
            raise IdxFormatError(f"{points.shape[0]} images but {labels.shape[0]} labels")
    return Dataset(points, labels, f"idx:{Path(images_path).name}")


def write_idx_images(path, images) -> None:
    images = np.asarray(images, dtype=np.uint8)
    count, rows, cols = images.shape
    Path(path).write_bytes(struct.pack(">4I", IDX_IMAGES, count, rows, cols) + images.tobytes())


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">2I", IDX_LABELS, labels.shape[0]) + labels.tobytes())


# --------------------------------------------------------------------------
# synthetic data


@dataclass
class MixtureSpec:
    means: np.ndarray
    covariances: np.ndarray
    weights: np.ndarray
    n: int
    seed: int = 0

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        k, d = self.means.shape
        self.covariances = np.asarray(self.covariances, dtype=np.float64).reshape(k, d, d)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (k,) or np.any(self.weights < 0):
            raise ValueError("weights must be k non-negative numbers")
        if not np.isclose(self.weights.sum(), 1.0):
            raise ValueError("weights must sum to 1")
        for j, c in enumerate(self.covariances):
            if not np.allclose(c, c.T):
                raise ValueError(f"covariance {j} is not symmetric")
            if np.linalg.eigvalsh(c).min() < -1e-10 * max(1.0, np.abs(c).max()):
                raise ValueError(f"covariance {j} is not positive semi-definite")
        if self.n < 0:
            raise ValueError("n must be >= 0")


def _psd_factor(c: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(c)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def gen_mixture(spec: MixtureSpec) -> Dataset:
    """Component by weight, then a Gaussian draw; labels are component ids."""
    rng = RandomSource(spec.seed).child("mixture")
    k, d = spec.means.shape
    comp = rng.gen.choice(k, size=spec.n, p=spec.weights)
    u = rng.normal((spec.n, d))
    X = np.empty((spec.n, d))
    for j in range(k):
        idx = comp == j
        X[idx] = spec.means[j] + u[idx] @ _psd_factor(spec.covariances[j]).T
    return Dataset(X, comp.astype(np.int64), f"mixture:k={k},d={d},seed={spec.seed}")


def subsample(dataset: Dataset, size: int, rng) -> Dataset:
    n = len(dataset)
    if not 0 <= size <= n:
        raise ValueError(f"cannot draw {size} of {n} points")
    idx = as_source(rng).gen.choice(n, size=size, replace=False)
    labels = None if dataset.labels is None else dataset.labels[idx]
    return Dataset(dataset.points[idx].reshape(size, dataset.points.shape[1]), labels,
                   dataset.note)


# --------------------------------------------------------------------------
# CSV / JSON artifacts


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))  # shortest round-trip repr, <= 17 significant digits
    return str(int(v))


def _write_rows(path, header, rows) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def export_points(path, dataset: Dataset) -> None:
    """Rows ``index, label, x0..x{d-1}``; label column is -1 when absent."""
    X = dataset.points
    labels = dataset.labels if dataset.labels is not None else np.full(len(X), NOISE_CODE)
    header = ["index", "label"] + [f"x{j}" for j in range(X.shape[1])]
    _write_rows(path, header, ([i, labels[i], *X[i]] for i in range(len(X))))


def read_points(path) -> Dataset:
    with Path(path).open(encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[:2] != ["index", "label"]:
        raise ValueError(f"{path}: not a points file")
    d = len(header) - 2
    X = np.array([[float(v) for v in r[2:]] for r in body]).reshape(len(body), d)
    labels = np.array([int(r[1]) for r in body], dtype=np.int64)
    has_labels = labels.size and np.all(labels >= 0)
    return Dataset(X, labels if has_labels else None, f"csv:{Path(path).name}")


def export_embedding(path, Y) -> None:
    Y = np.asarray(Y, dtype=np.float64)
    _write_rows(path, ["index", "x", "y"], ([i, Y[i, 0], Y[i, 1]] for i in range(len(Y))))


def read_embedding(path) -> np.ndarray:
    with Path(path).open(encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(r[1]), float(r[2])] for r in rows]).reshape(len(rows), 2)


def export_labels(path, labels) -> None:
    """Rows ``index, label`` with noise written as -1."""
    lab = np.asarray(getattr(labels, "labels", labels), dtype=np.int64)
    _write_rows(path, ["index", "label"], ([i, lab[i]] for i in range(len(lab))))


def read_labels(path) -> np.ndarray:
    with Path(path).open(encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([int(r[1]) for r in rows], dtype=np.int64)


def export_curve(path, curve) -> None:
    _write_rows(path, ["eps", "count"], zip(curve.eps, curve.counts))


def read_curve(path):
    from .persistence import PersistenceCurve

    with Path(path).open(encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return PersistenceCurve([float(r[0]) for r in rows], [int(r[1]) for r in rows])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def export_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))

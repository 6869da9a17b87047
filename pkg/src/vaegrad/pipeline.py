"""End-to-end runs: config handling, presets, stage runners and run manifests.

Configs are INI files (``key = value`` under ``[section]`` headers).  Every
stage derives its own seed from the master seed, so running the stages one
by one through the CLI writes the same files as a single ``pipeline`` run.
"""
from __future__ import annotations

import configparser
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .clustering import (DbscanParams, GmmParams, acc, dbscan, fit_gmm, kmeans,
                         top_k_relabel)
from .data_io import (Dataset, MixtureSpec, export_curve, export_embedding, export_json,
                      export_labels, export_points, gen_mixture, load_idx, read_json,
                      read_points, subsample)
from .density import AscentConfig, SmoothedGradConfig, ascend_dataset
from .numeric import RandomSource
from .persistence import EpsGrid, ScanConfig, scan_average
from .tsne import TsneConfig, embed
from .vae import MlpSpec, TrainConfig, encode, save_model, train

log = logging.getLogger(__name__)

DEFAULTS = {
    "run": {"seed": "0"},
    "data": {"source": "mixture", "path": "", "images": "", "labels": "", "subsample": "0"},
    "mixture": {"means": "0 0; 1 0; 0.5 0.866", "std": "0.13", "covariances": "",
                "weights": "", "n": "10000", "seed": "", "embed_dim": "0",
                "embed_noise": "0"},
    "model": {"latent_dim": "8", "enc_hidden": "256, 64", "dec_hidden": "",
              "activation": "tanh", "out_activation": "identity", "sigma2_x": "1.0"},
    "train": {"epochs": "1000", "batch_size": "100", "lr": "1e-4", "w": "0.5"},
    "process": {"enabled": "true", "eta": "0.001", "steps": "7000", "sigma": "0.0005",
                "m_outer": "1", "n_inner": "1"},
    "embed": {"space": "tsne", "perplexity": "30", "iterations": "1000",
              "learning_rate": "200"},
    "cluster": {"method": "gmm", "k": "10", "eps": "2.0", "m_core": "2", "top_k": "0",
                "restarts": "3", "reg": "1e-6", "max_iter": "200"},
    "scan": {"enabled": "true", "m_core": "2", "subsample": "1000", "runs": "50",
             "grid_points": "200", "eps_min": "", "eps_max": ""},
}

PRESETS = {
    # VAE trained with equal reconstruction/KL weight, then gradient processing
    "vae-kl-grad": {
        "data": {"source": "idx", "subsample": "3000"},
        "model": {"latent_dim": "64", "out_activation": "sigmoid"},
        "train": {"epochs": "1000", "batch_size": "100", "lr": "1e-4", "w": "0.5"},
        "process": {"enabled": "true", "eta": "0.001", "steps": "7000", "sigma": "0.0005"},
        "cluster": {"method": "dbscan", "eps": "2.0", "m_core": "2", "top_k": "10"},
        "scan": {"subsample": "1000", "runs": "50", "m_core": "2"},
    },
    # reconstruction-only training, no processing, GMM with 10 components
    "autoenc": {
        "data": {"source": "idx", "subsample": "3000"},
        "model": {"latent_dim": "64", "out_activation": "sigmoid"},
        "train": {"epochs": "1000", "batch_size": "100", "lr": "1e-4", "w": "1.0"},
        "process": {"enabled": "false"},
        "cluster": {"method": "gmm", "k": "10"},
        "scan": {"subsample": "1000", "runs": "50", "m_core": "2"},
    },
    # three close planar modes, counted directly in data space
    "synthetic-3mode": {
        "data": {"source": "mixture"},
        "mixture": {"means": "0 0; 1 0; 0.5 0.866", "std": "0.13", "n": "10000"},
        "process": {"enabled": "false"},
        "embed": {"space": "data"},
        "cluster": {"method": "dbscan", "eps": "0.05", "m_core": "10", "top_k": "3"},
        "scan": {"subsample": "300", "runs": "50", "m_core": "2", "grid_points": "200",
                 "eps_min": "0.005", "eps_max": "0.6"},
    },
    # five overlapping planar modes (pentagon of radius 2.5 std) mapped into 10-D with
    # noise; mode spread is matched to the decoder variance implied by w = 0.5 in 10-D
    "synthetic-5mode": {
        "data": {"source": "mixture", "subsample": "0"},
        "mixture": {"means": "8.75 0; 2.7039 8.3217; -7.0789 5.1431; -7.0789 -5.1431; "
                             "2.7039 -8.3217",
                    "std": "3.5", "n": "3000", "embed_dim": "10", "embed_noise": "1.0"},
        "model": {"latent_dim": "8", "enc_hidden": "128, 64", "activation": "relu"},
        "train": {"epochs": "200", "batch_size": "100", "lr": "1e-3", "w": "0.5"},
        "process": {"enabled": "true", "eta": "0.05", "steps": "800", "sigma": "1.0",
                    "m_outer": "4", "n_inner": "4"},
        "embed": {"space": "tsne", "perplexity": "30", "iterations": "1000"},
        "cluster": {"method": "gmm", "k": "5"},
        "scan": {"subsample": "1000", "runs": "20", "m_core": "2"},
    },
}


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# --------------------------------------------------------------------------
# config


def make_config(preset: str | None = None, path=None, overrides: dict | None = None):
    """Defaults, then preset, then config file, then explicit overrides."""
    cfg = configparser.ConfigParser(interpolation=None)
    cfg.read_dict(DEFAULTS)
    if preset:
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        cfg.read_dict(PRESETS[preset])
    if path:
        with open(path, encoding="utf-8") as fh:
            cfg.read_file(fh)
    if overrides:
        cfg.read_dict(overrides)
    for section in cfg.sections():
        if section not in DEFAULTS:
            raise ValueError(f"unknown config section [{section}]")
        for key in cfg[section]:
            if key not in DEFAULTS[section]:
                raise ValueError(f"unknown key {key!r} in [{section}]")
    return cfg


def config_to_dict(cfg) -> dict:
    return {s: dict(cfg[s]) for s in cfg.sections()}


def config_from_dict(d: dict):
    cfg = configparser.ConfigParser(interpolation=None)
    cfg.read_dict(DEFAULTS)
    cfg.read_dict(d)
    return cfg


def config_text(cfg) -> str:
    buf = io.StringIO()
    cfg.write(buf)
    return buf.getvalue()


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _matrix(text: str) -> np.ndarray:
    rows = [r for r in text.split(";") if r.strip()]
    return np.array([[float(v) for v in r.replace(",", " ").split()] for r in rows])


def stage_seed(master: int, stage: str) -> int:
    return int(RandomSource(master).child("stage", stage).gen.integers(2**31 - 1))


def _seed(cfg) -> int:
    return cfg.getint("run", "seed")


# --------------------------------------------------------------------------
# stages


def mixture_spec(cfg) -> MixtureSpec:
    sec = cfg["mixture"]
    means = _matrix(sec["means"])
    k, d = means.shape
    if sec["covariances"].strip():
        covs = np.array([_matrix(block) for block in sec["covariances"].split("|")])
    else:
        std = np.array([float(v) for v in sec["std"].replace(",", " ").split()])
        std = np.broadcast_to(std, (k,))
        covs = np.array([s * s * np.eye(d) for s in std])
    weights = (np.array([float(v) for v in sec["weights"].replace(",", " ").split()])
               if sec["weights"].strip() else np.full(k, 1.0 / k))
    seed = int(sec["seed"]) if sec["seed"].strip() else stage_seed(_seed(cfg), "data")
    return MixtureSpec(means, covs, weights, int(sec["n"]), seed)


def linear_embed(ds: Dataset, dim: int, noise: float, seed: int) -> Dataset:
    """Map rows through a random matrix with orthonormal columns into ``dim``
    dimensions and add isotropic Gaussian noise of std ``noise``."""
    d = ds.points.shape[1]
    if dim < d:
        raise ValueError(f"cannot embed {d}-D data into {dim} dimensions")
    rng = RandomSource(seed).child("linear-embed")
    A, _ = np.linalg.qr(rng.child("map").normal((dim, d)))
    X = ds.points @ A.T + noise * rng.child("noise").normal((ds.points.shape[0], dim))
    return Dataset(X, ds.labels, ds.note + f";embed={dim}")


def stage_data(cfg) -> Dataset:
    src = cfg.get("data", "source")
    if src == "mixture":
        spec = mixture_spec(cfg)
        ds = gen_mixture(spec)
        dim = cfg.getint("mixture", "embed_dim")
        if dim:
            ds = linear_embed(ds, dim, cfg.getfloat("mixture", "embed_noise"), spec.seed)
    elif src == "idx":
        labels = cfg.get("data", "labels") or None
        ds = load_idx(cfg.get("data", "images"), labels)
    elif src == "csv":
        ds = read_points(cfg.get("data", "path"))
    else:
        raise ValueError(f"unknown data source {src!r}")
    size = cfg.getint("data", "subsample")
    if size and size < len(ds):
        ds = subsample(ds, size, RandomSource(stage_seed(_seed(cfg), "subsample")))
    return ds


def mlp_spec(cfg, data_dim: int) -> MlpSpec:
    sec = cfg["model"]
    dec = _ints(sec["dec_hidden"]) if sec["dec_hidden"].strip() else None
    return MlpSpec(data_dim, int(sec["latent_dim"]), _ints(sec["enc_hidden"]), dec,
                   sec["activation"], sec["out_activation"])


def train_config(cfg) -> TrainConfig:
    sec = cfg["train"]
    return TrainConfig(int(sec["epochs"]), int(sec["batch_size"]), float(sec["lr"]),
                       float(sec["w"]), stage_seed(_seed(cfg), "train"))


def stage_train(cfg, ds: Dataset):
    tc = train_config(cfg)
    batch = min(tc.batch_size, len(ds))
    if batch != tc.batch_size:
        tc = TrainConfig(tc.epochs, batch, tc.lr, tc.w, tc.seed)
    return train(ds, mlp_spec(cfg, ds.points.shape[1]), tc,
                 sigma2_x=cfg.getfloat("model", "sigma2_x"))


def ascent_configs(cfg) -> tuple[AscentConfig, SmoothedGradConfig]:
    sec = cfg["process"]
    a = AscentConfig(float(sec["eta"]), int(sec["steps"]), stage_seed(_seed(cfg), "process"))
    s = SmoothedGradConfig(float(sec["sigma"]), int(sec["m_outer"]), int(sec["n_inner"]))
    return a, s


def stage_process(cfg, model, ds: Dataset, threads: int = 1) -> Dataset:
    a, s = ascent_configs(cfg)
    X = ascend_dataset(model, ds.points, a, s, threads=threads)
    return Dataset(X, ds.labels, ds.note + ";processed")


def stage_encode(model, ds: Dataset) -> Dataset:
    mu, _ = encode(model, ds.points)
    return Dataset(mu, ds.labels, ds.note + ";latent")


def tsne_config(cfg) -> TsneConfig:
    sec = cfg["embed"]
    return TsneConfig(perplexity=float(sec["perplexity"]), iterations=int(sec["iterations"]),
                      learning_rate=float(sec["learning_rate"]),
                      seed=stage_seed(_seed(cfg), "embed"))


def stage_embed(cfg, latent: Dataset) -> np.ndarray:
    return embed(latent.points, tsne_config(cfg))


def stage_cluster(cfg, X: np.ndarray):
    sec = cfg["cluster"]
    method = sec["method"]
    seed = stage_seed(_seed(cfg), "cluster")
    if method == "gmm":
        return fit_gmm(X, GmmParams(int(sec["k"]), int(sec["max_iter"]), n_init=int(sec["restarts"]),
                                    seed=seed, reg=float(sec["reg"]))).labeling
    if method == "kmeans":
        return kmeans(X, int(sec["k"]), seed).labeling
    if method == "dbscan":
        return dbscan(X, DbscanParams(float(sec["eps"]), int(sec["m_core"])))
    raise ValueError(f"unknown clustering method {method!r}")


def scan_config(cfg, n: int) -> ScanConfig:
    sec = cfg["scan"]
    grid = None
    if sec["eps_min"].strip() and sec["eps_max"].strip():
        grid = EpsGrid.uniform(float(sec["eps_min"]), float(sec["eps_max"]),
                               int(sec["grid_points"]))
    return ScanConfig(int(sec["m_core"]), grid, min(int(sec["subsample"]), n),
                      int(sec["runs"]), stage_seed(_seed(cfg), "scan"),
                      int(sec["grid_points"]))


def stage_scan(cfg, X: np.ndarray):
    return scan_average(X, scan_config(cfg, X.shape[0]))


def accuracy_summary(cfg, labels_true, labeling) -> dict:
    out = {"acc": acc(labels_true, labeling)}
    top = cfg.getint("cluster", "top_k")
    if top:
        out["acc_top_k"] = acc(labels_true, top_k_relabel(labeling, top))
    return out


def scan_summary(res) -> dict:
    return {"mean": round(res.mean, 2), "mean_exact": res.mean, "per_run": res.counts,
            "no_signal": res.no_signal, "mode": res.mode()}


# --------------------------------------------------------------------------
# run directories


@dataclass
class Run:
    """Run directory bookkeeping: writes manifest.json on start and finish."""

    out_dir: Path
    subcommand: str
    cfg: configparser.ConfigParser
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self._t0 = time.monotonic()
        self._write("running")

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out_dir / name

    def _write(self, status: str, error: str | None = None):
        doc = {
            "tool": "vaegrad",
            "version": __version__,
            "subcommand": self.subcommand,
            "seed": _seed(self.cfg),
            "config": config_to_dict(self.cfg),
            "inputs": [str(p) for p in self.inputs],
            "outputs": list(self.outputs),
            "status": status,
            "duration_s": round(time.monotonic() - self._t0, 3),
        }
        if error:
            doc["error"] = error
        export_json(self.out_dir / "manifest.json", doc)

    def finish(self):
        self._write("complete")

    def fail(self, err: Exception):
        self._write("failed", str(err))


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc


def run_pipeline(cfg, out_dir, threads: int = 1) -> dict:
    """Data -> [train] -> [process] -> [encode] -> [t-SNE] -> cluster -> acc -> scan.

    ``[embed] space`` picks where clustering and the scan happen: ``tsne``
    (default), ``latent`` (encoder means) or ``data`` (no model needed
    unless processing is on).
    """
    run = Run(out_dir, "pipeline", cfg)
    try:
        (run.out_dir / "config.ini").write_text(config_text(cfg), encoding="utf-8")
        run.outputs.append("config.ini")
        summary = _run_stages(cfg, run, threads)
        export_json(run.path("summary.json"), summary)
    except Exception as exc:
        run.fail(exc)
        raise
    run.finish()
    return summary


def _run_stages(cfg, run: Run, threads: int) -> dict:
    space = cfg.get("embed", "space")
    if space not in ("tsne", "latent", "data"):
        raise StageError("config", f"unknown embed space {space!r}")
    processing = cfg.getboolean("process", "enabled")
    ds = _stage("data", stage_data, cfg)
    export_points(run.path("data.csv"), ds)
    summary = {"seed": _seed(cfg), "config": config_to_dict(cfg), "n": len(ds)}

    model = None
    if processing or space != "data":
        model = _stage("train", stage_train, cfg, ds)
        save_model(model, run.path("model.json"))
        summary["train_loss_first"] = model.history[0] if model.history else None
        summary["train_loss_last"] = model.history[-1] if model.history else None
    work = ds
    if processing:
        work = _stage("process", stage_process, cfg, model, ds, threads)
        export_points(run.path("processed.csv"), work)
    if space == "data":
        X = work.points
    else:
        latent = _stage("encode", stage_encode, model, work)
        export_points(run.path("latent.csv"), latent)
        X = latent.points
        if space == "tsne":
            X = _stage("embed", stage_embed, cfg, latent)
            export_embedding(run.path("embedding.csv"), X)
    labeling = _stage("cluster", stage_cluster, cfg, X)
    export_labels(run.path("labels.csv"), labeling)
    summary["n_clusters"] = labeling.n_clusters
    summary["n_noise"] = labeling.n_noise
    if ds.labels is not None:
        summary.update(_stage("acc", accuracy_summary, cfg, ds.labels, labeling))
    if cfg.getboolean("scan", "enabled"):
        res = _stage("scan-k", stage_scan, cfg, X)
        export_curve(run.path("curve.csv"), res.curves[0])
        summary["scan"] = scan_summary(res)
    return summary


def rerun_from_manifest(manifest_path, out_dir, threads: int = 1) -> dict:
    doc = read_json(manifest_path)
    if doc.get("subcommand") != "pipeline":
        raise ValueError(f"{manifest_path} does not describe a pipeline run")
    return run_pipeline(config_from_dict(doc["config"]), out_dir, threads)

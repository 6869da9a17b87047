"""Density-gradient processing of data with a variational autoencoder, plus
the clustering, t-SNE and cluster-count tools used to evaluate it."""

__version__ = "0.1.0"

from .clustering import (NOISE, DbscanParams, GmmParams, Labeling, acc, dbscan,  # noqa: E402
                         fit_gmm, hungarian, kmeans)
from .data_io import Dataset, MixtureSpec, gen_mixture, load_idx  # noqa: E402
from .density import (AscentConfig, SmoothedGradConfig, ascend, ascend_dataset,  # noqa: E402
                      grad_direction, grad_direction_smoothed, naive_grad_log_p, naive_grad_p)
from .numeric import RandomSource, Tape, grad_check  # noqa: E402
from .persistence import EpsGrid, ScanConfig, curve, most_persistent, scan_average  # noqa: E402
from .tsne import TsneConfig, embed, tsne  # noqa: E402
from .vae import MlpSpec, TrainConfig, VaeModel, decode, encode, train  # noqa: E402

__all__ = [
    "NOISE", "DbscanParams", "GmmParams", "Labeling", "acc", "dbscan", "fit_gmm", "hungarian",
    "kmeans",
    "Dataset", "MixtureSpec", "gen_mixture", "load_idx",
    "AscentConfig", "SmoothedGradConfig", "ascend", "ascend_dataset", "grad_direction",
    "grad_direction_smoothed", "naive_grad_log_p", "naive_grad_p",
    "RandomSource", "Tape", "grad_check",
    "EpsGrid", "ScanConfig", "curve", "most_persistent", "scan_average",
    "TsneConfig", "embed", "tsne",
    "MlpSpec", "TrainConfig", "VaeModel", "decode", "encode", "train",
]

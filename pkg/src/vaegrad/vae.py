"""A small fully connected VAE.

q(z|x) = N(mu_e(x), diag exp(logvar_e(x))), p(x|z) = N(mu(z), sigma2_x I),
p(z) = N(0, I).  Training minimises

    w * MSE(x, mu(z)) + (1 - w) * KL(q(z|x) || p(z)),   z = mu_e + sigma_e * u

with one reparameterised draw per point.  ``w = 1`` gives the plain
autoencoder variant.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numeric import (ACTIVATIONS, AdamState, RandomSource, Tape, adam_step,
                      apply_activation)

log = logging.getLogger(__name__)

MODEL_FORMAT = "vaegrad-model"
MODEL_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    data_dim: int
    latent_dim: int = 8
    enc_hidden: tuple = (256, 64)
    dec_hidden: tuple | None = None  # None mirrors enc_hidden
    activation: str = "tanh"
    out_activation: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "enc_hidden", tuple(int(h) for h in self.enc_hidden))
        if self.dec_hidden is None:
            object.__setattr__(self, "dec_hidden", tuple(reversed(self.enc_hidden)))
        else:
            object.__setattr__(self, "dec_hidden", tuple(int(h) for h in self.dec_hidden))
        if not self.enc_hidden or not self.dec_hidden:
            raise ValueError("encoder and decoder need at least one hidden layer")
        widths = (self.data_dim, self.latent_dim) + self.enc_hidden + self.dec_hidden
        if min(widths) < 1:
            raise ValueError(f"layer widths must be >= 1, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.out_activation not in ("identity", "sigmoid"):
            raise ValueError("decoder output head must be identity or sigmoid")


@dataclass
class VaeModel:
    spec: MlpSpec
    params: dict
    sigma2_x: float = 1.0
    seed: int = 0
    history: list = field(default_factory=list, compare=False)

    def __post_init__(self):
        if not self.sigma2_x > 0:
            raise ValueError("decoder variance must be > 0")

    @property
    def latent_dim(self) -> int:
        return self.spec.latent_dim

    @property
    def data_dim(self) -> int:
        return self.spec.data_dim


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 100
    lr: float = 1e-4
    w: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.w <= 1.0:
            raise ValueError(f"reconstruction weight must lie in [0, 1], got {self.w}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("invalid training config")


# --------------------------------------------------------------------------
# parameters


def _enc_layers(spec: MlpSpec):
    dims = (spec.data_dim,) + spec.enc_hidden
    return [(f"enc.{i}", dims[i], dims[i + 1]) for i in range(len(dims) - 1)]


def _dec_layers(spec: MlpSpec):
    dims = (spec.latent_dim,) + spec.dec_hidden
    return [(f"dec.{i}", dims[i], dims[i + 1]) for i in range(len(dims) - 1)]


def layer_shapes(spec: MlpSpec) -> dict:
    shapes = {}
    for name, a, b in _enc_layers(spec):
        shapes[name + ".W"], shapes[name + ".b"] = (a, b), (b,)
    h = spec.enc_hidden[-1]
    for head in ("enc.mu", "enc.logvar"):
        shapes[head + ".W"], shapes[head + ".b"] = (h, spec.latent_dim), (spec.latent_dim,)
    for name, a, b in _dec_layers(spec):
        shapes[name + ".W"], shapes[name + ".b"] = (a, b), (b,)
    shapes["dec.out.W"] = (spec.dec_hidden[-1], spec.data_dim)
    shapes["dec.out.b"] = (spec.data_dim,)
    return shapes


def init_model(spec: MlpSpec, seed: int = 0, sigma2_x: float = 1.0,
               zero_heads: bool = False) -> VaeModel:
    """Glorot-normal weights, zero biases. ``zero_heads`` zeroes the final
    encoder and decoder layers so ``encode`` returns (0, 0) and ``decode``
    returns 0 (before any sigmoid head)."""
    rng = RandomSource(seed).child("init")
    params = {}
    for name, shape in layer_shapes(spec).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
            continue
        head = name.startswith(("enc.mu", "enc.logvar", "dec.out"))
        if zero_heads and head:
            params[name] = np.zeros(shape)
        else:
            scale = np.sqrt(2.0 / (shape[0] + shape[1]))
            params[name] = scale * rng.child(name).normal(shape)
    return VaeModel(spec, params, float(sigma2_x), int(seed))


# --------------------------------------------------------------------------
# forward passes


def _dense(x, W, b):
    # einsum keeps each row's result independent of the batch it sits in
    return np.einsum("ij,jk->ik", x, W) + b


def _as_batch(x, dim: int, what: str):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != dim:
        raise ValueError(f"{what} dimension mismatch: expected {dim}, got shape {x.shape}")
    return xb, single


def encode(model: VaeModel, x):
    """Return ``(mu_e, logvar_e)`` for one point or a batch of rows."""
    spec, p = model.spec, model.params
    h, single = _as_batch(x, spec.data_dim, "data")
    for name, _, _ in _enc_layers(spec):
        h = apply_activation(spec.activation, _dense(h, p[name + ".W"], p[name + ".b"]))
    mu = _dense(h, p["enc.mu.W"], p["enc.mu.b"])
    logvar = _dense(h, p["enc.logvar.W"], p["enc.logvar.b"])
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(logvar))):
        raise FloatingPointError("encoder produced non-finite output")
    return (mu[0], logvar[0]) if single else (mu, logvar)


def decode(model: VaeModel, z):
    """Decoder mean mu(z) for one latent vector or a batch of rows."""
    spec, p = model.spec, model.params
    h, single = _as_batch(z, spec.latent_dim, "latent")
    for name, _, _ in _dec_layers(spec):
        h = apply_activation(spec.activation, _dense(h, p[name + ".W"], p[name + ".b"]))
    out = apply_activation(spec.out_activation, _dense(h, p["dec.out.W"], p["dec.out.b"]))
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("decoder produced non-finite output")
    return out[0] if single else out


def _forward_tape(spec: MlpSpec, P: dict, x: np.ndarray, u: np.ndarray):
    h = x
    for name, _, _ in _enc_layers(spec):
        h = apply_activation(spec.activation, h @ P[name + ".W"] + P[name + ".b"])
    mu = h @ P["enc.mu.W"] + P["enc.mu.b"]
    logvar = h @ P["enc.logvar.W"] + P["enc.logvar.b"]
    z = mu + (logvar * 0.5).exp() * u
    h = z
    for name, _, _ in _dec_layers(spec):
        h = apply_activation(spec.activation, h @ P[name + ".W"] + P[name + ".b"])
    xr = apply_activation(spec.out_activation, h @ P["dec.out.W"] + P["dec.out.b"])
    return mu, logvar, xr


def kl_to_prior(mu, logvar) -> np.ndarray:
    """Per-row KL(N(mu, diag exp(logvar)) || N(0, I))."""
    mu = np.atleast_2d(mu)
    logvar = np.atleast_2d(logvar)
    return 0.5 * np.sum(mu * mu + np.exp(logvar) - logvar - 1.0, axis=1)


def _loss_terms(spec: MlpSpec, P: dict, x: np.ndarray, u: np.ndarray, w: float):
    mu, logvar, xr = _forward_tape(spec, P, x, u)
    recon = (xr - x).square().mean()
    n = x.shape[0]
    kl = (mu.square() + logvar.exp() - logvar - 1.0).sum() * (0.5 / n)
    # w == 1 multiplies the KL node by zero; its value never reaches the loss
    loss = recon * w + kl * (1.0 - w)
    return loss, recon, kl


def elbo_loss(model: VaeModel, batch, w: float, rng: RandomSource):
    """Weighted reconstruction/KL loss and its parameter gradients.

    Returns ``(loss, grads, parts)`` with ``parts = {"recon": ..., "kl": ...}``.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("batch must be a non-empty 2-D array")
    u = rng.normal((x.shape[0], model.spec.latent_dim))
    tape = Tape()
    P = {k: tape.var(v, k) for k, v in model.params.items()}
    loss, recon, kl = _loss_terms(model.spec, P, x, u, w)
    value = float(loss.value)
    if not np.isfinite(value):
        raise FloatingPointError("non-finite loss")
    tape.backward(loss)
    grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.value))
             for k, v in P.items()}
    return value, grads, {"recon": float(recon.value), "kl": float(kl.value)}


# --------------------------------------------------------------------------
# training


def train(dataset, spec: MlpSpec, cfg: TrainConfig, sigma2_x: float = 1.0,
          model: VaeModel | None = None) -> VaeModel:
    """Minibatch Adam on :func:`elbo_loss`. Shuffling, init and reparameterisation
    noise all derive from ``cfg.seed``. Per-epoch mean loss lands in ``model.history``."""
    X = np.asarray(getattr(dataset, "points", dataset), dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("dataset must be a non-empty 2-D array")
    if X.shape[1] != spec.data_dim:
        raise ValueError(f"dataset has {X.shape[1]} columns, spec expects {spec.data_dim}")
    if cfg.batch_size > X.shape[0]:
        raise ValueError(f"batch size {cfg.batch_size} exceeds dataset size {X.shape[0]}")
    if model is None:
        model = init_model(spec, cfg.seed, sigma2_x)
    params = {k: v.copy() for k, v in model.params.items()}
    state = AdamState(lr=cfg.lr)
    root = RandomSource(cfg.seed)
    history = list(model.history)
    n = X.shape[0]
    for epoch in range(cfg.epochs):
        order = root.child("shuffle", epoch).gen.permutation(n)
        total = 0.0
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            batch = X[order[start:start + cfg.batch_size]]
            cur = VaeModel(spec, params, sigma2_x, cfg.seed)
            try:
                loss, grads, _ = elbo_loss(cur, batch, cfg.w, root.child("noise", epoch, bi))
            except FloatingPointError as exc:
                raise FloatingPointError(f"training diverged at epoch {epoch}: {exc}") from exc
            params = adam_step(params, grads, state)
            total += loss * batch.shape[0]
        history.append(total / n)
        log.debug("epoch %d loss %.6g", epoch, history[-1])
    out = VaeModel(spec, params, model.sigma2_x, cfg.seed)
    out.history = history
    return out


def reconstruction_mse(model: VaeModel, X) -> float:
    """MSE of decode(mu_e(x)) against x; deterministic (no sampling)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    mu, _ = encode(model, X)
    return float(np.mean((decode(model, mu) - X) ** 2))


# --------------------------------------------------------------------------
# serialization


def save_model(model: VaeModel, path) -> None:
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "spec": asdict(model.spec),
        "sigma2_x": model.sigma2_x,
        "seed": model.seed,
        "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                   for k, v in sorted(model.params.items())},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def load_model(path) -> VaeModel:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"{path}: not a {MODEL_FORMAT} file")
    if doc.get("version") != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {doc.get('version')}")
    spec = MlpSpec(**doc["spec"])
    params = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
              for k, v in doc["params"].items()}
    expected = layer_shapes(spec)
    for k, shape in expected.items():
        if k not in params or params[k].shape != tuple(shape):
            raise ValueError(f"{path}: parameter {k} missing or misshapen")
    return VaeModel(spec, params, float(doc["sigma2_x"]), int(doc["seed"]))


# --------------------------------------------------------------------------
# closed-form models (degenerate MLPs with identity hidden layers)


def linear_gaussian_vae(W, b, sigma2_x: float = 1.0) -> VaeModel:
    """Decoder mu(z) = W z + b with the exact posterior as encoder.

    p(x) = N(b, W W^T + s2 I).  The posterior covariance (I + W^T W / s2)^-1
    must be diagonal, i.e. W needs orthogonal columns.
    """
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    D, L = W.shape
    if b.shape != (D,):
        raise ValueError("bias length must equal data dimension")
    gram = W.T @ W
    if not np.allclose(gram, np.diag(np.diag(gram)), atol=1e-12):
        raise ValueError("W must have orthogonal columns for a diagonal posterior")
    post_var = 1.0 / (1.0 + np.diag(gram) / sigma2_x)
    gain = W * post_var[None, :] / sigma2_x  # (D, L): mu_e = (x - b) @ gain
    spec = MlpSpec(D, L, enc_hidden=(D,), dec_hidden=(L,), activation="identity")
    params = {
        "enc.0.W": np.eye(D), "enc.0.b": np.zeros(D),
        "enc.mu.W": gain, "enc.mu.b": -(b @ gain),
        "enc.logvar.W": np.zeros((D, L)), "enc.logvar.b": np.log(post_var),
        "dec.0.W": np.eye(L), "dec.0.b": np.zeros(L),
        "dec.out.W": W.T.copy(), "dec.out.b": b.copy(),
    }
    return VaeModel(spec, params, float(sigma2_x))


def constant_decoder_vae(c, latent_dim: int = 2, sigma2_x: float = 1.0,
                         seed: int = 0) -> VaeModel:
    """Random encoder, decoder that ignores z and returns ``c``."""
    c = np.asarray(c, dtype=np.float64).reshape(-1)
    spec = MlpSpec(c.shape[0], latent_dim, enc_hidden=(8,), dec_hidden=(8,))
    model = init_model(spec, seed, sigma2_x)
    model.params["dec.out.W"] = np.zeros_like(model.params["dec.out.W"])
    model.params["dec.out.b"] = c.copy()
    return model

"""Dense autoencoders with exact Jacobians, trained by backpropagation.

The encoder phi maps the D-dimensional parameter space to an r-dimensional
latent space and the decoder psi maps back. PCA is the linear special case
and is fitted in closed form by :func:`pca_fit`.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .targets import DimensionError

logger = logging.getLogger(__name__)

ACTIVATIONS = ("identity", "tanh")


@dataclass(frozen=True, eq=False)
class AffineLayer:
    """act(W x + b)."""

    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.weight, dtype=float))
        b = np.asarray(self.bias, dtype=float).reshape(-1)
        if b.size != W.shape[0]:
            raise DimensionError("bias length must equal weight rows")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "weight", W)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self):
        return self.weight.shape[1]

    @property
    def out_dim(self):
        return self.weight.shape[0]

    def forward(self, x, use_bias=True):
        a = self.weight @ x
        if use_bias:
            a = a + self.bias
        return np.tanh(a) if self.activation == "tanh" else a

    def jacobian(self, x, use_bias=True):
        if self.activation == "identity":
            return self.weight
        a = self.weight @ x
        if use_bias:
            a = a + self.bias
        return (1.0 - np.tanh(a) ** 2)[:, None] * self.weight

    def without_bias(self):
        return AffineLayer(self.weight, np.zeros_like(self.bias), self.activation)


def _forward(layers, x, use_bias=True):
    for layer in layers:
        x = layer.forward(x, use_bias)
    return x


def _jacobian(layers, x, use_bias=True):
    J = None
    for layer in layers:
        Jl = layer.jacobian(x, use_bias)
        J = Jl if J is None else Jl @ J
        x = layer.forward(x, use_bias)
    return J


@dataclass(frozen=True, eq=False)
class Autoencoder:
    """Encoder and decoder layer stacks.

    The momentum path used by latent HMC runs the same layers with every bias
    dropped (``use_bias=False``), which keeps the latent kinetic energy even in
    the momentum and zero at zero momentum.
    """

    encoder_layers: tuple
    decoder_layers: tuple
    # per-coordinate (mean, scale) already folded into the outer layers
    standardization: tuple | None = None

    def __post_init__(self):
        enc, dec = tuple(self.encoder_layers), tuple(self.decoder_layers)
        if not enc or not dec:
            raise ValueError("encoder and decoder need at least one layer")
        for stack in (enc, dec):
            for a, b in zip(stack, stack[1:]):
                if a.out_dim != b.in_dim:
                    raise DimensionError("consecutive layer shapes do not chain")
        if enc[-1].out_dim != dec[0].in_dim or dec[-1].out_dim != enc[0].in_dim:
            raise DimensionError("encoder and decoder dimensions do not match")
        if enc[-1].out_dim > enc[0].in_dim:
            raise DimensionError("latent dimension exceeds ambient dimension")
        object.__setattr__(self, "encoder_layers", enc)
        object.__setattr__(self, "decoder_layers", dec)

    @property
    def ambient_dim(self):
        return self.encoder_layers[0].in_dim

    @property
    def latent_dim(self):
        return self.encoder_layers[-1].out_dim

    def _check(self, x, dim, name):
        x = np.asarray(x, dtype=float)
        if x.shape != (dim,):
            raise DimensionError(f"{name} has shape {x.shape}, expected ({dim},)")
        return x

    def encode(self, x, use_bias=True):
        return _forward(self.encoder_layers, self._check(x, self.ambient_dim, "x"), use_bias)

    def decode(self, z, use_bias=True):
        return _forward(self.decoder_layers, self._check(z, self.latent_dim, "z"), use_bias)

    def encoder_jacobian(self, x, use_bias=True):
        return _jacobian(self.encoder_layers, self._check(x, self.ambient_dim, "x"), use_bias)

    def decoder_jacobian(self, z, use_bias=True):
        return _jacobian(self.decoder_layers, self._check(z, self.latent_dim, "z"), use_bias)

    def encode_batch(self, X):
        Z = np.asarray(X, dtype=float).T
        for layer in self.encoder_layers:
            Z = layer.weight @ Z + layer.bias[:, None]
            if layer.activation == "tanh":
                Z = np.tanh(Z)
        return Z.T

    def decode_batch(self, Z):
        X = np.asarray(Z, dtype=float).T
        for layer in self.decoder_layers:
            X = layer.weight @ X + layer.bias[:, None]
            if layer.activation == "tanh":
                X = np.tanh(X)
        return X.T

    def reconstruct(self, X):
        return self.decode_batch(self.encode_batch(X))

    def reconstruction_mse(self, X):
        X = np.asarray(X, dtype=float)
        return float(np.mean((self.reconstruct(X) - X) ** 2))

    def is_linear(self):
        return all(l.activation == "identity"
                   for l in self.encoder_layers + self.decoder_layers)


def encode(ae, x):
    return ae.encode(x)


def decode(ae, z):
    return ae.decode(z)


def encoder_jacobian(ae, x):
    return ae.encoder_jacobian(x)


def decoder_jacobian(ae, z):
    return ae.decoder_jacobian(z)


def identity_autoencoder(dim):
    eye = np.eye(dim)
    zero = np.zeros(dim)
    return Autoencoder((AffineLayer(eye, zero),), (AffineLayer(eye.copy(), zero),))


def linear_autoencoder(weight, bias=None):
    """Invertible linear autoencoder: encoder x -> A x + b, decoder its inverse."""
    A = np.asarray(weight, dtype=float)
    b = np.zeros(A.shape[0]) if bias is None else np.asarray(bias, dtype=float)
    Ainv = np.linalg.inv(A)
    return Autoencoder((AffineLayer(A, b),), (AffineLayer(Ainv, -Ainv @ b),))


def pca_fit(samples, r):
    """Rank-r PCA as a linear autoencoder.

    The encoder is ``P (x - mean)`` with the top-r eigenvectors of the sample
    covariance as the rows of P; the decoder is ``P' z + mean``.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    n, D = X.shape
    if not 1 <= r <= min(n, D):
        raise ValueError(f"r must be in [1, min(n, D)] = [1, {min(n, D)}], got {r}")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / max(n - 1, 1)
    try:
        evals, evecs = np.linalg.eigh(cov)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("PCA eigendecomposition failed") from exc
    order = np.argsort(evals)[::-1][:r]
    P = evecs[:, order].T
    # fix the sign so the largest-magnitude loading of each row is positive
    flip = np.sign(P[np.arange(r), np.argmax(np.abs(P), axis=1)])
    P = P * np.where(flip == 0, 1.0, flip)[:, None]
    return Autoencoder(
        (AffineLayer(P, -P @ mean),),
        (AffineLayer(P.T.copy(), mean),),
    )


def pca_explained_variance(samples, r):
    X = np.asarray(samples, dtype=float)
    evals = np.sort(np.linalg.eigvalsh(np.cov(X, rowvar=False)))[::-1]
    return float(evals[:r].sum() / evals.sum())


@dataclass
class Architecture:
    """Dense autoencoder layout.

    Hidden layers use ``activation``; the latent (code) layer and the output
    layer are linear. The default, no hidden layers, is the three-layer
    input/code/output linear network.
    """

    latent_dim: int
    encoder_hidden: tuple = ()
    decoder_hidden: tuple = ()
    activation: str = "tanh"

    def layer_shapes(self, D):
        enc_sizes = [D, *self.encoder_hidden, self.latent_dim]
        dec_sizes = [self.latent_dim, *self.decoder_hidden, D]
        enc = [(o, i, self.activation if k < len(enc_sizes) - 2 else "identity")
               for k, (i, o) in enumerate(zip(enc_sizes, enc_sizes[1:]))]
        dec = [(o, i, self.activation if k < len(dec_sizes) - 2 else "identity")
               for k, (i, o) in enumerate(zip(dec_sizes, dec_sizes[1:]))]
        return enc, dec


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    seed: int = 0
    standardize: bool = True
    loss_history: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class TrainingDivergedError(FloatingPointError):
    pass


def _glorot(rng, out_dim, in_dim):
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-limit, limit, size=(out_dim, in_dim))


def _batch_forward(params, acts, X):
    """Forward pass over a batch stored row-wise; returns all activations."""
    outs = [X]
    pre = []
    for (W, b), act in zip(params, acts):
        a = outs[-1] @ W.T + b
        pre.append(a)
        outs.append(np.tanh(a) if act == "tanh" else a)
    return outs, pre


def _batch_grads(params, acts, X):
    outs, _ = _batch_forward(params, acts, X)
    n, D = X.shape
    err = outs[-1] - X
    loss = float(np.mean(err ** 2))
    delta = 2.0 * err / (n * D)
    grads = [None] * len(params)
    for k in range(len(params) - 1, -1, -1):
        if acts[k] == "tanh":
            delta = delta * (1.0 - outs[k + 1] ** 2)
        W, _ = params[k]
        grads[k] = (delta.T @ outs[k], delta.sum(axis=0))
        delta = delta @ W
    return loss, grads


def train_autoencoder(samples, cfg=None, arch=None):
    """Fit an autoencoder to samples by minibatch gradient descent on MSE.

    With ``cfg.standardize`` the data are scaled per coordinate before training
    and the scaling is folded into the first encoder and last decoder layers,
    so the returned model acts on the original scale. Per-epoch full-data MSE
    (on the original scale) is appended to ``cfg.loss_history``.
    """
    cfg = cfg or TrainConfig()
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    n, D = X.shape
    arch = arch or Architecture(latent_dim=max(1, D // 10))
    if arch.latent_dim > D:
        raise ValueError("latent dimension must not exceed the ambient dimension")
    if cfg.batch_size > n:
        raise ValueError(f"batch_size {cfg.batch_size} exceeds sample count {n}")

    if cfg.standardize:
        mu = X.mean(axis=0)
        sd = X.std(axis=0)
        sd = np.where(sd > 1e-12 * max(1.0, float(np.abs(mu).max())), sd, 1.0)
    else:
        mu, sd = np.zeros(D), np.ones(D)
    Xs = (X - mu) / sd

    rng = np.random.default_rng(cfg.seed)
    enc_shapes, dec_shapes = arch.layer_shapes(D)
    shapes = enc_shapes + dec_shapes
    params = [(_glorot(rng, o, i), np.zeros(o)) for o, i, _ in shapes]
    acts = [a for _, _, a in shapes]
    m_state = [(np.zeros_like(W), np.zeros_like(b)) for W, b in params]
    v_state = [(np.zeros_like(W), np.zeros_like(b)) for W, b in params]
    t = 0
    cfg.loss_history.clear()

    # overflow is detected through the loss and reported as TrainingDivergedError
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(cfg.epochs):
            perm = rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                batch = Xs[perm[start:start + cfg.batch_size]]
                loss, grads = _batch_grads(params, acts, batch)
                if not np.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}; lower the learning rate "
                        f"(currently {cfg.learning_rate:g})")
                t += 1
                new_params = []
                for k, ((W, b), (gW, gb)) in enumerate(zip(params, grads)):
                    if cfg.optimizer == "sgd":
                        new_params.append((W - cfg.learning_rate * gW, b - cfg.learning_rate * gb))
                        continue
                    mW, mb = m_state[k]
                    vW, vb = v_state[k]
                    mW = cfg.beta1 * mW + (1 - cfg.beta1) * gW
                    mb = cfg.beta1 * mb + (1 - cfg.beta1) * gb
                    vW = cfg.beta2 * vW + (1 - cfg.beta2) * gW ** 2
                    vb = cfg.beta2 * vb + (1 - cfg.beta2) * gb ** 2
                    m_state[k], v_state[k] = (mW, mb), (vW, vb)
                    c1 = 1 - cfg.beta1 ** t
                    c2 = 1 - cfg.beta2 ** t
                    step = cfg.learning_rate / c1
                    W = W - step * mW / (np.sqrt(vW / c2) + cfg.eps_adam)
                    b = b - step * mb / (np.sqrt(vb / c2) + cfg.eps_adam)
                    new_params.append((W, b))
                params = new_params
            outs, _ = _batch_forward(params, acts, Xs)
            epoch_loss = float(np.mean(((outs[-1] - Xs) * sd) ** 2))
            if not np.isfinite(epoch_loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}; lower the learning rate "
                    f"(currently {cfg.learning_rate:g})")
            cfg.loss_history.append(epoch_loss)

    n_enc = len(enc_shapes)
    layers = [AffineLayer(W, b, a) for (W, b), a in zip(params, acts)]
    # fold standardization: first encoder layer sees (x - mu) / sd,
    # last decoder layer output is scaled back by sd and shifted by mu
    first = layers[0]
    layers[0] = AffineLayer(first.weight / sd, first.bias - first.weight @ (mu / sd),
                            first.activation)
    last = layers[-1]
    layers[-1] = AffineLayer(last.weight * sd[:, None], last.bias * sd + mu, last.activation)
    ae = Autoencoder(tuple(layers[:n_enc]), tuple(layers[n_enc:]), (mu, sd))
    logger.info("trained autoencoder D=%d r=%d, final MSE %.3g",
                D, arch.latent_dim, cfg.loss_history[-1])
    return ae


def autoencoder_to_dict(ae):
    def dump(layers):
        return [{
            "shape": list(l.weight.shape),
            "activation": l.activation,
            "weight": [float(v) for v in l.weight.ravel()],
            "bias": [float(v) for v in l.bias],
        } for l in layers]
    doc = {
        "ambient_dim": ae.ambient_dim,
        "latent_dim": ae.latent_dim,
        "encoder": dump(ae.encoder_layers),
        "decoder": dump(ae.decoder_layers),
    }
    if ae.standardization is not None:
        mu, sd = ae.standardization
        doc["standardization"] = {"mean": [float(v) for v in mu],
                                  "scale": [float(v) for v in sd]}
    return doc


def autoencoder_from_dict(doc):
    def load(entries):
        return tuple(
            AffineLayer(np.array(e["weight"], dtype=float).reshape(e["shape"]),
                        np.array(e["bias"], dtype=float), e["activation"])
            for e in entries)
    std = doc.get("standardization")
    if std is not None:
        std = (np.array(std["mean"], dtype=float), np.array(std["scale"], dtype=float))
    return Autoencoder(load(doc["encoder"]), load(doc["decoder"]), std)


def save_autoencoder(ae, path):
    # json writes floats with repr, which round-trips doubles exactly
    with open(path, "w") as fh:
        json.dump(autoencoder_to_dict(ae), fh)


def load_autoencoder(path):
    with open(path) as fh:
        return autoencoder_from_dict(json.load(fh))

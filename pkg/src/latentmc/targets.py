"""Target distributions: potentials U(q) = -log pi(q) and their gradients.

Additive constants are dropped from every potential; only differences of the
Hamiltonian enter acceptance ratios.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg


class DimensionError(ValueError):
    """Raised when an input vector does not match the expected dimension."""


class NonFiniteError(FloatingPointError):
    """Raised when a potential or gradient evaluates to a non-finite value."""


def _check_dim(q, dim, name="q"):
    q = np.asarray(q, dtype=float)
    if q.shape != (dim,):
        raise DimensionError(f"{name} has shape {q.shape}, expected ({dim},)")
    return q


class TargetDistribution:
    """Base class for a differentiable target density over R^dim.

    Subclasses implement :meth:`potential_and_grad`. :meth:`reduce` returns
    the potential pulled back through an affine map ``q = W h + c``; the
    default simply composes, but targets can precompute products with ``W``
    to make the reduced gradient cheaper than the ambient one.
    """

    dim: int

    def potential_and_grad(self, q):
        raise NotImplementedError

    def potential(self, q):
        return self.potential_and_grad(q)[0]

    def gradient(self, q):
        return self.potential_and_grad(q)[1]

    def reduce(self, weight, bias):
        return ReducedPotential(self, weight, bias)


class ReducedPotential:
    """U(W h + c) and its gradient with respect to h."""

    def __init__(self, target, weight, bias):
        self.target = target
        self.weight = np.asarray(weight, dtype=float)
        self.bias = np.asarray(bias, dtype=float)
        if self.weight.shape[0] != target.dim:
            raise DimensionError("reduction weight rows must equal target dim")
        self.dim = self.weight.shape[1]

    def ambient(self, h):
        return self.weight @ h + self.bias

    def potential_and_grad(self, h):
        u, g = self.target.potential_and_grad(self.ambient(h))
        return u, self.weight.T @ g


@dataclass(frozen=True, eq=False)
class GaussianTarget(TargetDistribution):
    """Multivariate normal N(mean, covariance)."""

    mean: np.ndarray
    covariance: np.ndarray
    precision: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise DimensionError("covariance shape does not match mean")
        if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        if np.linalg.eigvalsh(cov).min() <= 0:
            raise ValueError("covariance must be positive definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "precision", np.linalg.inv(cov))

    @property
    def dim(self):
        return self.mean.size

    def potential_and_grad(self, q):
        q = _check_dim(q, self.dim)
        g = self.precision @ (q - self.mean)
        return 0.5 * float((q - self.mean) @ g), g


def gaussian_potential(target, q):
    return target.potential(q)


# The 3D covariance used to illustrate latent HMC with a PCA encoder.
ILLUSTRATION_COVARIANCE = np.array([
    [1.0, 0.95, 0.7],
    [0.95, 1.0, 0.5],
    [0.7, 0.5, 1.0],
])


def illustration_gaussian():
    return GaussianTarget(np.zeros(3), ILLUSTRATION_COVARIANCE)


def sigmoid(x):
    """Logistic function, stable for large |x|."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log1pexp(x):
    """log(1 + exp(x)) without overflow."""
    return np.logaddexp(0.0, x)


@dataclass(frozen=True, eq=False)
class LogisticRegressionTarget(TargetDistribution):
    """Bayesian logistic regression with an isotropic Gaussian prior.

    U(q) = q'q / (2 sigma^2) - sum_i y_i x_i'q + sum_i log(1 + exp(x_i'q))
    """

    design: np.ndarray
    labels: np.ndarray
    prior_variance: float = 100.0

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.design, dtype=float))
        y = np.asarray(self.labels, dtype=float).reshape(-1)
        if X.shape[0] != y.size:
            raise DimensionError("design rows must match number of labels")
        if not np.all(np.isfinite(X)):
            raise ValueError("design contains non-finite entries")
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("labels must be 0 or 1")
        if not self.prior_variance > 0:
            raise ValueError("prior_variance must be positive")
        object.__setattr__(self, "design", X)
        object.__setattr__(self, "labels", y)

    @property
    def dim(self):
        return self.design.shape[1]

    @property
    def n_data(self):
        return self.design.shape[0]

    def potential_and_grad(self, q):
        q = _check_dim(q, self.dim)
        eta = self.design @ q
        u = (0.5 * float(q @ q) / self.prior_variance
             - float(self.labels @ eta) + float(np.sum(log1pexp(eta))))
        g = q / self.prior_variance - self.design.T @ (self.labels - sigmoid(eta))
        if not (np.isfinite(u) and np.all(np.isfinite(g))):
            raise NonFiniteError("logistic potential is not finite")
        return u, g

    def reduce(self, weight, bias):
        return ReducedLogistic(self, weight, bias)


class ReducedLogistic(ReducedPotential):
    """Logistic potential at q = W h + c, with X W and W'W precomputed.

    The gradient costs O(N k) instead of O(N D) for a k-column W.
    """

    def __init__(self, target, weight, bias):
        super().__init__(target, weight, bias)
        X, W, c = target.design, self.weight, self.bias
        s2 = target.prior_variance
        self._XW = X @ W
        self._Xc = X @ c
        self._WtW = (W.T @ W) / s2
        self._Wtc = (W.T @ c) / s2
        self._cc = 0.5 * float(c @ c) / s2
        self._ytXW = self._XW.T @ target.labels
        self._ytXc = float(target.labels @ self._Xc)

    def potential_and_grad(self, h):
        h = _check_dim(h, self.dim, "h")
        eta = self._XW @ h + self._Xc
        Gh = self._WtW @ h
        u = (0.5 * float(h @ Gh) + float(h @ self._Wtc) + self._cc
             - float(self._ytXW @ h) - self._ytXc + float(np.sum(log1pexp(eta))))
        g = Gh + self._Wtc - self._ytXW + self._XW.T @ sigmoid(eta)
        if not (np.isfinite(u) and np.all(np.isfinite(g))):
            raise NonFiniteError("logistic potential is not finite")
        return u, g


def logistic_potential_grad(target, q):
    return target.potential_and_grad(q)


def grid_nodes(m):
    """Coordinates of an m x m regular mesh over the unit square, row-major."""
    t = np.linspace(0.0, 1.0, m)
    xx, yy = np.meshgrid(t, t, indexing="xy")
    return np.column_stack([xx.ravel(), yy.ravel()])


def exponential_kernel(nodes, sigma_u, s0):
    """sigma_u^2 exp(-|s - s'| / (2 s0)) evaluated on all node pairs."""
    diff = nodes[:, None, :] - nodes[None, :, :]
    dist = np.sqrt(np.sum(diff ** 2, axis=-1))
    return sigma_u ** 2 * np.exp(-dist / (2.0 * s0))


def default_sensors(m, per_axis=5):
    """Node indices of a per_axis x per_axis sub-lattice spread over the grid."""
    idx = np.round(np.linspace(0.1, 0.9, per_axis) * (m - 1)).astype(int)
    rows, cols = np.meshgrid(idx, idx, indexing="ij")
    return (rows * m + cols).ravel()


class CholeskyError(linalg.LinAlgError):
    pass


@dataclass(frozen=True, eq=False)
class GpLinearInverseTarget(TargetDistribution):
    """Posterior of a grid field u ~ N(0, C) observed at sensor nodes.

    Observations are ``y = u[sensors] + noise`` with noise sd ``noise_sd``.
    An empty sensor list gives a flat likelihood, leaving the prior.
    """

    grid_size: int = 10
    sigma_u: float = 1.25
    s0: float = 0.0625
    sensors: np.ndarray | None = None
    obs: np.ndarray | None = None
    noise_sd: float = 1.0
    jitter: float | None = None
    prior_cov: np.ndarray | None = None

    def __post_init__(self):
        m = self.grid_size
        nodes = grid_nodes(m)
        if self.prior_cov is None:
            cov = exponential_kernel(nodes, self.sigma_u, self.s0)
        else:
            cov = np.array(self.prior_cov, dtype=float)
            if cov.shape != (m * m, m * m):
                raise DimensionError("prior_cov must be (m^2, m^2)")
        jitter = 1e-8 * self.sigma_u ** 2 if self.jitter is None else self.jitter
        cov = cov + jitter * np.eye(m * m)
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise CholeskyError(
                f"prior covariance is not positive definite with jitter {jitter:g}; "
                "increase the jitter") from exc
        sensors = default_sensors(m) if self.sensors is None else self.sensors
        sensors = np.asarray(sensors, dtype=int).reshape(-1)
        obs = np.zeros(sensors.size) if self.obs is None else np.asarray(self.obs, dtype=float)
        if obs.shape != sensors.shape:
            raise DimensionError("obs must have one value per sensor")
        for name, value in [("nodes", nodes), ("prior_cov", cov), ("chol", chol),
                            ("sensors", sensors), ("obs", obs)]:
            object.__setattr__(self, name, value)

    @property
    def dim(self):
        return self.grid_size ** 2

    @property
    def n_obs(self):
        return self.sensors.size

    def prior_potential_and_grad(self, u):
        x = linalg.cho_solve((self.chol, True), u)
        return 0.5 * float(u @ x), x

    def misfit_and_grad(self, u):
        """Negative log-likelihood (data misfit) and its gradient."""
        r = u[self.sensors] - self.obs
        g = np.zeros(self.dim)
        np.add.at(g, self.sensors, r / self.noise_sd ** 2)
        return 0.5 * float(r @ r) / self.noise_sd ** 2, g

    def misfit(self, u):
        u = _check_dim(u, self.dim, "u")
        r = u[self.sensors] - self.obs
        return 0.5 * float(r @ r) / self.noise_sd ** 2

    def log_likelihood(self, u):
        return -self.misfit(u)

    def potential_and_grad(self, q):
        q = _check_dim(q, self.dim)
        up, gp = self.prior_potential_and_grad(q)
        ul, gl = self.misfit_and_grad(q)
        return up + ul, gp + gl

    def prior_sample(self, rng):
        return self.chol @ rng.standard_normal(self.dim)


def gp_prior_sample(target, rng):
    return target.prior_sample(rng)


def synth_gp_inverse(grid_size=10, sigma_u=1.25, s0=0.0625, snr=10.0, rng=None, **kwargs):
    """Draw a true field from the prior and noisy sensor observations of it.

    The noise sd follows ``snr = max(u_true) / noise_sd``.
    """
    rng = np.random.default_rng(rng)
    base = GpLinearInverseTarget(grid_size=grid_size, sigma_u=sigma_u, s0=s0, **kwargs)
    u_true = base.prior_sample(rng)
    noise_sd = float(np.max(u_true)) / snr
    if noise_sd <= 0:
        noise_sd = float(np.max(np.abs(u_true))) / snr
    obs = u_true[base.sensors] + noise_sd * rng.standard_normal(base.n_obs)
    target = GpLinearInverseTarget(
        grid_size=grid_size, sigma_u=sigma_u, s0=s0, sensors=base.sensors, obs=obs,
        noise_sd=noise_sd, jitter=base.jitter, prior_cov=kwargs.get("prior_cov"))
    return target, u_true


def write_dataset_csv(path, X, y):
    """Write features and 0/1 labels with a header row; label column first."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y).astype(int)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"x{j}" for j in range(X.shape[1])])
        for yi, row in zip(y, X):
            writer.writerow([int(yi)] + [repr(float(v)) for v in row])


def load_dataset_csv(path):
    """Read a CSV with a ``label`` column; all other columns are features."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if "label" not in header:
            raise ValueError(f"{path}: no 'label' column")
        li = header.index("label")
        rows = [r for r in reader if r]
    data = np.array([[float(v) for v in r] for r in rows]).reshape(len(rows), len(header))
    y = data[:, li]
    X = np.delete(data, li, axis=1)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError(f"{path}: labels must be 0 or 1")
    return X, y.astype(int)

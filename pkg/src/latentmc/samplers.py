"""MCMC transition kernels: RWM, HMC, pCN and their latent-space variants.

Every ``*_step`` function performs one Metropolis-Hastings transition and
returns a :class:`StepOutcome`. Random numbers are drawn in a fixed order
(proposal noise first, then the uniform used for acceptance) so that kernels
sharing a generator stream can be compared draw for draw.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .diagnostics import ChainTrace
from .targets import DimensionError, NonFiniteError

logger = logging.getLogger(__name__)

DIVERGENCE_THRESHOLD = 1000.0


class DegenerateVolumeError(ArithmeticError):
    """Raised when a Jacobian is (numerically) rank deficient."""


class ChainAbortedError(RuntimeError):
    """A kernel raised mid-chain; ``trace`` holds everything recorded so far."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


class MassMatrix:
    """Gaussian momentum covariance M: identity, diagonal or dense."""

    def __init__(self, M, dim):
        self.dim = dim
        if M is None:
            M = np.ones(dim)
        M = np.asarray(M, dtype=float)
        if M.ndim == 1:
            if M.shape != (dim,) or np.any(M <= 0):
                raise ValueError("diagonal mass matrix must be positive with length dim")
            self.diag = True
            self.sqrt = np.sqrt(M)
            self.inv = 1.0 / M
        else:
            if M.shape != (dim, dim):
                raise DimensionError("mass matrix shape does not match dimension")
            if not np.allclose(M, M.T):
                raise ValueError("mass matrix must be symmetric")
            self.diag = False
            self.sqrt = np.linalg.cholesky(M)
            self.inv = np.linalg.inv(M)
        self.M = M

    def sample(self, rng):
        z = rng.standard_normal(self.dim)
        return self.sqrt * z if self.diag else self.sqrt @ z

    def inv_apply(self, p):
        return self.inv * p if self.diag else self.inv @ p

    def inv_matrix(self):
        return np.diag(self.inv) if self.diag else self.inv

    def kinetic(self, p):
        return 0.5 * float(p @ self.inv_apply(p))


def kinetic(p, M=None):
    """1/2 p' M^{-1} p; M may be None (identity), a diagonal vector or a matrix."""
    p = np.asarray(p, dtype=float)
    return MassMatrix(M, p.size).kinetic(p)


@dataclass
class SamplerConfig:
    """Tuning constants shared by all kernels.

    ``kinetic_start`` selects the kinetic energy entering the starting
    Hamiltonian of a latent HMC step: ``"ambient"`` uses K(p_v) of the sampled
    ambient momentum, ``"latent"`` uses K_h(phi(p_v)), the energy the latent
    integrator actually conserves.
    """

    step_size: float = 0.1
    n_leapfrog: int = 10
    mass_matrix: object = None
    volume_correction: bool = True
    pcn_step: float = 0.1
    proposal_sd: float = 1.0
    seed: int = 0
    kinetic_start: str = "latent"

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if int(self.n_leapfrog) < 1:
            raise ValueError("n_leapfrog must be at least 1")
        if self.pcn_step < 0:
            raise ValueError("pcn_step must be non-negative")
        if self.proposal_sd < 0:
            raise ValueError("proposal_sd must be non-negative")
        if self.kinetic_start not in ("ambient", "latent"):
            raise ValueError("kinetic_start must be 'ambient' or 'latent'")


@dataclass
class PhaseState:
    q: np.ndarray
    p: np.ndarray
    space: str = "ambient"

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.p = np.asarray(self.p, dtype=float)
        if self.q.shape != self.p.shape:
            raise DimensionError("position and momentum must have equal length")
        if self.space not in ("ambient", "latent"):
            raise ValueError("space must be 'ambient' or 'latent'")


@dataclass
class StepOutcome:
    q: np.ndarray
    proposal: np.ndarray
    accepted: bool
    log_rho: float
    hamiltonian_start: float
    hamiltonian_end: float
    log_volume_factor: float = 0.0
    u: float = 0.0
    n_grad: int = 0
    diverged: bool = False


def _accept(log_rho, u):
    if not np.isfinite(log_rho):
        return False if log_rho != np.inf else True
    return u < min(1.0, math.exp(min(log_rho, 0.0)))


def _finite(*arrays):
    return all(np.all(np.isfinite(a)) for a in arrays)


def leapfrog(value_and_grad_U, grad_K, q, p, step_size, n_steps, start=None):
    """Run ``n_steps`` leapfrog steps (half kick, drift, half kick).

    ``value_and_grad_U`` returns (U, dU/dq); ``grad_K`` returns dK/dp.
    ``start`` may carry the already-evaluated (U, grad) at ``q``.

    Returns (q, p, U, grad, n_grad, diverged), with U and grad at the final q.
    """
    n_grad = 0
    with np.errstate(over="ignore", invalid="ignore"):
        try:
            if start is None:
                U, g = value_and_grad_U(q)
                n_grad += 1
            else:
                U, g = start
            for _ in range(n_steps):
                p = p - 0.5 * step_size * g
                q = q + step_size * grad_K(p)
                U, g = value_and_grad_U(q)
                n_grad += 1
                p = p - 0.5 * step_size * g
                if not (np.isfinite(U) and _finite(q, p)):
                    return q, p, U, g, n_grad, True
        except (NonFiniteError, FloatingPointError, OverflowError):
            return q, p, np.nan, None, n_grad, True
    return q, p, U, g, n_grad, False


def leapfrog_ambient(target, state, step_size, n_leapfrog, M=None):
    """Ambient leapfrog trajectory; returns the end PhaseState.

    Raises FloatingPointError if the trajectory diverges.
    """
    if state.space != "ambient":
        raise ValueError("leapfrog_ambient needs an ambient-space state")
    mass = MassMatrix(M, state.q.size)
    q, p, _, _, _, diverged = leapfrog(
        target.potential_and_grad, mass.inv_apply, state.q, state.p, step_size, n_leapfrog)
    if diverged:
        raise FloatingPointError("leapfrog trajectory diverged")
    return PhaseState(q, p, "ambient")


def _mh_outcome(q, q_star, h_start, h_end, log_vol, u, n_grad, diverged=False):
    log_rho = h_start - h_end + log_vol
    if diverged or not np.isfinite(log_rho) or abs(h_end - h_start) > DIVERGENCE_THRESHOLD:
        log_rho = -np.inf
        diverged = True
    accepted = _accept(log_rho, u)
    return StepOutcome(
        q=q_star if accepted else q, proposal=q_star, accepted=accepted,
        log_rho=float(log_rho), hamiltonian_start=float(h_start),
        hamiltonian_end=float(h_end), log_volume_factor=float(log_vol), u=float(u),
        n_grad=n_grad, diverged=diverged)


def hmc_step(target, q, cfg, rng, mass=None):
    q = np.asarray(q, dtype=float)
    if q.shape != (target.dim,):
        raise DimensionError(f"q has shape {q.shape}, expected ({target.dim},)")
    mass = mass or MassMatrix(cfg.mass_matrix, target.dim)
    p = mass.sample(rng)
    U0, g0 = target.potential_and_grad(q)
    q1, p1, U1, _, n_grad, diverged = leapfrog(
        target.potential_and_grad, mass.inv_apply, q, p, cfg.step_size,
        int(cfg.n_leapfrog), start=(U0, g0))
    u = rng.random()
    h0 = U0 + mass.kinetic(p)
    h1 = U1 + mass.kinetic(p1) if not diverged else np.nan
    return _mh_outcome(q, q1, h0, h1, 0.0, u, n_grad + 1, diverged)


def rwm_step(target, q, proposal_sd, rng):
    q = np.asarray(q, dtype=float)
    if q.shape != (target.dim,):
        raise DimensionError(f"q has shape {q.shape}, expected ({target.dim},)")
    q_star = q + proposal_sd * rng.standard_normal(q.size)
    u = rng.random()
    U0 = target.potential(q)
    try:
        U1 = target.potential(q_star)
    except NonFiniteError:
        U1 = np.nan
    return _mh_outcome(q, q_star, U0, U1, 0.0, u, 0)


def log_gramian_volume(J):
    """Log of the Gramian volume sqrt(det(J'J)) (tall) or sqrt(det(JJ')) (wide).

    Computed from the triangular factor of a QR decomposition, whose diagonal
    magnitudes multiply to the product of the singular values.
    """
    J = np.atleast_2d(np.asarray(J, dtype=float))
    a, b = J.shape
    R = np.linalg.qr(J if a >= b else J.T, mode="r")
    d = np.abs(np.diag(R))
    if d.size == 0:
        return 0.0
    if d.min() <= np.finfo(float).eps * max(a, b) * d.max():
        raise DegenerateVolumeError("Jacobian is rank deficient")
    logvol = float(np.sum(np.log(d)))
    if logvol < math.log(1e-300):
        raise DegenerateVolumeError("Jacobian volume below 1e-300")
    return logvol


def gramian_volume(J):
    return math.exp(log_gramian_volume(J))


class LatentDynamics:
    """Potential and kinetic energies pulled back into an autoencoder's latent space.

    Position path: U_h(z) = U(psi(z)). When the decoder ends in a linear layer
    q = W h + c, the target's reduced potential is built once so that
    per-step cost scales with the width of h rather than with D.

    Momentum path: K_h(p) = 1/2 psi0(p)' M^{-1} psi0(p), psi0 being the
    bias-free decoder. With a linear output layer W, W' M^{-1} W is precomputed.
    """

    def __init__(self, target, ae, mass=None):
        if ae.ambient_dim != target.dim:
            raise DimensionError("autoencoder ambient dimension does not match target")
        self.target = target
        self.ae = ae
        self.mass = mass or MassMatrix(None, target.dim)
        dec = ae.decoder_layers
        last = dec[-1]
        self.pre = dec[:-1]
        self.linear_out = last.activation == "identity"
        if self.linear_out:
            self.reduced = target.reduce(last.weight, last.bias)
            Minv = self.mass.inv_matrix()
            self.kinetic_gram = last.weight.T @ (Minv @ last.weight)

    def _pre(self, z, use_bias):
        h, J = z, None
        for layer in self.pre:
            Jl = layer.jacobian(h, use_bias)
            J = Jl if J is None else Jl @ J
            h = layer.forward(h, use_bias)
        return h, J

    def potential_and_grad(self, z):
        if self.linear_out:
            h, J = self._pre(z, True)
            U, gh = self.reduced.potential_and_grad(h)
            return U, gh if J is None else J.T @ gh
        q = self.ae.decode(z)
        U, g = self.target.potential_and_grad(q)
        return U, self.ae.decoder_jacobian(z).T @ g

    def kinetic_and_grad(self, p):
        if self.linear_out:
            h, J = self._pre(p, False)
            Gh = self.kinetic_gram @ h
            return 0.5 * float(h @ Gh), Gh if J is None else J.T @ Gh
        v = self.ae.decode(p, use_bias=False)
        Mv = self.mass.inv_apply(v)
        return 0.5 * float(v @ Mv), self.ae.decoder_jacobian(p, use_bias=False).T @ Mv

    def grad_K(self, p):
        return self.kinetic_and_grad(p)[1]

    def encode_momentum(self, p_v):
        return self.ae.encode(p_v, use_bias=False)

    def decode_momentum(self, p_h):
        return self.ae.decode(p_h, use_bias=False)

    def trajectory(self, q_h, p_h, step_size, n_leapfrog):
        return leapfrog(self.potential_and_grad, self.grad_K, q_h, p_h,
                        step_size, n_leapfrog)

    def log_volume(self, q_v, p_v, q_h_end, p_h_end):
        """Log of the endpoint Gramian factors of the phase-space map.

        Position and momentum are mapped independently, so each Jacobian is
        block diagonal and its Gramian is the product of the blocks'.
        """
        ae = self.ae
        return (log_gramian_volume(ae.decoder_jacobian(q_h_end))
                + log_gramian_volume(ae.decoder_jacobian(p_h_end, use_bias=False))
                + log_gramian_volume(ae.encoder_jacobian(q_v))
                + log_gramian_volume(ae.encoder_jacobian(p_v, use_bias=False)))


def latent_grad_U(target, ae, z):
    """(d psi / dz)' grad U(psi(z)), evaluated with the full decoder Jacobian."""
    z = np.asarray(z, dtype=float)
    return ae.decoder_jacobian(z).T @ target.gradient(ae.decode(z))


def latent_grad_K(ae, p_h, M=None):
    p_h = np.asarray(p_h, dtype=float)
    mass = MassMatrix(M, ae.ambient_dim)
    v = ae.decode(p_h, use_bias=False)
    return ae.decoder_jacobian(p_h, use_bias=False).T @ mass.inv_apply(v)


def latent_kinetic(ae, p_h, M=None):
    p_h = np.asarray(p_h, dtype=float)
    return kinetic(ae.decode(p_h, use_bias=False), M)


def ae_hmc_step(target, ae, q_v, cfg, rng, dynamics=None):
    """One auto-encoding HMC transition.

    The ambient momentum is encoded, L leapfrog steps run in the latent space,
    and the decoded end point is accepted with probability
    min(1, exp(-dH) * endpoint Gramian volume ratio), the volume term being
    dropped when ``cfg.volume_correction`` is off.
    """
    q_v = np.asarray(q_v, dtype=float)
    if q_v.shape != (target.dim,):
        raise DimensionError(f"q has shape {q_v.shape}, expected ({target.dim},)")
    dyn = dynamics or LatentDynamics(target, ae, MassMatrix(cfg.mass_matrix, target.dim))
    mass = dyn.mass
    p_v = mass.sample(rng)
    q_h = ae.encode(q_v)
    p_h = dyn.encode_momentum(p_v)
    q_hL, p_hL, _, _, n_grad, diverged = dyn.trajectory(
        q_h, p_h, cfg.step_size, int(cfg.n_leapfrog))
    u = rng.random()
    U0 = target.potential(q_v)
    if cfg.kinetic_start == "latent":
        K0 = dyn.kinetic_and_grad(p_h)[0]
    else:
        K0 = mass.kinetic(p_v)
    h0 = U0 + K0
    if diverged:
        return _mh_outcome(q_v, q_v.copy(), h0, np.nan, 0.0, u, n_grad, True)
    q_star = ae.decode(q_hL)
    p_star = dyn.decode_momentum(p_hL)
    log_vol = 0.0
    try:
        h1 = target.potential(q_star) + mass.kinetic(p_star)
        if cfg.volume_correction:
            log_vol = dyn.log_volume(q_v, p_v, q_hL, p_hL)
    except (NonFiniteError, DegenerateVolumeError):
        return _mh_outcome(q_v, q_star, h0, np.nan, 0.0, u, n_grad, True)
    return _mh_outcome(q_v, q_star, h0, h1, log_vol, u, n_grad)


def proposal_map(target, ae, q_v, p_v, cfg, dynamics=None):
    """Deterministic latent proposal (q_v, p_v) -> (psi(q_h^L), psi0(p_h^L))."""
    dyn = dynamics or LatentDynamics(target, ae, MassMatrix(cfg.mass_matrix, target.dim))
    q_hL, p_hL, _, _, _, diverged = dyn.trajectory(
        ae.encode(q_v), dyn.encode_momentum(p_v), cfg.step_size, int(cfg.n_leapfrog))
    if diverged:
        raise FloatingPointError("latent trajectory diverged")
    return ae.decode(q_hL), dyn.decode_momentum(p_hL)


def reversibility_check(ae, target, state, cfg):
    """Infinity-norm defect of the negate-momentum round trip of the proposal map.

    The state is first projected onto the autoencoder's image, the only
    set on which the map can be its own inverse under momentum flip.
    """
    q0 = ae.decode(ae.encode(state.q))
    p0 = ae.decode(ae.encode(state.p, use_bias=False), use_bias=False)
    q1, p1 = proposal_map(target, ae, q0, p0, cfg)
    q2, p2 = proposal_map(target, ae, q1, -p1, cfg)
    return float(max(np.max(np.abs(q2 - q0)), np.max(np.abs(p2 + p0))))


def pcn_coefficient(h):
    """(1 - h/4) / (1 + h/4)."""
    return (1.0 - h / 4.0) / (1.0 + h / 4.0)


def pcn_step(target, q_v, cfg, rng):
    """Preconditioned Crank-Nicolson step against the target's Gaussian prior.

    Only the data misfit enters the acceptance ratio; the prior cancels.
    """
    q_v = np.asarray(q_v, dtype=float)
    if q_v.shape != (target.dim,):
        raise DimensionError(f"q has shape {q_v.shape}, expected ({target.dim},)")
    rho = pcn_coefficient(cfg.pcn_step)
    xi = target.chol @ rng.standard_normal(target.dim)
    q_star = rho * q_v + math.sqrt(max(0.0, 1.0 - rho * rho)) * xi
    u = rng.random()
    return _mh_outcome(q_v, q_star, target.misfit(q_v), target.misfit(q_star), 0.0, u, 0)


@dataclass(frozen=True, eq=False)
class LatentReference:
    """Gaussian reference measure N(mean, cov) for latent pCN proposals."""

    mean: np.ndarray
    cov: np.ndarray
    chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "chol", np.linalg.cholesky(cov))

    @classmethod
    def identity(cls, r):
        return cls(np.zeros(r), np.eye(r))

    @classmethod
    def from_encodings(cls, Z, jitter=1e-10):
        """Empirical mean and covariance of encoded warm-up samples.

        Falls back to the identity when the covariance is not positive definite.
        """
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        r = Z.shape[1]
        cov = np.atleast_2d(np.cov(Z, rowvar=False))
        cov = cov + jitter * max(1.0, float(np.trace(cov)) / r) * np.eye(r)
        try:
            return cls(Z.mean(axis=0), cov)
        except np.linalg.LinAlgError:
            logger.warning("latent covariance not positive definite; using identity")
            return cls.identity(r)

    def potential(self, z):
        d = np.linalg.solve(self.chol, z - self.mean)
        return 0.5 * float(d @ d)


def ae_pcn_step(target, ae, q_v, cfg, rng, reference=None):
    """pCN proposal made in the latent space, then decoded.

    The latent proposal is reversible with respect to the reference Gaussian,
    so the acceptance ratio is the ambient posterior ratio times the inverse
    reference-density ratio, times the endpoint Gramian factors when
    ``cfg.volume_correction`` is on.
    """
    q_v = np.asarray(q_v, dtype=float)
    if q_v.shape != (target.dim,):
        raise DimensionError(f"q has shape {q_v.shape}, expected ({target.dim},)")
    ref = reference or LatentReference.identity(ae.latent_dim)
    rho = pcn_coefficient(cfg.pcn_step)
    z = rng.standard_normal(ae.latent_dim)
    q_h = ae.encode(q_v)
    q_h_star = ref.mean + rho * (q_h - ref.mean) + math.sqrt(max(0.0, 1.0 - rho * rho)) * (ref.chol @ z)
    q_star = ae.decode(q_h_star)
    u = rng.random()
    h0 = target.potential(q_v) - ref.potential(q_h)
    log_vol = 0.0
    try:
        h1 = target.potential(q_star) - ref.potential(q_h_star)
        if cfg.volume_correction:
            log_vol = (log_gramian_volume(ae.decoder_jacobian(q_h_star))
                       + log_gramian_volume(ae.encoder_jacobian(q_v)))
    except (NonFiniteError, DegenerateVolumeError):
        return _mh_outcome(q_v, q_star, h0, np.nan, 0.0, u, 0, True)
    return _mh_outcome(q_v, q_star, h0, h1, log_vol, u, 0)


@dataclass
class Kernel:
    """A step function bound to its target, configuration and tuning knob.

    ``tune_attr`` names the SamplerConfig field adapted during warm-up;
    increasing it is assumed to lower the acceptance rate.
    """

    name: str
    step: object
    cfg: SamplerConfig
    tune_attr: str | None = None
    accept_range: tuple = (0.6, 0.75)
    dim: int | None = None

    def __call__(self, q, rng):
        return self.step(q, self.cfg, rng)


def hmc_kernel(target, cfg):
    mass = MassMatrix(cfg.mass_matrix, target.dim)
    return Kernel("hmc", lambda q, c, rng: hmc_step(target, q, c, rng, mass), cfg,
                  "step_size", (0.6, 0.75), target.dim)


def rwm_kernel(target, cfg):
    return Kernel("rwm", lambda q, c, rng: rwm_step(target, q, c.proposal_sd, rng), cfg,
                  "proposal_sd", (0.2, 0.35), target.dim)


def pcn_kernel(target, cfg):
    return Kernel("pcn", lambda q, c, rng: pcn_step(target, q, c, rng), cfg,
                  "pcn_step", (0.2, 0.35), target.dim)


def ae_hmc_kernel(target, ae, cfg):
    dyn = LatentDynamics(target, ae, MassMatrix(cfg.mass_matrix, target.dim))
    return Kernel("ae-hmc", lambda q, c, rng: ae_hmc_step(target, ae, q, c, rng, dyn), cfg,
                  "step_size", (0.6, 0.75), target.dim)


def ae_pcn_kernel(target, ae, cfg, reference=None):
    ref = reference or LatentReference.identity(ae.latent_dim)
    return Kernel("ae-pcn", lambda q, c, rng: ae_pcn_step(target, ae, q, c, rng, ref), cfg,
                  "pcn_step", (0.2, 0.35), target.dim)


def _adapt(kernel, window_accept):
    lo, hi = kernel.accept_range
    value = getattr(kernel.cfg, kernel.tune_attr)
    if window_accept < lo:
        value *= 0.9
    elif window_accept > hi:
        value *= 1.1
    kernel.cfg = replace(kernel.cfg, **{kernel.tune_attr: value})


def run_chain(kernel, q0, n_iter, n_warmup, thin=1, rng=None, adapt=False, window=20,
              keep_warmup=False):
    """Iterate ``kernel`` from ``q0`` and record a :class:`ChainTrace`.

    States after the first ``n_warmup`` iterations are kept every ``thin``
    steps; per-iteration metadata is kept for all iterations. With ``adapt``
    (and a kernel that names a tuning knob) the knob is scaled by 1.1 or 0.9
    after every ``window`` warm-up iterations whose acceptance rate falls
    outside the kernel's ``accept_range``. ``keep_warmup`` also stores every
    warm-up state in ``trace.warmup_samples``.
    """
    if not n_iter >= n_warmup >= 0:
        raise ValueError("need n_iter >= n_warmup >= 0")
    if thin < 1:
        raise ValueError("thin must be at least 1")
    rng = rng if rng is not None else np.random.default_rng(kernel.cfg.seed)
    q = np.asarray(q0, dtype=float).copy()
    trace = ChainTrace.empty(q.size, n_iter, method=kernel.name)
    start = time.perf_counter()
    recent = []
    warm = []
    for it in range(n_iter):
        try:
            out = kernel(q, rng)
        except Exception as exc:
            trace.finalize(it, time.perf_counter() - start, kernel.cfg)
            raise ChainAbortedError(f"kernel failed at iteration {it}: {exc}", trace) from exc
        q = out.q
        trace.record(it, out)
        if it >= n_warmup and (it - n_warmup) % thin == 0:
            trace.keep(it, q)
        elif keep_warmup and it < n_warmup:
            warm.append(q.copy())
        if adapt and kernel.tune_attr and it < n_warmup:
            recent.append(out.accepted)
            if len(recent) == window:
                _adapt(kernel, float(np.mean(recent)))
                recent = []
    trace.finalize(n_iter, time.perf_counter() - start, kernel.cfg)
    trace.n_warmup = n_warmup
    trace.thin = thin
    if keep_warmup:
        trace.warmup_samples = np.array(warm).reshape(len(warm), q.size)
    return trace

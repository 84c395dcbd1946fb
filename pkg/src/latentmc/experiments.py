"""End-to-end experiments: warm-up sampling, autoencoder fit, latent sampling, report.

Each experiment runs in three stages. A baseline chain (HMC or pCN) is run
and its warm-up draws become the autoencoder's training set; the autoencoder
is fitted; the latent-space chain (AE-HMC or AE-pCN) is run from the
projection of the last warm-up state. Traces, summaries and a comparison
report are written to the output directory.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autoencoder as aemod
from .diagnostics import (cost_report, interval_coverage, predictive_accuracy, summarize,
                          write_json, write_trace_csv)
from .samplers import (LatentReference, SamplerConfig, ae_hmc_kernel, ae_pcn_kernel,
                       hmc_kernel, pcn_kernel, run_chain, rwm_kernel)
from .targets import (GaussianTarget, ILLUSTRATION_COVARIANCE, LogisticRegressionTarget,
                      load_dataset_csv, sigmoid, synth_gp_inverse, write_dataset_csv)

logger = logging.getLogger(__name__)

EXPERIMENTS = ("gaussian3d", "logistic_synthetic", "logistic_csv", "gp_inverse")
METHODS = ("hmc", "ae-hmc", "rwm", "pcn", "ae-pcn")

# stream offsets from the master seed
DATA_STREAM, BASELINE_STREAM, TRAIN_STREAM, LATENT_STREAM = 0, 1, 2, 3


class InvalidCorrelationError(ValueError):
    pass


def synth_logistic_data(D=500, n_train=550, n_test=150, block=50, rho_data=0.85,
                        prior_sd=10.0, rng=None):
    """Synthetic binary-classification data with a correlated feature block.

    The first ``block`` features are equicorrelated Gaussians with correlation
    ``rho_data``; the rest are iid standard normal. True coefficients are drawn
    from the N(0, prior_sd^2) prior and labels are Bernoulli(sigmoid(X beta)).
    """
    if not 0 <= block <= D:
        raise ValueError("block must lie in [0, D]")
    if block > 1 and not -1.0 / (block - 1) < rho_data < 1.0:
        raise InvalidCorrelationError(
            f"rho_data={rho_data} outside (-1/(block-1), 1) for block={block}")
    rng = np.random.default_rng(rng)
    n = n_train + n_test
    parts = []
    if block:
        C = np.full((block, block), rho_data)
        np.fill_diagonal(C, 1.0)
        parts.append(rng.standard_normal((n, block)) @ np.linalg.cholesky(C).T)
    parts.append(rng.standard_normal((n, D - block)))
    X = np.hstack(parts)
    beta = prior_sd * rng.standard_normal(D)
    y = (rng.random(n) < sigmoid(X @ beta)).astype(int)
    return {
        "X_train": X[:n_train], "y_train": y[:n_train],
        "X_test": X[n_train:], "y_test": y[n_train:], "beta_true": beta,
    }


def _default_target(experiment):
    return {
        "gaussian3d": {"covariance": ILLUSTRATION_COVARIANCE.tolist()},
        "logistic_synthetic": {"D": 500, "n_train": 550, "n_test": 150, "block": 50,
                               "rho_data": 0.85, "prior_sd": 10.0},
        "logistic_csv": {"train_csv": None, "test_csv": None, "prior_sd": 10.0},
        "gp_inverse": {"grid_size": 10, "sigma_u": 1.25, "s0": 0.0625, "snr": 10.0},
    }[experiment]


def _default_latent_dim(experiment):
    return {"gaussian3d": 2, "logistic_synthetic": 50, "logistic_csv": None,
            "gp_inverse": 25}[experiment]


def _default_iterations(experiment):
    # pCN steps are cheap but strongly correlated; the GP study needs longer chains
    return (6000, 1000) if experiment == "gp_inverse" else (2000, 1000)


def _default_samplers(experiment):
    if experiment == "gp_inverse":
        return ({"pcn_step": 0.5}, {"pcn_step": 0.5, "volume_correction": True})
    if experiment == "gaussian3d":
        return ({"step_size": 0.1, "n_leapfrog": 15},
                {"step_size": 0.1, "n_leapfrog": 15, "volume_correction": True})
    return ({"step_size": 0.05, "n_leapfrog": 20},
            {"step_size": 0.05, "n_leapfrog": 20, "volume_correction": False})


@dataclass
class ExperimentConfig:
    """All experiment constants; every field defaults to the desk-scale study.

    ``baseline`` and ``latent`` hold SamplerConfig overrides for the two
    chains; ``train`` holds TrainConfig overrides and ``arch`` Architecture
    overrides for a trained autoencoder. ``ae_kind`` is ``"pca"``,
    ``"linear"`` or ``"tanh"``.
    """

    experiment: str = "logistic_synthetic"
    seed: int = 0
    out_dir: str = "runs"
    n_iter: int | None = None
    n_warmup: int | None = None
    thin: int = 1
    warmup_fraction: float = 0.5
    latent_dim: int | None = None
    ae_kind: str = "pca"
    target: dict = field(default_factory=dict)
    baseline: dict = field(default_factory=dict)
    latent: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    arch: dict = field(default_factory=dict)
    methods: list | None = None
    adapt: bool = True
    trace_columns: int = 50

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        iters, warm = _default_iterations(self.experiment)
        self.n_iter = iters if self.n_iter is None else self.n_iter
        self.n_warmup = warm if self.n_warmup is None else self.n_warmup
        if not 0 < self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if not self.n_iter > self.n_warmup >= 1:
            raise ValueError("need n_iter > n_warmup >= 1")
        if self.ae_kind not in ("pca", "linear", "tanh"):
            raise ValueError("ae_kind must be 'pca', 'linear' or 'tanh'")
        self.target = {**_default_target(self.experiment), **self.target}
        if self.latent_dim is None:
            self.latent_dim = _default_latent_dim(self.experiment)
        base, lat = _default_samplers(self.experiment)
        self.baseline = {**base, **self.baseline}
        self.latent = {**lat, **self.latent}
        if self.methods is not None:
            bad = set(self.methods) - set(METHODS)
            if bad:
                raise ValueError(f"unknown methods {sorted(bad)}")

    @property
    def n_train_samples(self):
        return min(self.n_warmup, int(round(self.warmup_fraction * self.n_iter)))

    @classmethod
    def from_json(cls, path, **overrides):
        with open(path) as fh:
            doc = json.load(fh)
        doc.update({k: v for k, v in overrides.items() if v is not None})
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self):
        return dataclasses.asdict(self)


def _rng(seed, stream):
    return np.random.default_rng([int(seed), stream])


def _sampler_cfg(cfg, overrides, stream):
    return SamplerConfig(**{"seed": int(cfg.seed) * 10 + stream, **overrides})


def build_problem(cfg):
    """Target, initial state and experiment-specific extras (data, truth)."""
    tp = cfg.target
    rng = _rng(cfg.seed, DATA_STREAM)
    if cfg.experiment == "gaussian3d":
        cov = np.array(tp["covariance"], dtype=float)
        target = GaussianTarget(np.zeros(cov.shape[0]), cov)
        return target, np.zeros(target.dim), {}
    if cfg.experiment == "logistic_synthetic":
        data = synth_logistic_data(
            D=tp["D"], n_train=tp["n_train"], n_test=tp["n_test"], block=tp["block"],
            rho_data=tp["rho_data"], prior_sd=tp["prior_sd"], rng=rng)
        target = LogisticRegressionTarget(data["X_train"], data["y_train"],
                                          tp["prior_sd"] ** 2)
        return target, np.zeros(target.dim), data
    if cfg.experiment == "logistic_csv":
        if not tp.get("train_csv"):
            raise ValueError("logistic_csv needs target.train_csv")
        X, y = load_dataset_csv(tp["train_csv"])
        data = {"X_train": X, "y_train": y}
        if tp.get("test_csv"):
            data["X_test"], data["y_test"] = load_dataset_csv(tp["test_csv"])
        if cfg.latent_dim is None:
            cfg.latent_dim = max(1, X.shape[1] // 10)
        target = LogisticRegressionTarget(X, y, tp["prior_sd"] ** 2)
        return target, np.zeros(target.dim), data
    target, u_true = synth_gp_inverse(
        grid_size=tp["grid_size"], sigma_u=tp["sigma_u"], s0=tp["s0"], snr=tp["snr"], rng=rng)
    return target, np.zeros(target.dim), {"u_true": u_true}


def fit_autoencoder(cfg, samples):
    r = cfg.latent_dim
    if r >= samples.shape[1]:
        raise ValueError("latent_dim must be smaller than the ambient dimension")
    if cfg.ae_kind == "pca":
        return aemod.pca_fit(samples, r), {}
    train = {"seed": int(_rng(cfg.seed, TRAIN_STREAM).integers(2 ** 31)), **cfg.train}
    tcfg = aemod.TrainConfig(**train)
    tcfg.batch_size = min(tcfg.batch_size, samples.shape[0])
    arch = {"latent_dim": r, **cfg.arch}
    if cfg.ae_kind == "tanh" and not arch.get("decoder_hidden"):
        arch["decoder_hidden"] = (max(r, 2 * r),)
    ae = aemod.train_autoencoder(samples, tcfg, aemod.Architecture(**arch))
    return ae, {"loss_history": tcfg.loss_history}


def _baseline_method(cfg):
    return "pcn" if cfg.experiment == "gp_inverse" else "hmc"


def _latent_method(cfg):
    return "ae-pcn" if cfg.experiment == "gp_inverse" else "ae-hmc"


def _method_metrics(cfg, target, trace, extras):
    m = {}
    if "X_test" in extras:
        m["accuracy"] = predictive_accuracy(trace, extras["X_test"], extras["y_test"])
    if "beta_true" in extras:
        m["coverage_95"] = interval_coverage(trace.samples, extras["beta_true"])
    if cfg.experiment == "gp_inverse":
        ll = np.array([target.log_likelihood(s) for s in trace.samples])
        m["log_likelihood"] = float(ll.mean())
        m["log_likelihood_per_obs"] = float(ll.mean() / target.n_obs)
    if cfg.experiment == "gaussian3d":
        cov = np.cov(trace.samples, rowvar=False)
        m["covariance_rel_error"] = float(
            np.linalg.norm(cov - target.covariance) / np.linalg.norm(target.covariance))
    return m


def _confinement(ae, trace):
    """Largest decoded-state component off the decoder's column span."""
    W = ae.decoder_layers[-1].weight
    c = ae.decoder_layers[-1].bias
    Q, _ = np.linalg.qr(W, mode="complete")
    normal = Q[:, W.shape[1]:]
    return float(np.max(np.abs((trace.samples - c) @ normal))) if normal.size else 0.0


def run_experiment(cfg, out_dir=None, write=True):
    """Run all three stages and (optionally) write artifacts. Returns the report."""
    out_dir = out_dir or cfg.out_dir
    if write:
        os.makedirs(out_dir, exist_ok=True)
    target, q0, extras = build_problem(cfg)
    wanted = cfg.methods or [_baseline_method(cfg), _latent_method(cfg)]
    report = {"experiment": cfg.experiment, "seed": cfg.seed, "config": cfg.to_dict(),
              "methods": {}, "warnings": []}
    if write and cfg.experiment == "logistic_synthetic":
        write_dataset_csv(os.path.join(out_dir, "train.csv"), extras["X_train"], extras["y_train"])
        write_dataset_csv(os.path.join(out_dir, "test.csv"), extras["X_test"], extras["y_test"])
        write_json({"beta_true": extras["beta_true"]}, os.path.join(out_dir, "truth.json"))

    cols = list(range(min(cfg.trace_columns, target.dim)))
    traces = {}

    # stage 1: baseline chain; its warm-up draws train the autoencoder
    base_name = _baseline_method(cfg)
    needs_latent = any(m.startswith("ae-") for m in wanted)
    if base_name in wanted or needs_latent:
        kernel = _make_kernel(base_name, target, _sampler_cfg(cfg, cfg.baseline, BASELINE_STREAM))
        traces[base_name] = run_chain(kernel, q0, cfg.n_iter, cfg.n_warmup, cfg.thin,
                                      _rng(cfg.seed, BASELINE_STREAM), adapt=cfg.adapt,
                                      keep_warmup=True)
        warm = traces[base_name].warmup_samples[-cfg.n_train_samples:]

    for name in wanted:
        if name in ("rwm",) or (name in ("hmc", "pcn") and name != base_name):
            kernel = _make_kernel(name, target, _sampler_cfg(cfg, cfg.baseline, BASELINE_STREAM))
            traces[name] = run_chain(kernel, q0, cfg.n_iter, cfg.n_warmup, cfg.thin,
                                     _rng(cfg.seed, BASELINE_STREAM), adapt=cfg.adapt)

    ae = None
    if needs_latent:
        # stage 2
        t0 = time.perf_counter()
        ae, train_info = fit_autoencoder(cfg, warm)
        train_time = time.perf_counter() - t0
        report["autoencoder"] = {
            "kind": cfg.ae_kind, "latent_dim": ae.latent_dim, "n_train": warm.shape[0],
            "train_mse": ae.reconstruction_mse(warm), "train_time": train_time,
            **({"final_loss": train_info["loss_history"][-1]} if train_info else {}),
        }
        if write:
            aemod.save_autoencoder(ae, os.path.join(out_dir, "autoencoder.json"))
        # stage 3
        start = ae.decode(ae.encode(warm[-1]))
        for name in wanted:
            if not name.startswith("ae-"):
                continue
            scfg = _sampler_cfg(cfg, cfg.latent, LATENT_STREAM)
            if name == "ae-pcn":
                ref = LatentReference.from_encodings(ae.encode_batch(warm))
                kernel = ae_pcn_kernel(target, ae, scfg, ref)
            else:
                kernel = ae_hmc_kernel(target, ae, scfg)
            traces[name] = run_chain(kernel, start, cfg.n_iter, cfg.n_warmup, cfg.thin,
                                     _rng(cfg.seed, LATENT_STREAM), adapt=cfg.adapt)

    for name in wanted:
        trace = traces[name]
        metrics = _method_metrics(cfg, target, trace, extras)
        if name.startswith("ae-") and cfg.experiment == "gaussian3d":
            metrics["off_manifold_max"] = _confinement(ae, trace)
            evals = np.sort(np.linalg.eigvalsh(target.covariance))[::-1][:ae.latent_dim]
            Z = ae.encode_batch(trace.samples)
            metrics["latent_variances"] = Z.var(axis=0, ddof=1).tolist()
            metrics["top_eigenvalues"] = evals.tolist()
        lo, hi = (0.6, 0.75) if name in ("hmc", "ae-hmc") else (0.2, 0.35)
        acc = trace.acceptance_rate
        if not lo <= acc <= hi:
            msg = f"{name}: acceptance rate {acc:.3f} outside [{lo}, {hi}]"
            report["warnings"].append(msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
        report["methods"][name] = {"acceptance_rate": acc, "wall_time": trace.wall_time,
                                   "n_grad_evals": trace.n_grad_evals, **metrics}
        if write:
            write_trace_csv(trace, os.path.join(out_dir, f"trace_{name}.csv"), cols)
            write_json(summarize(trace, metrics, max_params=len(cols)),
                       os.path.join(out_dir, f"summary_{name}.json"))
            write_json({"method": name, "config": trace.final_config,
                        "seed": cfg.seed, "wall_time": trace.wall_time,
                        "acceptance_rate": acc},
                       os.path.join(out_dir, f"meta_{name}.json"))
    if len(traces) >= 2:
        report["cost"] = cost_report(list(traces.values()), list(traces))
    if write:
        write_json(report, os.path.join(out_dir, "report.json"))
    report["traces"] = traces
    report["autoencoder_model"] = ae
    report["target_obj"] = target
    report["extras"] = extras
    return report


def _make_kernel(name, target, scfg):
    if name == "hmc":
        return hmc_kernel(target, scfg)
    if name == "rwm":
        return rwm_kernel(target, scfg)
    if name == "pcn":
        return pcn_kernel(target, scfg)
    raise ValueError(f"{name} is not a baseline method")

"""Chain traces and the statistics computed from them."""

from __future__ import annotations

import csv
import dataclasses
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .targets import sigmoid

META_COLUMNS = ("iter", "accepted", "log_rho", "H_start", "H_end", "log_volume_factor")


class DegenerateSeriesWarning(RuntimeWarning):
    pass


@dataclass
class ChainTrace:
    """Kept samples plus per-iteration Metropolis-Hastings metadata."""

    samples: np.ndarray
    kept_iters: np.ndarray
    accepted: np.ndarray
    log_rho: np.ndarray
    h_start: np.ndarray
    h_end: np.ndarray
    log_volume_factor: np.ndarray
    u: np.ndarray
    method: str = ""
    n_warmup: int = 0
    thin: int = 1
    n_completed: int = 0
    wall_time: float = 0.0
    n_grad_evals: int = 0
    final_config: dict = field(default_factory=dict)
    warmup_samples: np.ndarray | None = field(default=None, repr=False)
    _kept: list = field(default_factory=list, repr=False)

    @classmethod
    def empty(cls, dim, n_iter, method=""):
        return cls(
            samples=np.zeros((0, dim)), kept_iters=np.zeros(0, dtype=int),
            accepted=np.zeros(n_iter, dtype=bool), log_rho=np.full(n_iter, np.nan),
            h_start=np.full(n_iter, np.nan), h_end=np.full(n_iter, np.nan),
            log_volume_factor=np.zeros(n_iter), u=np.full(n_iter, np.nan), method=method)

    def record(self, it, out):
        self.accepted[it] = out.accepted
        self.log_rho[it] = out.log_rho
        self.h_start[it] = out.hamiltonian_start
        self.h_end[it] = out.hamiltonian_end
        self.log_volume_factor[it] = out.log_volume_factor
        self.u[it] = out.u
        self.n_grad_evals += out.n_grad

    def keep(self, it, q):
        self._kept.append((it, np.array(q, copy=True)))

    def finalize(self, n_completed, wall_time, cfg=None):
        kept = self._kept
        if kept:
            self.kept_iters = np.array([it for it, _ in kept], dtype=int)
            self.samples = np.vstack([q for _, q in kept])
        self.n_completed = n_completed
        self.wall_time = wall_time
        if cfg is not None:
            self.final_config = {k: _jsonable(v) for k, v in dataclasses.asdict(cfg).items()}
        for name in ("accepted", "log_rho", "h_start", "h_end", "log_volume_factor", "u"):
            setattr(self, name, getattr(self, name)[:n_completed])

    @property
    def acceptance_rate(self):
        post = self.accepted[self.n_warmup:]
        return float(post.mean()) if post.size else float("nan")

    @property
    def n_kept(self):
        return self.samples.shape[0]


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def _autocorr(x):
    n = x.size
    x = x - x.mean()
    m = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, m)
    acov = np.fft.irfft(f * np.conj(f), m)[:n] / n
    return acov / acov[0]


def ess(series):
    """Effective sample size with Geyer's initial positive sequence.

    Pairs of consecutive autocorrelations are summed while positive and
    forced monotone; the result is clamped to (0, n]. A constant series has
    ESS 0 and raises :class:`DegenerateSeriesWarning`.
    """
    x = np.asarray(series, dtype=float).reshape(-1)
    n = x.size
    if n < 10:
        raise ValueError("ess needs at least 10 values")
    if np.ptp(x) == 0 or not np.isfinite(x).all():
        warnings.warn("degenerate series; ESS set to 0", DegenerateSeriesWarning, stacklevel=2)
        return 0.0
    rho = _autocorr(x)
    n_pairs = n // 2
    pairs = rho[:2 * n_pairs].reshape(n_pairs, 2).sum(axis=1)
    tau = -1.0
    prev = np.inf
    for gamma in pairs:
        if gamma <= 0:
            break
        gamma = min(gamma, prev)
        tau += 2.0 * gamma
        prev = gamma
    tau = max(tau, 1.0 / n)
    return float(min(n, n / tau))


def ess_per_param(samples):
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateSeriesWarning)
        return np.array([ess(samples[:, j]) for j in range(samples.shape[1])])


def predictive_probabilities(samples, X):
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    return sigmoid(np.asarray(X, dtype=float) @ samples.T).mean(axis=1)


def predictive_accuracy(trace, X_test, y_test):
    """Fraction of test labels matched by the posterior-mean predictive rule.

    Predicted probability >= 0.5 is classified as 1.
    """
    samples = trace.samples if isinstance(trace, ChainTrace) else np.atleast_2d(trace)
    X_test = np.atleast_2d(np.asarray(X_test, dtype=float))
    if X_test.shape[1] != samples.shape[1]:
        raise ValueError("test design width does not match sample dimension")
    pred = (predictive_probabilities(samples, X_test) >= 0.5).astype(int)
    return float(np.mean(pred == np.asarray(y_test).astype(int)))


def interval_coverage(samples, truth, level=0.95):
    """Fraction of true values inside the central posterior intervals."""
    lo, hi = np.quantile(samples, [(1 - level) / 2, (1 + level) / 2], axis=0)
    truth = np.asarray(truth)
    return float(np.mean((truth >= lo) & (truth <= hi)))


def _min_ess_per_sec(trace):
    if trace.n_kept < 10 or trace.wall_time <= 0:
        return float("nan")
    return float(ess_per_param(trace.samples).min() / trace.wall_time)


def cost_report(traces, names=None):
    """Wall-time, per-gradient-time and ESS-per-second comparison of chains.

    ``ratios[a][b]`` is wall_time(a) / wall_time(b); likewise for
    ``grad_time_ratios`` using wall time per gradient evaluation.
    """
    if len(traces) < 2:
        raise ValueError("cost_report needs at least two traces")
    names = names or [t.method or f"chain{i}" for i, t in enumerate(traces)]
    if len(set(names)) != len(names):
        names = [f"{n}#{i}" for i, n in enumerate(names)]
    wall = {n: t.wall_time for n, t in zip(names, traces)}
    per_grad = {n: t.wall_time / t.n_grad_evals if t.n_grad_evals else float("nan")
                for n, t in zip(names, traces)}
    return {
        "wall_time": wall,
        "ratios": {a: {b: wall[a] / wall[b] for b in names} for a in names},
        "grad_time": per_grad,
        "grad_time_ratios": {a: {b: per_grad[a] / per_grad[b] for b in names} for a in names},
        "min_ess_per_second": {n: _min_ess_per_sec(t) for n, t in zip(names, traces)},
        "acceptance_rate": {n: t.acceptance_rate for n, t in zip(names, traces)},
    }


def _fmt(v):
    return repr(float(v))


def write_trace_csv(trace, path, columns=None):
    """One row per iteration; parameter columns filled on kept iterations only."""
    dim = trace.samples.shape[1]
    cols = list(range(dim)) if columns is None else list(columns)
    kept = {int(it): k for k, it in enumerate(trace.kept_iters)}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(META_COLUMNS) + [f"q_{j}" for j in cols])
        for it in range(trace.accepted.size):
            row = [it, int(trace.accepted[it]), _fmt(trace.log_rho[it]),
                   _fmt(trace.h_start[it]), _fmt(trace.h_end[it]),
                   _fmt(trace.log_volume_factor[it])]
            k = kept.get(it)
            row += ([_fmt(trace.samples[k, j]) for j in cols] if k is not None
                    else [""] * len(cols))
            writer.writerow(row)


def read_trace_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    meta = {name: np.array([float(r[i]) for r in rows])
            for i, name in enumerate(META_COLUMNS)}
    qcols = header[len(META_COLUMNS):]
    kept = [r for r in rows if len(r) > len(META_COLUMNS) and r[len(META_COLUMNS)] != ""]
    samples = np.array([[float(v) for v in r[len(META_COLUMNS):]] for r in kept])
    return meta, qcols, samples.reshape(len(kept), len(qcols))


def summarize(trace, extra=None, max_params=None):
    """Summary document: per-parameter mean/sd/ESS plus run-level counters."""
    S = trace.samples
    k = S.shape[1] if max_params is None else min(max_params, S.shape[1])
    params = []
    if trace.n_kept >= 10:
        ess_vals = ess_per_param(S[:, :k])
        for j in range(k):
            params.append({"index": j, "mean": float(S[:, j].mean()),
                           "sd": float(S[:, j].std(ddof=1)), "ess": float(ess_vals[j])})
    doc = {
        "method": trace.method,
        "n_iter": int(trace.accepted.size),
        "n_warmup": int(trace.n_warmup),
        "n_kept": int(trace.n_kept),
        "acceptance_rate": trace.acceptance_rate,
        "wall_time": trace.wall_time,
        "n_grad_evals": int(trace.n_grad_evals),
        "config": trace.final_config,
        "parameters": params,
    }
    if extra:
        doc.update(extra)
    return doc


def write_json(doc, path):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")

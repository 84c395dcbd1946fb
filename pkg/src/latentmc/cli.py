"""Command-line entry point: ``sampler run | synth-data | check``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .experiments import METHODS, ExperimentConfig, build_problem, run_experiment
from .samplers import ChainAbortedError
from .targets import write_dataset_csv

logger = logging.getLogger("latentmc")


def _load_config(args):
    overrides = {"seed": args.seed, "out_dir": getattr(args, "out", None)}
    cfg = ExperimentConfig.from_json(args.config, **overrides)
    if getattr(args, "method", None):
        cfg.methods = [args.method]
    if getattr(args, "no_volume_correction", False):
        cfg.latent = {**cfg.latent, "volume_correction": False}
    return cfg


def cmd_run(args):
    cfg = _load_config(args)
    try:
        report = run_experiment(cfg)
    except ChainAbortedError as exc:
        logger.error("chain aborted after %d iterations: %s", exc.trace.n_completed, exc)
        return 2
    for name, m in report["methods"].items():
        print(f"{name}: acceptance={m['acceptance_rate']:.3f} wall={m['wall_time']:.2f}s "
              + " ".join(f"{k}={v:.4g}" for k, v in m.items()
                         if isinstance(v, float) and k not in ("acceptance_rate", "wall_time")))
    print(f"artifacts written to {cfg.out_dir}")
    return 0


def cmd_synth_data(args):
    cfg = _load_config(args)
    if cfg.experiment != "logistic_synthetic":
        raise ValueError("synth-data applies to the logistic_synthetic experiment")
    _, _, data = build_problem(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    write_dataset_csv(os.path.join(cfg.out_dir, "train.csv"), data["X_train"], data["y_train"])
    write_dataset_csv(os.path.join(cfg.out_dir, "test.csv"), data["X_test"], data["y_test"])
    with open(os.path.join(cfg.out_dir, "truth.json"), "w") as fh:
        json.dump({"beta_true": data["beta_true"].tolist()}, fh, indent=2)
        fh.write("\n")
    print(f"wrote train.csv, test.csv, truth.json to {cfg.out_dir}")
    return 0


def _invariant_checks():
    """Fast numerical invariants; yields (name, passed, detail)."""
    from .autoencoder import identity_autoencoder, pca_fit
    from .diagnostics import ess
    from .samplers import (PhaseState, SamplerConfig, gramian_volume, leapfrog_ambient,
                           reversibility_check)
    from .targets import GaussianTarget, illustration_gaussian

    rng = np.random.default_rng(0)
    target = illustration_gaussian()

    q = rng.standard_normal(3)
    h = 1e-6
    fd = np.array([(target.potential(q + h * e) - target.potential(q - h * e)) / (2 * h)
                   for e in np.eye(3)])
    err = np.linalg.norm(fd - target.gradient(q)) / np.linalg.norm(fd)
    yield "gradient vs finite differences", err < 1e-6, f"rel err {err:.2e}"

    g2 = GaussianTarget(np.zeros(2), np.array([[1.0, 0.3], [0.3, 0.5]]))
    state = PhaseState(np.array([0.7, -0.4]), np.array([0.2, 0.9]))
    dh = []
    eps = np.array([0.02, 0.04, 0.08, 0.16])
    for e in eps:
        out = leapfrog_ambient(g2, state, e, int(round(1.0 / e)))
        dh.append(abs(out.q @ g2.precision @ out.q / 2 + out.p @ out.p / 2
                      - state.q @ g2.precision @ state.q / 2 - state.p @ state.p / 2))
    slope = np.polyfit(np.log(eps), np.log(dh), 1)[0]
    yield "leapfrog energy error order", 1.8 <= slope <= 2.2, f"slope {slope:.3f}"

    samples = rng.multivariate_normal(np.zeros(3), target.covariance, size=500)
    cfg = SamplerConfig(step_size=0.1, n_leapfrog=10)
    st = PhaseState(rng.standard_normal(3), rng.standard_normal(3))
    for label, ae in (("identity", identity_autoencoder(3)), ("pca", pca_fit(samples, 2))):
        d = reversibility_check(ae, target, st, cfg)
        yield f"reversibility ({label} autoencoder)", d < 1e-8, f"defect {d:.2e}"

    J = rng.standard_normal((5, 3))
    ref = np.prod(np.linalg.svd(J, compute_uv=False))
    rel = abs(gramian_volume(J) - ref) / ref
    yield "gramian volume vs SVD", rel < 1e-10, f"rel err {rel:.2e}"

    x = np.zeros(20000)
    noise = rng.standard_normal(x.size)
    for t in range(1, x.size):
        x[t] = 0.5 * x[t - 1] + noise[t]
    ratio = ess(x) / x.size
    yield "ESS of AR(1) 0.5", abs(ratio - 1 / 3) < 0.1 / 3 * 1.5, f"ESS/n {ratio:.3f}"


def cmd_check(args):
    ok = True
    for name, passed, detail in _invariant_checks():
        ok &= bool(passed)
        print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
    return 0 if ok else 1


def build_parser():
    parser = argparse.ArgumentParser(prog="sampler", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment from a JSON config")
    run.add_argument("--config", required=True)
    run.add_argument("--out")
    run.add_argument("--seed", type=int)
    run.add_argument("--method", choices=METHODS)
    run.add_argument("--no-volume-correction", action="store_true")
    run.set_defaults(func=cmd_run)

    synth = sub.add_parser("synth-data", help="write the synthetic logistic dataset")
    synth.add_argument("--config", required=True)
    synth.add_argument("--out")
    synth.add_argument("--seed", type=int)
    synth.set_defaults(func=cmd_synth_data)

    check = sub.add_parser("check", help="run quick numerical invariant checks")
    check.set_defaults(func=cmd_check)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, FloatingPointError, ArithmeticError) as exc:
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())

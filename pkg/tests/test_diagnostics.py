import warnings

import numpy as np
import pytest

from latentmc.diagnostics import (ChainTrace, DegenerateSeriesWarning, META_COLUMNS, cost_report,
                                  ess, ess_per_param, interval_coverage, predictive_accuracy,
                                  predictive_probabilities, read_trace_csv, summarize,
                                  write_json, write_trace_csv)
from latentmc.samplers import SamplerConfig, hmc_kernel, run_chain
from latentmc.targets import illustration_gaussian


def ar1(phi, n, seed):
    rng = np.random.default_rng(seed)
    e = rng.standard_normal(n)
    x = np.empty(n)
    x[0] = e[0] / np.sqrt(1 - phi ** 2)
    for t in range(1, n):
        x[t] = phi * x[t - 1] + e[t]
    return x


class TestEss:
    @pytest.mark.parametrize("phi", [0.3, 0.5, 0.8])
    def test_ar1_closed_form(self, phi):
        # integrated autocorrelation time of AR(1) is (1 + phi) / (1 - phi)
        n = 50000
        assert ess(ar1(phi, n, 1)) / n == pytest.approx((1 - phi) / (1 + phi), rel=0.1)

    def test_iid_near_n(self, rng):
        x = rng.standard_normal(20000)
        assert 0.9 * x.size < ess(x) <= x.size

    def test_antithetic_series_clamped(self):
        x = np.tile([1.0, -1.0], 50) + 1e-3 * np.arange(100)
        assert ess(x) <= 100

    def test_constant_series_warns(self):
        with pytest.warns(DegenerateSeriesWarning):
            assert ess(np.ones(50)) == 0.0

    def test_short_series_rejected(self):
        with pytest.raises(ValueError):
            ess(np.arange(5.0))

    def test_per_param(self, rng):
        X = np.column_stack([rng.standard_normal(1000), np.ones(1000)])
        e = ess_per_param(X)
        assert e[0] > 800 and e[1] == 0.0


class TestPredictive:
    def test_probabilities_average_over_samples(self):
        samples = np.array([[0.0], [np.log(3.0)]])
        X = np.array([[1.0]])
        # mean of sigmoid(0) = 0.5 and sigmoid(log 3) = 0.75
        assert predictive_probabilities(samples, X)[0] == pytest.approx(0.625)

    def test_accuracy_with_tie_rule(self):
        samples = np.zeros((3, 2))
        X = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert predictive_accuracy(samples, X, np.array([1, 0])) == 0.5

    def test_accuracy_dimension_check(self):
        with pytest.raises(ValueError):
            predictive_accuracy(np.zeros((3, 2)), np.zeros((4, 3)), np.zeros(4))

    def test_coverage(self):
        samples = np.tile(np.linspace(-1, 1, 201)[:, None], (1, 3))
        assert interval_coverage(samples, np.array([0.0, 0.98, -5.0])) == pytest.approx(1 / 3)


def small_trace(n_iter=60, n_warmup=20, thin=2, seed=0):
    return run_chain(hmc_kernel(illustration_gaussian(), SamplerConfig(step_size=0.2, n_leapfrog=4)),
                     np.zeros(3), n_iter, n_warmup, thin=thin, rng=np.random.default_rng(seed))


class TestTraceIo:
    def test_csv_round_trip(self, tmp_path):
        trace = small_trace()
        path = tmp_path / "t.csv"
        write_trace_csv(trace, path, [0, 2])
        meta, qcols, samples = read_trace_csv(path)
        assert qcols == ["q_0", "q_2"]
        np.testing.assert_array_equal(samples, trace.samples[:, [0, 2]])
        np.testing.assert_array_equal(meta["accepted"], trace.accepted.astype(float))
        np.testing.assert_array_equal(meta["log_rho"], trace.log_rho)
        header = path.read_text().splitlines()[0].split(",")
        assert tuple(header[:6]) == META_COLUMNS

    def test_one_row_per_iteration(self, tmp_path):
        trace = small_trace()
        path = tmp_path / "t.csv"
        write_trace_csv(trace, path)
        assert len(path.read_text().splitlines()) == 61

    def test_summary_fields(self, tmp_path):
        trace = small_trace(n_iter=120)
        doc = summarize(trace, {"accuracy": 0.5})
        assert doc["n_kept"] == 50 and len(doc["parameters"]) == 3
        assert doc["accuracy"] == 0.5
        write_json(doc, tmp_path / "s.json")
        assert (tmp_path / "s.json").read_text().endswith("\n")

    def test_acceptance_rate_ignores_warmup(self):
        t = ChainTrace.empty(1, 4)
        t.accepted[:] = [False, False, True, True]
        t.n_warmup = 2
        assert t.acceptance_rate == 1.0


def test_cost_report_ratios():
    a, b = small_trace(seed=1), small_trace(seed=2)
    a.wall_time, b.wall_time = 2.0, 1.0
    rep = cost_report([a, b], ["a", "b"])
    assert rep["ratios"]["a"]["b"] == 2.0
    assert rep["grad_time"]["a"] == pytest.approx(2.0 / a.n_grad_evals)
    assert set(rep["acceptance_rate"]) == {"a", "b"}
    with pytest.raises(ValueError):
        cost_report([a])

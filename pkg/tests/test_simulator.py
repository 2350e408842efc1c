"""Tests for the closed-loop clock simulation and the instability estimator."""

import csv

import numpy as np
import pytest

from qclock.noise import NoiseTrace, generate_flicker, make_rng, zero_trace
from qclock.protocols import ClockProtocol, buzek_protocol, ramsey_protocol
from qclock.simulator import (
    ClockRun,
    SimulationError,
    count_fringe_hops,
    estimate_instability,
    probability_curves,
    run_clock,
    run_replicas,
    simulate,
    sql_sigma,
    sql_variance_at_1s,
    trace_seeds,
)
from qclock.symstate import MeasurementBasis, SymmetricState


def stuck_protocol(correction: float = 0.5) -> ClockProtocol:
    """|1,0> measured in the Dicke basis: always outcome 0."""
    return ClockProtocol(
        n=1, psi1=SymmetricState.dicke(1, 0), basis=MeasurementBasis.dicke(1),
        corrections=[correction, 0.0], probe_period=0.1,
    )


def make_run(freq: np.ndarray, T: float = 1.0) -> ClockRun:
    k = len(freq)
    return ClockRun(
        frequency_error=np.asarray(freq, dtype=float), phase=2 * np.pi * T * np.asarray(freq),
        outcome=np.zeros(k, dtype=int), correction=np.zeros(k), probe_period=T,
    )


class TestRunClock:

    def test_servo_accumulates_corrections(self):
        run = run_clock(stuck_protocol(0.5), zero_trace(20), 20, seed=0)
        np.testing.assert_allclose(run.frequency_error, -0.5 * np.arange(20))
        np.testing.assert_array_equal(run.outcome, 0)
        np.testing.assert_allclose(run.phase, 2 * np.pi * 0.1 * run.frequency_error)

    def test_initial_offset(self):
        run = run_clock(stuck_protocol(0.0), zero_trace(5), 5, seed=0, initial_offset=2.0)
        np.testing.assert_allclose(run.frequency_error, -2.0)

    def test_noise_enters_frequency_error(self):
        trace = NoiseTrace(samples=[0.1, 0.2, 0.3], seed=0)
        run = run_clock(stuck_protocol(0.0), trace, 3, seed=0)
        np.testing.assert_allclose(run.frequency_error, [0.1, 0.2, 0.3])

    def test_deterministic(self):
        protocol = ramsey_protocol(2, 0.2)
        trace = generate_flicker(3000, seed=1)
        a = run_clock(protocol, trace, 3000, seed=(1, 1))
        b = run_clock(protocol, trace, 3000, seed=(1, 1))
        np.testing.assert_array_equal(a.outcome, b.outcome)
        np.testing.assert_array_equal(a.frequency_error, b.frequency_error)

    def test_measurement_seed_matters(self):
        protocol = ramsey_protocol(2, 0.2)
        trace = generate_flicker(3000, seed=1)
        a = run_clock(protocol, trace, 3000, seed=2)
        b = run_clock(protocol, trace, 3000, seed=3)
        assert not np.array_equal(a.outcome, b.outcome)

    def test_outcomes_follow_ramsey_fringe(self):
        """Open loop (zero corrections) at a fixed phase samples the fringe probabilities."""
        protocol = ramsey_protocol(1, 0.25).with_corrections([0.0, 0.0])
        f = 0.4  # phi = 2 pi f T = 0.2 pi
        trace = NoiseTrace(samples=np.full(20000, f), seed=0)
        run = run_clock(protocol, trace, 20000, seed=4)
        expected = (1 + np.sin(2 * np.pi * f * 0.25)) / 2
        assert np.mean(run.outcome == 0) == pytest.approx(expected, abs=0.01)

    def test_short_trace(self):
        with pytest.raises(SimulationError, match="3000 requested"):
            run_clock(ramsey_protocol(1, 0.2), zero_trace(100), 3000, seed=0)

    def test_records(self):
        run = run_clock(stuck_protocol(0.5), zero_trace(4), 4, seed=0)
        assert len(run) == 4
        last = run[-1]
        assert last.cycle == 3
        assert last.frequency_error == pytest.approx(-1.5)
        assert [r.outcome for r in run] == [0, 0, 0, 0]

    def test_to_csv(self, tmp_path):
        run = run_clock(stuck_protocol(0.5), zero_trace(4), 4, seed=0)
        path = tmp_path / "cycles.csv"
        run.to_csv(path, header="qclock manifest {}")
        lines = path.read_text().splitlines()
        assert lines[0] == "# qclock manifest {}"
        rows = list(csv.DictReader(lines[1:]))
        assert rows[2]["frequency_error_hz"] == repr(-1.0)
        assert rows[2]["correction_hz"] == repr(0.5)


class TestReplicas:

    def test_matches_single_runs(self):
        protocol = buzek_protocol(3, T=0.15)
        traces = [generate_flicker(2500, seed=(7, r)) for r in range(3)]
        seeds = [(7, r, 1) for r in range(3)]
        batched = run_replicas(protocol, traces, seeds, 2500)
        for trace, seed, run in zip(traces, seeds, batched):
            single = run_clock(protocol, trace, 2500, seed)
            np.testing.assert_array_equal(run.outcome, single.outcome)
            np.testing.assert_allclose(run.frequency_error, single.frequency_error, atol=1e-12)

    def test_seed_count_mismatch(self):
        with pytest.raises(SimulationError):
            run_replicas(ramsey_protocol(1, 0.2), [zero_trace(10)], [1, 2], 10)


class TestInstability:

    def test_constant_offset(self):
        report = estimate_instability(make_run(np.full(2000, 0.3)), block_size=100)
        assert report.variance_at_1s == pytest.approx(0.09 * 100)
        assert report.mean_frequency == pytest.approx(0.3)

    def test_burn_in_is_discarded(self):
        freq = np.zeros(3000)
        freq[:1000] = 50.0
        report = estimate_instability(make_run(freq, T=0.1), block_size=100, burn_in_blocks=10)
        assert report.variance_at_1s == 0.0
        assert report.fringe_hops == 0

    def test_scales_with_block_duration(self):
        freq = np.tile([1.0, -1.0], 1500)
        freq[1000:1100] = 0.2
        report = estimate_instability(make_run(freq, T=0.5), block_size=100, burn_in_blocks=10)
        # one non-zero block mean of 0.2 among 20
        assert report.variance_at_1s == pytest.approx(0.04 / 20 * 100 * 0.5)

    def test_white_noise_variance_is_block_independent(self):
        """Block-mean variance halves when the block doubles, so the 1 s value is unchanged."""
        freq = make_rng(12).standard_normal(200_000)
        run = make_run(freq, T=0.1)
        short = estimate_instability(run, block_size=100)
        long = estimate_instability(run, block_size=200)
        assert long.variance_at_1s == pytest.approx(short.variance_at_1s, rel=0.2)
        assert short.variance_at_1s == pytest.approx(0.1, rel=0.2)

    @pytest.mark.slow
    def test_servo_variance_is_block_independent(self):
        cycles = 400_000
        _, run = simulate(ramsey_protocol(1, 0.1), cycles, seed=2, trace=zero_trace(cycles))
        short = estimate_instability(run, block_size=200)
        long = estimate_instability(run, block_size=400)
        assert long.variance_at_1s == pytest.approx(short.variance_at_1s, rel=0.2)

    def test_too_few_blocks(self):
        with pytest.raises(SimulationError, match="at least 10"):
            estimate_instability(make_run(np.zeros(1999)), block_size=100)

    def test_fringe_hops(self):
        run = make_run(np.array([0.0, 0.4, 0.6, -0.7, 0.5]), T=1.0)
        assert count_fringe_hops(run) == 2

    def test_report_dict(self):
        data = estimate_instability(make_run(np.zeros(2000), T=0.2)).to_dict()
        assert data["T_seconds"] == 0.2
        assert data["cycles_run"] == 2000


class TestServoAndHops:

    def test_negated_corrections_are_worse(self):
        protocol = ramsey_protocol(1, 0.1)
        flipped = protocol.with_corrections(-protocol.corrections)
        good, _ = simulate(protocol, 20000, seed=3)
        bad, _ = simulate(flipped, 20000, seed=3)
        assert bad.variance_at_1s > good.variance_at_1s

    def test_step_of_two_fringes_hops_every_cycle(self):
        """A +2/T Hz step looks locked to the servo while the true error sits two fringes away."""
        T, cycles = 0.1, 2000
        samples = np.zeros(cycles)
        samples[100:] = 2.0 / T
        run = run_clock(ramsey_protocol(1, T), NoiseTrace(samples=samples, seed=0), cycles, seed=8)
        assert count_fringe_hops(run) > 0.9 * (cycles - 100)

    def test_hop_rate_grows_with_probe_period(self):
        cycles = 20000
        trace = generate_flicker(cycles, seed=3)
        hops = [count_fringe_hops(run_clock(ramsey_protocol(1, T), trace, cycles, seed=9))
                for T in (0.02, 0.1, 0.5, 2.0)]
        assert hops == sorted(hops)
        assert hops[-1] > hops[0]


class TestSQL:

    def test_sigma(self):
        assert sql_sigma(1, 1.0, 1.0) == pytest.approx(1 / (2 * np.pi))
        assert sql_sigma(4, 0.25, 1.0) == pytest.approx(1 / (2 * np.pi))

    def test_variance(self):
        assert sql_variance_at_1s(2, 0.5) == pytest.approx(1 / (4 * np.pi ** 2))

    def test_rejects_non_positive(self):
        with pytest.raises(SimulationError):
            sql_sigma(0, 1.0, 1.0)


class TestCurvesAndSimulate:

    def test_probability_curves_sum_to_one(self):
        p = probability_curves(buzek_protocol(4, T=0.1), np.linspace(-3, 3, 50))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-10)

    def test_empty_grid(self):
        with pytest.raises(SimulationError, match="empty"):
            probability_curves(ramsey_protocol(1, 0.2), [])

    def test_trace_seeds(self):
        assert trace_seeds(7) == ((7, 0), (7, 1))
        assert trace_seeds((1, 2)) == ((1, 2, 0), (1, 2, 1))

    def test_simulate_is_deterministic(self):
        protocol = ramsey_protocol(1, 0.2)
        a, _ = simulate(protocol, 3000, seed=11)
        b, _ = simulate(protocol, 3000, seed=11)
        assert a == b
        assert a.variance_at_1s > 0

    def test_simulate_with_given_trace(self):
        report, run = simulate(stuck_protocol(0.0), 2000, seed=0, trace=zero_trace(2000))
        assert report.variance_at_1s == 0.0
        assert len(run) == 2000

    @pytest.mark.slow
    @pytest.mark.parametrize("n", [1, 2, 4])
    def test_projection_noise_limit(self, n):
        """Noiseless oscillator, small phases: variance at 1 s is 1 / (4 pi^2 N T)."""
        T = 0.1
        cycles = 1_000_000
        protocol = ramsey_protocol(n, T, prior_sigma_f=0.2 / (2 * np.pi * T))
        report, _ = simulate(protocol, cycles, seed=n, block_size=500, trace=zero_trace(cycles))
        assert report.fringe_hops == 0
        assert report.phase_variance < 0.05
        assert report.variance_at_1s == pytest.approx(sql_variance_at_1s(n, T), rel=0.15)

"""
Closed-loop clock simulation for qclock.

Propagates the servo through a precomputed noise trace: each cycle the
oscillator's frequency error sets the accumulated phase, a projective
measurement outcome is sampled, and the outcome's correction is applied.
The long-term instability is estimated from block-averaged frequencies.
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from qclock.noise import NoiseTrace, SeedLike, generate_flicker, make_rng
from qclock.protocols import ClockProtocol
from qclock.symstate import phase_scan


logger = logging.getLogger(__name__)

DEFAULT_BLOCK_SIZE = 100
DEFAULT_BURN_IN_BLOCKS = 10
MIN_BLOCKS = 10


class SimulationError(ValueError):
    """Exception raised for invalid simulation requests."""
    pass


@dataclass(frozen=True)
class CycleRecord:
    """One probe cycle of a clock run."""
    cycle: int
    frequency_error: float  # Hz
    phase: float  # rad, 2 pi * frequency_error * T
    outcome: int
    correction: float  # Hz


@dataclass(frozen=True, eq=False)
class ClockRun:
    """
    Per-cycle arrays of a clock run.

    Indexing yields CycleRecord objects; the arrays are kept for
    vectorized estimators.
    """
    frequency_error: np.ndarray
    phase: np.ndarray
    outcome: np.ndarray
    correction: np.ndarray
    probe_period: float

    def __len__(self) -> int:
        return len(self.frequency_error)

    def __getitem__(self, k: int) -> CycleRecord:
        if k < 0:
            k += len(self)
        return CycleRecord(
            cycle=k,
            frequency_error=float(self.frequency_error[k]),
            phase=float(self.phase[k]),
            outcome=int(self.outcome[k]),
            correction=float(self.correction[k]),
        )

    def __iter__(self) -> Iterator[CycleRecord]:
        for k in range(len(self)):
            yield self[k]

    def to_csv(self, path: Union[str, Path], header: Optional[str] = None) -> None:
        """Per-cycle dump: cycle, f_k, phi_k, j, correction."""
        with open(Path(path), "w", newline="") as f:
            if header:
                for line in header.splitlines():
                    f.write(f"# {line}\n")
            writer = csv.writer(f)
            writer.writerow(["cycle", "frequency_error_hz", "phase_rad", "outcome", "correction_hz"])
            for k in range(len(self)):
                writer.writerow([
                    k,
                    repr(float(self.frequency_error[k])),
                    repr(float(self.phase[k])),
                    int(self.outcome[k]),
                    repr(float(self.correction[k])),
                ])


@dataclass(frozen=True)
class InstabilityReport:
    """
    Long-term clock instability of one run.

    variance_at_1s is the mean square of block-averaged frequency errors
    scaled by the block duration, i.e. <f^2> for 1 s averages; averages of
    n seconds have variance variance_at_1s / n.
    """
    variance_at_1s: float  # Hz^2
    block_size: int
    cycles_run: int
    fringe_hops: int
    phase_variance: float  # rad^2
    mean_frequency: float  # Hz
    probe_period: float  # s

    def to_dict(self) -> dict:
        return {
            "variance_at_1s_hz2": self.variance_at_1s,
            "block_size": self.block_size,
            "cycles_run": self.cycles_run,
            "fringe_hops": self.fringe_hops,
            "phase_variance_rad2": self.phase_variance,
            "mean_frequency_hz": self.mean_frequency,
            "T_seconds": self.probe_period,
        }


def _servo_loop(
    protocol: ClockProtocol,
    noise: np.ndarray,
    draws: np.ndarray,
    initial_offset: float = 0.0,
) -> tuple:
    """
    Run R independent replicas of the servo in lock-step.

    Args:
        protocol: Clock protocol
        noise: (R, K) oscillator frequency noise y, Hz
        draws: (R, K) uniform [0, 1) draws for outcome sampling
        initial_offset: Servo accumulator at cycle 0, Hz

    Returns:
        (frequency_error, phase, outcome, correction), each shaped (R, K).
    """
    replicas, cycles = noise.shape
    T = protocol.probe_period
    n = protocol.n
    m = np.arange(n + 1)
    psi = protocol.psi1.amp
    projector = protocol.basis.matrix.conj().T
    corrections = protocol.corrections

    freq = np.empty((replicas, cycles))
    phase = np.empty((replicas, cycles))
    outcome = np.empty((replicas, cycles), dtype=np.int64)
    servo = np.full(replicas, float(initial_offset))

    for k in range(cycles):
        f = noise[:, k] - servo
        phi = 2.0 * np.pi * f * T
        amps = (psi * np.exp(-1j * np.outer(phi, m))) @ projector
        cdf = np.cumsum(np.abs(amps) ** 2, axis=1)
        j = np.minimum(np.sum(cdf <= draws[:, k, None], axis=1), n)
        servo = servo + corrections[j]
        freq[:, k] = f
        phase[:, k] = phi
        outcome[:, k] = j

    return freq, phase, outcome, corrections[outcome]


def run_clock(
    protocol: ClockProtocol,
    trace: NoiseTrace,
    cycles: int,
    seed: SeedLike,
    initial_offset: float = 0.0,
) -> ClockRun:
    """
    Propagate the closed-loop clock through ``cycles`` probe cycles.

    Per cycle k: f_k = y_k - s_k, phi_k = 2 pi f_k T, outcome j_k sampled
    from the projective measurement of evolve_phase(psi1, phi_k), and
    s_{k+1} = s_k + correction_{j_k}. Deterministic given (trace, seed).

    Args:
        protocol: Clock protocol
        trace: Oscillator noise, at least ``cycles`` long
        cycles: Number of probe cycles
        seed: Seed for the measurement-outcome draws
        initial_offset: s_0, Hz

    Raises:
        SimulationError: If the trace is shorter than cycles.
    """
    if len(trace) < cycles:
        raise SimulationError(f"trace has {len(trace)} cycles, {cycles} requested")
    draws = make_rng(seed).random(cycles)
    freq, phase, outcome, correction = _servo_loop(
        protocol, trace.samples[None, :cycles], draws[None, :], initial_offset
    )
    return ClockRun(
        frequency_error=freq[0], phase=phase[0], outcome=outcome[0],
        correction=correction[0], probe_period=protocol.probe_period,
    )


def run_replicas(
    protocol: ClockProtocol,
    traces: Sequence[NoiseTrace],
    seeds: Sequence[SeedLike],
    cycles: int,
) -> list:
    """
    run_clock for several (trace, seed) pairs, vectorized across replicas.

    Returns the same ClockRun list as calling run_clock per pair.
    """
    if len(traces) != len(seeds):
        raise SimulationError(f"{len(traces)} traces but {len(seeds)} seeds")
    for trace in traces:
        if len(trace) < cycles:
            raise SimulationError(f"trace has {len(trace)} cycles, {cycles} requested")
    noise = np.vstack([t.samples[:cycles] for t in traces])
    draws = np.vstack([make_rng(s).random(cycles) for s in seeds])
    freq, phase, outcome, correction = _servo_loop(protocol, noise, draws)
    return [
        ClockRun(
            frequency_error=freq[r], phase=phase[r], outcome=outcome[r],
            correction=correction[r], probe_period=protocol.probe_period,
        )
        for r in range(len(traces))
    ]


def count_fringe_hops(run: ClockRun, T: Optional[float] = None) -> int:
    """Cycles whose true frequency error leaves the +-pi phase window (|f| T > 1/2)."""
    T = run.probe_period if T is None else T
    return int(np.count_nonzero(np.abs(run.frequency_error) * T > 0.5))


def estimate_instability(
    run: ClockRun,
    block_size: int = DEFAULT_BLOCK_SIZE,
    T: Optional[float] = None,
    burn_in_blocks: int = DEFAULT_BURN_IN_BLOCKS,
) -> InstabilityReport:
    """
    Long-term instability from block-averaged frequency errors.

    The first ``burn_in_blocks`` blocks are discarded; the mean square of the
    remaining block means times block_size * T is the variance at 1 s.

    Raises:
        SimulationError: If fewer than 10 blocks remain after burn-in.
    """
    T = run.probe_period if T is None else T
    if block_size < 1:
        raise SimulationError(f"block_size must be >= 1 (got {block_size})")
    blocks = len(run) // block_size - burn_in_blocks
    if blocks < MIN_BLOCKS:
        raise SimulationError(
            f"{len(run)} cycles give {blocks} blocks of {block_size} after "
            f"{burn_in_blocks} burn-in blocks; at least {MIN_BLOCKS} are needed"
        )

    start = burn_in_blocks * block_size
    stop = start + blocks * block_size
    freq = run.frequency_error[start:stop]
    block_means = freq.reshape(blocks, block_size).mean(axis=1)
    window = ClockRun(
        frequency_error=freq, phase=run.phase[start:stop], outcome=run.outcome[start:stop],
        correction=run.correction[start:stop], probe_period=T,
    )
    return InstabilityReport(
        variance_at_1s=float(np.mean(block_means ** 2) * block_size * T),
        block_size=block_size,
        cycles_run=len(run),
        fringe_hops=count_fringe_hops(window, T),
        phase_variance=float(np.mean(window.phase ** 2)),
        mean_frequency=float(np.mean(freq)),
        probe_period=T,
    )


def sql_sigma(n: int, T: float, tau: float) -> float:
    """Projection-noise limit 1 / (2 pi sqrt(N T tau)), Hz."""
    if not (n > 0 and T > 0 and tau > 0):
        raise SimulationError(f"n, T and tau must all be > 0 (got {n}, {T}, {tau})")
    return 1.0 / (2.0 * np.pi * np.sqrt(n * T * tau))


def sql_variance_at_1s(n: int, T: float) -> float:
    """sql_sigma(n, T, 1 s)^2 = 1 / (4 pi^2 N T), Hz^2."""
    return sql_sigma(n, T, 1.0) ** 2


def probability_curves(protocol: ClockProtocol, phi_grid: Sequence[float]) -> np.ndarray:
    """Outcome probabilities p_j(phi) for every phase in the grid, shape (len, N+1)."""
    phi_grid = np.asarray(phi_grid, dtype=float)
    if phi_grid.size == 0:
        raise SimulationError("phase grid is empty")
    return phase_scan(protocol.psi1, protocol.basis, phi_grid)


def trace_seeds(seed: SeedLike) -> tuple:
    """(noise-trace seed, measurement seed) derived from one run seed."""
    base = tuple(seed) if isinstance(seed, (list, tuple)) else (int(seed),)
    return base + (0,), base + (1,)


def simulate(
    protocol: ClockProtocol,
    cycles: int,
    seed: SeedLike,
    block_size: int = DEFAULT_BLOCK_SIZE,
    burn_in_blocks: int = DEFAULT_BURN_IN_BLOCKS,
    oversample: int = 4,
    trace: Optional[NoiseTrace] = None,
) -> tuple:
    """
    Generate a flicker trace, run the clock and estimate its instability.

    Returns:
        (InstabilityReport, ClockRun)
    """
    noise_seed, measurement_seed = trace_seeds(seed)
    if trace is None:
        trace = generate_flicker(cycles, noise_seed, oversample=oversample,
                                 cycle_period=protocol.probe_period)
    run = run_clock(protocol, trace, cycles, measurement_seed)
    report = estimate_instability(run, block_size, protocol.probe_period, burn_in_blocks)
    logger.debug("simulated %s n=%d T=%.4g s: %.4g Hz^2 at 1 s",
                 protocol.label, protocol.n, protocol.probe_period, report.variance_at_1s)
    return report, run

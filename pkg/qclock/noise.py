"""
Oscillator noise for qclock.

Generates per-cycle frequency-error traces with a flicker (1/f) spectrum,
calibrated to a flat 1 Hz Allan deviation, plus white traces and the
overlapping Allan deviation used to validate them.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy.signal import fftconvolve


logger = logging.getLogger(__name__)

SeedLike = Union[int, Sequence[int]]

# Adjacent-cycle difference variance, Hz^2 (Allan variance of 1 Hz^2 at tau = 1 cycle)
FLICKER_DIFF_VARIANCE = 2.0
DEFAULT_OVERSAMPLE = 4
# Filter taps are truncated here (sub-samples); white noise is filtered in blocks of this many cycles
FLICKER_MAX_TAPS = 2 ** 20
FLICKER_BLOCK_CYCLES = 2 ** 18


class NoiseError(ValueError):
    """Exception raised for invalid noise requests."""
    pass


def make_rng(seed: SeedLike) -> np.random.Generator:
    """PCG64 generator for an int or tuple-of-ints seed."""
    if isinstance(seed, (list, tuple)):
        seed = [int(s) for s in seed]
    return np.random.default_rng(seed)


@dataclass(frozen=True, eq=False)
class NoiseTrace:
    """
    Precomputed oscillator frequency errors, one value per probe cycle.

    Attributes:
        samples: Frequency error during each cycle, Hz (read-only)
        seed: Seed the trace was generated from
        kind: "flicker" or "white"
        cycle_period: Probe period the trace is mapped onto, seconds.
            Informational only; the Hz statistics do not depend on it.
    """
    samples: np.ndarray
    seed: SeedLike
    kind: str = "flicker"
    cycle_period: Optional[float] = None

    def __post_init__(self):
        samples = np.array(self.samples, dtype=float)
        if samples.ndim != 1:
            raise NoiseError(f"trace must be one-dimensional (got shape {samples.shape})")
        if not np.all(np.isfinite(samples)):
            raise NoiseError("trace contains non-finite values")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return len(self.samples)

    def adjacent_difference_variance(self) -> float:
        """Mean of (x[k+1] - x[k])^2, Hz^2."""
        return float(np.mean(np.diff(self.samples) ** 2))

    def to_csv(self, path: Union[str, Path], header: Optional[str] = None) -> None:
        """Write one Hz value per line; ``header`` lines are prefixed with '#'."""
        path = Path(path)
        with open(path, "w") as f:
            if header:
                for line in header.splitlines():
                    f.write(f"# {line}\n")
            np.savetxt(f, self.samples, fmt="%.17g")

    def save(self, path: Union[str, Path]) -> None:
        """Write the samples as a .npy array."""
        np.save(Path(path), self.samples)


@dataclass(frozen=True)
class AllanReport:
    """Overlapping Allan deviations of a trace."""
    taus: tuple
    adev: tuple
    adjacent_difference_variance: float
    cycles: int
    seed: SeedLike = field(default=0)

    def to_dict(self) -> dict:
        return {
            "taus_cycles": list(self.taus),
            "adev_hz": list(self.adev),
            "adjacent_difference_variance_hz2": self.adjacent_difference_variance,
            "cycles": self.cycles,
            "seed": list(self.seed) if isinstance(self.seed, (list, tuple)) else self.seed,
        }


def flicker_filter(length: int, alpha: float = 1.0) -> np.ndarray:
    """
    Impulse response of the fractional integrator 1 / (1 - z^-1)^(alpha/2).

    h[0] = 1, h[k] = h[k-1] * (k - 1 + alpha/2) / k
    """
    k = np.arange(1, length)
    h = np.empty(length)
    h[0] = 1.0
    h[1:] = np.cumprod((k - 1 + 0.5 * alpha) / k)
    return h


def generate_flicker(
    cycles: int,
    seed: SeedLike,
    oversample: int = DEFAULT_OVERSAMPLE,
    cycle_period: Optional[float] = None,
    block_cycles: int = FLICKER_BLOCK_CYCLES,
) -> NoiseTrace:
    """
    Generate a flicker-FM frequency trace with a flat 1 Hz Allan deviation.

    White Gaussian noise is filtered by the half-order fractional integrator
    at ``oversample`` sub-samples per cycle, each cycle takes the mean of its
    sub-samples, and the result is scaled so the adjacent-cycle difference
    variance is exactly 2 Hz^2.

    The filter is truncated to FLICKER_MAX_TAPS sub-samples and applied
    block by block, carrying the last taps - 1 inputs between blocks, so
    memory stays bounded for long traces. The result does not depend on
    block_cycles.

    Args:
        cycles: Number of probe cycles (>= 2)
        seed: Seed for the PCG64 generator
        oversample: Sub-samples averaged into each cycle value (>= 1)
        cycle_period: Recorded on the trace, does not change the samples
        block_cycles: Cycles generated per filtering block

    Raises:
        NoiseError: If cycles < 2, oversample < 1 or block_cycles < 1.
    """
    if cycles < 2:
        raise NoiseError(f"flicker trace needs at least 2 cycles (got {cycles})")
    if oversample < 1:
        raise NoiseError(f"oversample must be >= 1 (got {oversample})")
    if block_cycles < 1:
        raise NoiseError(f"block_cycles must be >= 1 (got {block_cycles})")

    rng = make_rng(seed)
    taps = flicker_filter(min(cycles * oversample, FLICKER_MAX_TAPS))
    history = np.zeros(taps.size - 1)
    per_cycle = np.empty(cycles)
    for start in range(0, cycles, block_cycles):
        count = min(block_cycles, cycles - start)
        padded = np.concatenate([history, rng.standard_normal(count * oversample)])
        fine = fftconvolve(padded, taps, mode="valid")
        per_cycle[start:start + count] = fine.reshape(count, oversample).mean(axis=1)
        if history.size:
            history = padded[-history.size:]

    diff_var = np.mean(np.diff(per_cycle) ** 2)
    samples = per_cycle * np.sqrt(FLICKER_DIFF_VARIANCE / diff_var)
    logger.debug("flicker trace: %d cycles, oversample %d, seed %s", cycles, oversample, seed)
    return NoiseTrace(samples=samples, seed=seed, kind="flicker", cycle_period=cycle_period)


def generate_white(cycles: int, sigma: float, seed: SeedLike) -> NoiseTrace:
    """I.i.d. zero-mean Gaussian frequency errors with standard deviation sigma (Hz)."""
    if sigma < 0:
        raise NoiseError(f"sigma must be >= 0 (got {sigma})")
    if cycles < 1:
        raise NoiseError(f"white trace needs at least 1 cycle (got {cycles})")
    samples = make_rng(seed).normal(0.0, sigma, cycles) if sigma > 0 else np.zeros(cycles)
    return NoiseTrace(samples=samples, seed=seed, kind="white")


def zero_trace(cycles: int) -> NoiseTrace:
    """A noiseless oscillator."""
    return NoiseTrace(samples=np.zeros(cycles), seed=0, kind="zero")


def allan_deviation(trace: Union[NoiseTrace, np.ndarray], tau_cycles: int) -> float:
    """
    Overlapping Allan deviation at an averaging time of tau_cycles cycles.

    sigma^2(tau) = sum_i (S_{i+tau} - S_i)^2 / (2 (M - 2 tau + 1) tau^2)
    where S_i is the sum of the tau cycle frequencies starting at cycle i.

    Raises:
        NoiseError: If the trace is shorter than 2 * tau_cycles + 1.
    """
    x = trace.samples if isinstance(trace, NoiseTrace) else np.asarray(trace, dtype=float)
    tau = int(tau_cycles)
    if tau < 1:
        raise NoiseError(f"tau must be >= 1 cycle (got {tau_cycles})")
    m = len(x)
    if m < 2 * tau + 1:
        raise NoiseError(f"trace of {m} cycles too short for tau = {tau} (needs {2 * tau + 1})")

    csum = np.concatenate(([0.0], np.cumsum(x)))
    window = csum[tau:] - csum[:-tau]  # window[i] = sum x[i:i+tau]
    diff = window[tau:] - window[:-tau]
    terms = m - 2 * tau + 1
    avar = np.sum(diff[:terms] ** 2) / (2.0 * terms * tau ** 2)
    return float(np.sqrt(avar))


def allan_report(trace: NoiseTrace, taus: Sequence[int]) -> AllanReport:
    """Tabulate allan_deviation over increasing taus."""
    taus = sorted({int(t) for t in taus})
    return AllanReport(
        taus=tuple(taus),
        adev=tuple(allan_deviation(trace, t) for t in taus),
        adjacent_difference_variance=trace.adjacent_difference_variance(),
        cycles=len(trace),
        seed=trace.seed,
    )

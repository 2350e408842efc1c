"""
Protocol optimization for qclock.

Every objective call in one search evaluates the candidate on the same
noise traces and measurement streams (common random numbers), so the
Monte Carlo objective is a deterministic function the simplex method can
work with. Winners are re-evaluated on a disjoint held-out seed set.
"""

import dataclasses
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from functools import lru_cache, partial
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np
from scipy.optimize import minimize

from qclock.checkpoint import CheckpointLog
from qclock.noise import DEFAULT_OVERSAMPLE, generate_flicker, make_rng
from qclock.protocols import (
    FAMILIES,
    ClockProtocol,
    ParamVector,
    ProtocolError,
    build_family,
    decode_params,
    encode_params,
    init_corrections,
    squeezed_state,
)
from qclock.simulator import (
    DEFAULT_BLOCK_SIZE,
    DEFAULT_BURN_IN_BLOCKS,
    estimate_instability,
    run_replicas,
)


logger = logging.getLogger(__name__)

MIN_CYCLES = 10_000
OPTIMIZATION_SPLIT = 0
HOLDOUT_SPLIT = 1
RESTART_STREAM = 2
REFINE_STREAM = 3

# Screening grids for known families
T_GRID = tuple(float(t) for t in np.geomspace(0.01, 3.0, 12))
KAPPA_GRID_FACTORS = (0.25, 0.4, 0.6, 0.8, 1.0, 1.5)
# Random offsets added to prior-based phase estimates, radians
PHASE_OFFSET_SIGMA = 0.05
# Random-restart draws
RANDOM_T_RANGE = (0.01, 10.0)
# General search qubit range
SEARCH_QUBITS = (2, 8)

# Held-out values must stay within this relative distance of the objective
HOLDOUT_TOLERANCE = 0.15
# Fallback points on the segment from the start (0) to the optimum (1)
BACKTRACK_FRACTIONS = (0.5, 0.25, 0.0)
# Fallback probe periods: T * PERIOD_SHRINK**k, k = 1..PERIOD_SHRINK_STEPS, at fixed phase estimates
PERIOD_SHRINK = 0.8
PERIOD_SHRINK_STEPS = 6


class SearchError(ValueError):
    """Exception raised for invalid search settings."""
    pass


@dataclass(frozen=True)
class SearchConfig:
    """
    Settings shared by every objective evaluation of one search.

    Attributes:
        n: Qubit count
        cycles: Probe cycles per objective evaluation
        replicas: Noise traces (common random numbers) per evaluation
        holdout_replicas: Disjoint traces for re-evaluating winners
        master_seed: Seed every trace, draw and restart derives from
        restarts: Random restarts for the general search
        screen_cycles: Cycles of the cheap screening evaluation
        threshold: Screening threshold, Hz^2 at 1 s (None: threshold_factor
            times the refined Ramsey objective)
        threshold_factor: Multiplier for the default threshold
        xatol: Simplex size tolerance
        fatol: Objective tolerance, Hz^2
        max_iterations: Nelder-Mead iteration cap
        workers: Worker processes (0: all cores)
    """
    n: int
    cycles: int = 100_000
    replicas: int = 4
    holdout_replicas: int = 4
    master_seed: int = 0
    restarts: int = 200
    screen_cycles: int = 10_000
    threshold: Optional[float] = None
    threshold_factor: float = 1.05
    xatol: float = 1e-3
    fatol: float = 1e-5
    max_iterations: int = 2000
    workers: int = 1
    block_size: int = DEFAULT_BLOCK_SIZE
    burn_in_blocks: int = DEFAULT_BURN_IN_BLOCKS
    oversample: int = DEFAULT_OVERSAMPLE

    def __post_init__(self):
        errors = self.validate()
        if errors:
            raise SearchError("; ".join(errors))

    def validate(self) -> list[str]:
        errors = []
        if self.n < 1:
            errors.append(f"n must be >= 1 (got {self.n})")
        if self.cycles < MIN_CYCLES:
            errors.append(f"cycles must be >= {MIN_CYCLES} (got {self.cycles})")
        if self.replicas < 1 or self.holdout_replicas < 1:
            errors.append("replicas and holdout_replicas must be >= 1")
        if self.restarts < 1:
            errors.append(f"restarts must be >= 1 (got {self.restarts})")
        min_cycles = (self.burn_in_blocks + 10) * self.block_size
        if self.screen_cycles < min_cycles or self.screen_cycles > self.cycles:
            errors.append(f"screen_cycles must lie in [{min_cycles}, cycles] (got {self.screen_cycles})")
        if not (self.xatol > 0 and self.fatol > 0):
            errors.append("tolerances must be > 0")
        if self.max_iterations < 0:
            errors.append(f"max_iterations must be >= 0 (got {self.max_iterations})")
        if self.workers < 0:
            errors.append(f"workers must be >= 0 (got {self.workers})")
        return errors

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """Hash of every field that can change a result (worker count excluded)."""
        data = self.to_dict()
        data.pop("workers")
        blob = json.dumps(data, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replica_seeds(self, split: int) -> list:
        """(trace seed, measurement seed) pairs of a seed split."""
        count = self.replicas if split == OPTIMIZATION_SPLIT else self.holdout_replicas
        return [
            ((self.master_seed, split, r, 0), (self.master_seed, split, r, 1))
            for r in range(count)
        ]

    def worker_count(self) -> int:
        return self.workers or os.cpu_count() or 1


@dataclass(frozen=True, eq=False)
class SearchResult:
    """Best protocol found by one optimization."""
    params: ParamVector
    protocol: ClockProtocol
    objective: float  # Hz^2 at 1 s, optimization seeds
    holdout: float  # Hz^2 at 1 s, held-out seeds
    iterations: int
    evaluations: int
    refined: bool = True
    passed_threshold: Optional[bool] = None  # general search only
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_list(),
            "protocol": self.protocol.to_dict(),
            "objective_hz2": self.objective,
            "holdout_hz2": self.holdout,
            "iterations": self.iterations,
            "evaluations": self.evaluations,
            "refined": self.refined,
            "passed_threshold": self.passed_threshold,
            "provenance": self.provenance,
        }


@dataclass(frozen=True, eq=False)
class HoldoutCheck:
    """
    Point accepted after comparing optimization and held-out seeds.

    ``fallback`` names the replacement point when the optimum itself was
    inconsistent (None when the optimum was kept).
    """
    x: np.ndarray
    objective: float
    holdout: float
    consistent: bool
    fallback: Optional[str] = None

    def provenance(self) -> dict:
        return {"holdout_consistent": self.consistent, "holdout_fallback": self.fallback}


@dataclass
class NelderMeadResult:
    """Outcome of nelder_mead; unpacks as (x_best, f_best)."""
    x: np.ndarray
    fun: float
    nit: int
    nfev: int
    history: list = field(default_factory=list)

    def __iter__(self) -> Iterator:
        yield self.x
        yield self.fun


# ============================================================================
# Objective
# ============================================================================

@lru_cache(maxsize=8)
def _replica_traces(master_seed: int, split: int, count: int, cycles: int, oversample: int) -> tuple:
    return tuple(
        generate_flicker(cycles, (master_seed, split, r, 0), oversample=oversample)
        for r in range(count)
    )


def evaluate_protocol(
    protocol: ClockProtocol,
    cfg: SearchConfig,
    split: int = OPTIMIZATION_SPLIT,
    cycles: Optional[int] = None,
) -> float:
    """
    Mean variance_at_1s over the configuration's replica traces.

    ``cycles`` shorter than cfg.cycles runs on the leading part of the same
    traces (the screening evaluation).
    """
    cycles = cfg.cycles if cycles is None else cycles
    seeds = cfg.replica_seeds(split)
    traces = _replica_traces(cfg.master_seed, split, len(seeds), cfg.cycles, cfg.oversample)
    runs = run_replicas(protocol, traces, [s for _, s in seeds], cycles)
    values = [
        estimate_instability(run, cfg.block_size, protocol.probe_period, cfg.burn_in_blocks).variance_at_1s
        for run in runs
    ]
    return float(np.mean(values))


def objective(p: Union[ParamVector, np.ndarray], cfg: SearchConfig) -> float:
    """Monte Carlo instability of a parameter vector on the common random numbers."""
    if not isinstance(p, ParamVector):
        p = ParamVector(n=cfg.n, reals=p)
    return evaluate_protocol(decode_params(p), cfg)


def _safe(f: Callable[[np.ndarray], float]) -> Callable[[np.ndarray], float]:
    """Map decode failures (measure-zero degenerate points) to +inf."""
    def wrapped(x: np.ndarray) -> float:
        try:
            value = f(x)
        except ProtocolError:
            return math.inf
        return value if math.isfinite(value) else math.inf
    return wrapped


def is_consistent(objective_value: float, holdout: float, tolerance: float = HOLDOUT_TOLERANCE) -> bool:
    """Held-out value within ``tolerance`` (relative) of the optimization value."""
    if not (math.isfinite(objective_value) and math.isfinite(holdout)):
        return False
    return abs(holdout - objective_value) <= tolerance * objective_value


def _fallback_points(
    x_start: np.ndarray,
    x_best: np.ndarray,
    shorten: Callable[[np.ndarray, float], np.ndarray],
) -> Iterator[tuple]:
    for fraction in BACKTRACK_FRACTIONS:
        yield f"backtrack {fraction:g}", x_start + fraction * (x_best - x_start)
    for origin, x in (("optimum", x_best), ("start", x_start)):
        for k in range(1, PERIOD_SHRINK_STEPS + 1):
            factor = PERIOD_SHRINK ** k
            yield f"{origin} T x {factor:.4g}", shorten(x, factor)


def holdout_check(
    evaluate: Callable[[np.ndarray, int], float],
    x_start: Sequence[float],
    x_best: Sequence[float],
    f_best: float,
    shorten: Callable[[np.ndarray, float], np.ndarray],
    tolerance: float = HOLDOUT_TOLERANCE,
) -> HoldoutCheck:
    """
    Re-evaluate an optimum on the held-out seeds and replace it if it overfits.

    A few optimization replicas can miss the fringe hops that an aggressive
    servo suffers on other noise traces. When the held-out value leaves the
    tolerance band, points back along the segment to the start and points
    with shorter probe periods are tried; the consistent one with the lowest
    objective wins. If none is consistent, the lowest held-out value wins
    and the check is flagged.

    Args:
        evaluate: (x, split) -> Hz^2 at 1 s; +inf for invalid points
        x_start, x_best: Start and optimum of the optimizer
        f_best: Objective at x_best (optimization split)
        shorten: (x, factor) -> x with T scaled by factor, same phase estimates
        tolerance: Relative holdout tolerance
    """
    x_start = np.asarray(x_start, dtype=float)
    x_best = np.asarray(x_best, dtype=float)
    holdout = evaluate(x_best, HOLDOUT_SPLIT)
    if is_consistent(f_best, holdout, tolerance):
        return HoldoutCheck(x=x_best, objective=f_best, holdout=holdout, consistent=True)

    logger.info("optimum overfits: objective %.5g, held out %.5g Hz^2; trying fallbacks", f_best, holdout)
    scored = [(holdout, f_best, "optimum", x_best)]
    for label, x in _fallback_points(x_start, x_best, shorten):
        value = evaluate(x, OPTIMIZATION_SPLIT)
        if not math.isfinite(value):
            continue
        scored.append((evaluate(x, HOLDOUT_SPLIT), value, label, x))

    consistent = [s for s in scored if is_consistent(s[1], s[0], tolerance)]
    if consistent:
        held, value, label, x = min(consistent, key=lambda s: (s[1], s[0]))
        logger.info("fallback %s: objective %.5g, held out %.5g Hz^2", label, value, held)
        return HoldoutCheck(x=x, objective=value, holdout=held, consistent=True, fallback=label)

    held, value, label, x = min(scored, key=lambda s: (s[0], s[1]))
    logger.warning("no point within %.0f%% of its held-out value; keeping %s (%.5g vs %.5g Hz^2)",
                   100 * tolerance, label, value, held)
    return HoldoutCheck(x=x, objective=value, holdout=held, consistent=False,
                        fallback=None if label == "optimum" else label)


# ============================================================================
# Nelder-Mead
# ============================================================================

def default_steps(x0: np.ndarray) -> np.ndarray:
    """Initial simplex edge per coordinate: 10% of the value, at least 0.05."""
    return np.maximum(0.1 * np.abs(x0), 0.05)


def nelder_mead(
    f: Callable[[np.ndarray], float],
    x0: Sequence[float],
    cfg: Optional[SearchConfig] = None,
    xatol: Optional[float] = None,
    fatol: Optional[float] = None,
    max_iterations: Optional[int] = None,
    steps: Optional[Sequence[float]] = None,
) -> NelderMeadResult:
    """
    Minimize f with the Nelder-Mead simplex method.

    Reflection 1, expansion 2, contraction 0.5, shrink 0.5. Stops when the
    simplex is smaller than xatol and its values spread less than fatol, or
    at the iteration cap. The returned value never exceeds f(x0).

    Args:
        f: Objective
        x0: Starting point
        cfg: Source of default tolerances and iteration cap
        xatol, fatol, max_iterations: Override cfg values
        steps: Initial simplex edge per coordinate (None: scipy's 5% rule)
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim != 1 or x0.size < 1:
        raise SearchError("nelder_mead needs a one-dimensional start vector")
    xatol = xatol if xatol is not None else (cfg.xatol if cfg else 1e-4)
    fatol = fatol if fatol is not None else (cfg.fatol if cfg else 1e-4)
    max_iterations = max_iterations if max_iterations is not None else (
        cfg.max_iterations if cfg else 200 * x0.size)

    best = {"x": x0.copy(), "f": math.inf, "nfev": 0}

    def tracked(x: np.ndarray) -> float:
        value = float(f(x))
        best["nfev"] += 1
        if value < best["f"]:
            best["x"], best["f"] = np.array(x, dtype=float), value
        return value

    f0 = tracked(x0)
    if max_iterations == 0:
        return NelderMeadResult(x=x0.copy(), fun=f0, nit=0, nfev=1, history=[f0])

    history = [f0]
    options = {"xatol": xatol, "fatol": fatol, "maxiter": max_iterations, "adaptive": False}
    if steps is not None:
        simplex = np.vstack([x0] + [x0 + np.eye(x0.size)[i] * steps[i] for i in range(x0.size)])
        options["initial_simplex"] = simplex

    result = minimize(
        tracked, x0, method="Nelder-Mead", options=options,
        callback=lambda xk: history.append(best["f"]),
    )
    logger.debug("nelder-mead: %d iterations, %d evaluations, f=%.6g", result.nit, best["nfev"], best["f"])
    return NelderMeadResult(
        x=best["x"], fun=best["f"], nit=int(result.nit), nfev=best["nfev"], history=history,
    )


# ============================================================================
# Refinement of frozen state/basis protocols
# ============================================================================

@dataclass(frozen=True, eq=False)
class CorrectionLayout:
    """
    Which corrections the optimizer varies.

    ``free`` outcome indices carry one phase estimate each; with
    ``mirror`` the reflected outcome N - j gets the negated value and all
    other outcomes are pinned to 0.
    """
    n: int
    free: tuple
    mirror: bool

    @classmethod
    def for_family(cls, family: str, n: int) -> "CorrectionLayout":
        if family in ("ramsey", "squeezed"):
            return cls(n=n, free=tuple(range((n + 1) // 2)), mirror=True)
        if family == "ghz":
            return cls(n=n, free=(0,), mirror=True)
        return cls(n=n, free=tuple(range(n + 1)), mirror=False)

    def expand(self, phases: np.ndarray) -> np.ndarray:
        full = np.zeros(self.n + 1)
        for j, value in zip(self.free, phases):
            full[j] = value
            if self.mirror:
                full[self.n - j] = -value
        return full

    def project(self, full: np.ndarray) -> np.ndarray:
        """Free components of a full vector, antisymmetrized when mirrored."""
        if self.mirror:
            return np.array([0.5 * (full[j] - full[self.n - j]) for j in self.free])
        return np.array([full[j] for j in self.free])


@dataclass(frozen=True, eq=False)
class FrozenRefinement:
    """
    Optimization variables for a protocol with fixed state and basis:
    x = [T, (kappa,) phase estimates of the free outcomes].
    """
    base: ClockProtocol
    layout: CorrectionLayout
    free_kappa: bool = False

    @property
    def offset(self) -> int:
        return 2 if self.free_kappa else 1

    def build(self, x: np.ndarray) -> ClockProtocol:
        T = abs(float(x[0]))
        if T == 0.0:
            raise ProtocolError("degenerate protocol: probe period 0")
        protocol = self.base
        if self.free_kappa:
            kappa = abs(float(x[1]))
            if kappa == 0.0:
                raise ProtocolError("kappa must be > 0")
            protocol = dataclasses.replace(protocol, psi1=squeezed_state(protocol.n, kappa), kappa=kappa)
        corrections = self.layout.expand(np.asarray(x[self.offset:])) / (2.0 * np.pi * T)
        return dataclasses.replace(protocol, corrections=corrections, probe_period=T)

    def start(self, protocol: ClockProtocol) -> np.ndarray:
        head = [protocol.probe_period] + ([protocol.kappa] if self.free_kappa else [])
        phases = self.layout.project(protocol.phase_estimates())
        return np.concatenate([head, phases])

    def shorten(self, x: np.ndarray, factor: float) -> np.ndarray:
        shorter = np.array(x, dtype=float)
        shorter[0] *= factor
        return shorter


def _screen_start(
    candidates: Sequence[ClockProtocol],
    cfg: SearchConfig,
) -> tuple:
    """Cheap evaluation of candidate starting protocols; returns (best, value)."""
    scored = []
    for protocol in candidates:
        try:
            value = evaluate_protocol(protocol, cfg, cycles=cfg.screen_cycles)
        except ProtocolError:
            continue
        logger.debug("screen %s T=%.4g kappa=%s: %.4g", protocol.label, protocol.probe_period,
                     protocol.kappa, value)
        scored.append((value, protocol.probe_period, protocol.kappa or 0.0, protocol))
    if not scored:
        raise SearchError("no valid starting protocol")
    scored.sort(key=lambda item: item[:3])
    return scored[0][3], scored[0][0]


def _refine(
    refinement: FrozenRefinement,
    start: ClockProtocol,
    cfg: SearchConfig,
    rng: np.random.Generator,
    provenance: dict,
) -> SearchResult:
    x0 = refinement.start(start)
    x0[refinement.offset:] += rng.normal(0.0, PHASE_OFFSET_SIGMA, x0.size - refinement.offset)

    def evaluate(x: np.ndarray, split: int) -> float:
        return _safe(lambda v: evaluate_protocol(refinement.build(v), cfg, split=split))(x)

    outcome = nelder_mead(lambda x: evaluate(x, OPTIMIZATION_SPLIT), x0, cfg, steps=default_steps(x0))
    check = holdout_check(evaluate, x0, outcome.x, outcome.fun, refinement.shorten)
    protocol = refinement.build(check.x)
    return SearchResult(
        params=encode_params(protocol),
        protocol=protocol,
        objective=check.objective,
        holdout=check.holdout,
        iterations=outcome.nit,
        evaluations=outcome.nfev,
        refined=True,
        provenance={"master_seed": cfg.master_seed, "config_hash": cfg.config_hash(),
                    **provenance, **check.provenance()},
    )


def refine_protocol(
    protocol: ClockProtocol,
    cfg: SearchConfig,
    scan_T: bool = True,
) -> SearchResult:
    """
    Optimize the corrections and T of a protocol whose state and basis stay fixed.

    Corrections start from the Gaussian-prior posterior means plus small
    random offsets; with scan_T the starting T is the best of a coarse grid.
    """
    if protocol.n != cfg.n:
        raise SearchError(f"protocol has n={protocol.n}, config has n={cfg.n}")
    layout = CorrectionLayout(n=protocol.n, free=tuple(range(protocol.n + 1)), mirror=False)
    refinement = FrozenRefinement(base=protocol, layout=layout)

    periods = T_GRID if scan_T else (protocol.probe_period,)
    candidates = []
    for T in periods:
        p = protocol.with_probe_period(T)
        candidates.append(p.with_corrections(init_corrections(p)))
    start, _ = _screen_start(candidates, cfg)
    rng = make_rng((cfg.master_seed, REFINE_STREAM, protocol.n))
    return _refine(refinement, start, cfg, rng, {"family": protocol.label})


def refine_known(family: str, n: int, cfg: SearchConfig, **family_options) -> SearchResult:
    """
    Optimize a known protocol family: corrections, T and (for squeezed) kappa.

    The family's state and basis stay fixed; the corrections keep the
    family's reflection symmetry. GHZ uses the quadrature readout so the
    servo has sign information.

    Args:
        family: "ramsey", "ghz", "squeezed" or "buzek"
        n: Qubit count (must equal cfg.n)
        cfg: Search configuration
        family_options: Passed to build_family (e.g. half_shift, kappa)
    """
    if family not in FAMILIES:
        raise SearchError(f"unknown family {family!r} (choose from {', '.join(FAMILIES)})")
    if n != cfg.n:
        raise SearchError(f"n={n} does not match config n={cfg.n}")
    if family == "ghz":
        family_options.setdefault("readout_phase", np.pi / 2.0)

    kappas = [None]
    if family == "squeezed":
        fixed = family_options.pop("kappa", None)
        kappas = [fixed] if fixed is not None else [f * np.sqrt(n) for f in KAPPA_GRID_FACTORS]

    candidates = []
    for kappa in kappas:
        for T in T_GRID:
            candidates.append(build_family(family, n, T, kappa=kappa, **family_options))
    start, screened = _screen_start(candidates, cfg)
    logger.info("refine %s n=%d: start T=%.4g s%s, screen %.4g Hz^2", family, n, start.probe_period,
                f" kappa={start.kappa:.3g}" if start.kappa else "", screened)

    refinement = FrozenRefinement(
        base=start,
        layout=CorrectionLayout.for_family(family, n),
        free_kappa=family == "squeezed",
    )
    rng = make_rng((cfg.master_seed, REFINE_STREAM, n, FAMILIES.index(family)))
    result = _refine(refinement, start, cfg, rng, {"family": family})
    logger.info("refine %s n=%d: %.5g Hz^2 (held out %.5g) at T=%.4g s", family, n,
                result.objective, result.holdout, result.protocol.probe_period)
    return result


# ============================================================================
# General search
# ============================================================================

def random_vector(n: int, rng: np.random.Generator) -> np.ndarray:
    """
    Random protocol vector: Gaussian state entries, uniform Givens angles
    in [0, pi/2] and phases in [0, 2 pi), log-uniform T, corrections 0.
    """
    state = rng.standard_normal(2 * n + 1)
    pairs = (n * n + n) // 2
    angles = np.empty(2 * pairs)
    angles[0::2] = rng.uniform(0.0, np.pi / 2.0, pairs)
    angles[1::2] = rng.uniform(0.0, 2.0 * np.pi, pairs)
    low, high = np.log(RANDOM_T_RANGE[0]), np.log(RANDOM_T_RANGE[1])
    T = np.exp(rng.uniform(low, high))
    return np.concatenate([state, angles, np.zeros(n + 1), [T]])


def _seed_corrections(reals: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Fill the correction block with prior-based values plus random offsets."""
    protocol = decode_params(ParamVector(n=n, reals=reals))
    T = protocol.probe_period
    phases = 2.0 * np.pi * T * init_corrections(protocol) + rng.normal(0.0, PHASE_OFFSET_SIGMA, n + 1)
    reals = reals.copy()
    start = 2 * n + 1 + n * n + n
    reals[start:start + n + 1] = phases / (2.0 * np.pi * T)
    return reals


def shorten_vector(n: int, x: np.ndarray, factor: float) -> np.ndarray:
    """Scale T of a full parameter vector, scaling the Hz corrections so phase estimates stay put."""
    shorter = np.array(x, dtype=float)
    corr_start = 2 * n + 1 + n * n + n
    shorter[corr_start:-1] /= factor
    shorter[-1] *= factor
    return shorter


def _vector_evaluator(cfg: SearchConfig) -> Callable[[np.ndarray, int], float]:
    """(x, split) -> instability of a full parameter vector; +inf when it does not decode."""
    def evaluate(x: np.ndarray, split: int) -> float:
        return _safe(lambda v: evaluate_protocol(
            decode_params(ParamVector(n=cfg.n, reals=v)), cfg, split=split))(x)
    return evaluate


def _run_restart(cfg: SearchConfig, index: int, threshold: float) -> dict:
    """Screen one random protocol and refine it if it beats the threshold."""
    rng = make_rng((cfg.master_seed, RESTART_STREAM, index))
    reals = _seed_corrections(random_vector(cfg.n, rng), cfg.n, rng)
    screen = _safe(lambda x: evaluate_protocol(
        decode_params(ParamVector(n=cfg.n, reals=x)), cfg, cycles=cfg.screen_cycles))(reals)

    record = {
        "index": index,
        "vector": [float(x) for x in reals],
        "screen_value": screen,
        "refined": False,
        "passed": False,
        "refined_vector": None,
        "refined_value": None,
        "iterations": 0,
        "evaluations": 1,
    }
    if screen < threshold:
        f = _safe(lambda x: objective(x, cfg))
        outcome = nelder_mead(f, reals, cfg, steps=default_steps(reals))
        record.update(
            refined=True,
            passed=outcome.fun < threshold,
            refined_vector=[float(x) for x in outcome.x],
            refined_value=outcome.fun,
            iterations=outcome.nit,
            evaluations=1 + outcome.nfev,
        )
    return record


def _winner(records: Sequence[dict], threshold: float) -> dict:
    """
    Deterministic reduction. Refined records whose full objective beats the
    threshold come first, then other refined records, then screened ones;
    ties break on the lexicographic vector.
    """
    refined = [r for r in records if r["refined"] and r["refined_value"] is not None]
    passed = [r for r in refined if r["refined_value"] < threshold]
    for group in (passed, refined):
        if group:
            return min(group, key=lambda r: (r["refined_value"], r["refined_vector"]))
    return min(records, key=lambda r: (r["screen_value"], r["vector"]))


def random_restart_search(
    n: int,
    cfg: SearchConfig,
    checkpoint: Optional[Union[str, Path]] = None,
) -> SearchResult:
    """
    General search over all N^2 + 4N + 3 parameters.

    Random protocols are screened on screen_cycles; those below the
    threshold are refined with Nelder-Mead on the full objective. Restarts
    run across cfg.workers processes; each finished restart is appended to
    the checkpoint so an interrupted search resumes where it stopped.

    Returns:
        The best refined candidate re-evaluated on held-out seeds, or the
        best screened candidate flagged refined=False if none qualified.
        passed_threshold is False when the reported objective does not
        beat the threshold.

    Raises:
        SearchError: If n is outside [2, 8] or differs from cfg.n.
    """
    low, high = SEARCH_QUBITS
    if not low <= n <= high:
        raise SearchError(f"general search needs {low} <= n <= {high} (got {n})")
    if n != cfg.n:
        raise SearchError(f"n={n} does not match config n={cfg.n}")

    threshold = cfg.threshold
    if threshold is None:
        threshold = cfg.threshold_factor * refine_known("ramsey", n, cfg).objective
    logger.info("search n=%d: %d restarts, threshold %.5g Hz^2", n, cfg.restarts, threshold)

    log = CheckpointLog(Path(checkpoint)) if checkpoint else None
    records = {}
    if log is not None:
        for record in log.resume(cfg.config_hash(), {"n": n, "threshold": threshold}):
            records[record["index"]] = record
        if records:
            logger.info("resumed %d restarts from %s", len(records), log.path)

    pending = [i for i in range(cfg.restarts) if i not in records]

    def finished(record: dict) -> None:
        records[record["index"]] = record
        if log is not None:
            log.append(record)
        logger.info("restart %d: screen %.4g%s", record["index"], record["screen_value"],
                    f", refined {record['refined_value']:.5g}" if record["refined"] else "")

    workers = cfg.worker_count()
    if workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_restart, cfg, i, threshold) for i in pending]
            for future in as_completed(futures):
                finished(future.result())
    else:
        for i in pending:
            finished(_run_restart(cfg, i, threshold))

    best = _winner([records[i] for i in sorted(records)], threshold)
    provenance = {
        "master_seed": cfg.master_seed,
        "config_hash": cfg.config_hash(),
        "restart": best["index"],
        "threshold_hz2": threshold,
    }
    if best["refined"]:
        check = holdout_check(_vector_evaluator(cfg), best["vector"], best["refined_vector"],
                              best["refined_value"], partial(shorten_vector, n))
        vector, value, holdout = check.x, check.objective, check.holdout
        provenance.update(check.provenance())
    else:
        vector, value, holdout = best["vector"], best["screen_value"], None

    params = ParamVector(n=n, reals=vector)
    protocol = decode_params(params)
    if holdout is None:
        holdout = evaluate_protocol(protocol, cfg, split=HOLDOUT_SPLIT)
    passed = bool(best["refined"] and value < threshold)
    if best["refined"] and not passed:
        logger.warning("best refined restart %d does not beat the threshold (%.5g >= %.5g Hz^2)",
                       best["index"], value, threshold)
    return SearchResult(
        params=params,
        protocol=protocol,
        objective=value,
        holdout=holdout,
        iterations=sum(r["iterations"] for r in records.values()),
        evaluations=sum(r["evaluations"] for r in records.values()),
        refined=best["refined"],
        passed_threshold=passed,
        provenance=provenance,
    )


def warm_start_search(protocol: ClockProtocol, cfg: SearchConfig) -> SearchResult:
    """Polish every parameter of an analytic protocol, starting from its encoding."""
    if protocol.n != cfg.n:
        raise SearchError(f"protocol has n={protocol.n}, config has n={cfg.n}")
    x0 = encode_params(protocol).reals.copy()
    evaluate = _vector_evaluator(cfg)
    outcome = nelder_mead(lambda x: evaluate(x, OPTIMIZATION_SPLIT), x0, cfg, steps=default_steps(x0))

    provenance = {"master_seed": cfg.master_seed, "config_hash": cfg.config_hash(),
                  "warm_start": protocol.label}
    if outcome.nit == 0:
        params, best = encode_params(protocol), protocol
        value = evaluate_protocol(protocol, cfg)
        holdout = evaluate_protocol(protocol, cfg, split=HOLDOUT_SPLIT)
    else:
        check = holdout_check(evaluate, x0, outcome.x, outcome.fun, partial(shorten_vector, cfg.n))
        params = ParamVector(n=cfg.n, reals=check.x)
        best = decode_params(params)
        value, holdout = check.objective, check.holdout
        provenance.update(check.provenance())
    return SearchResult(
        params=params,
        protocol=best,
        objective=value,
        holdout=holdout,
        iterations=outcome.nit,
        evaluations=outcome.nfev,
        refined=outcome.nit > 0,
        provenance=provenance,
    )


def search_config_from(n: int, settings, **overrides) -> SearchConfig:
    """SearchConfig from the [search]/[simulation]/[noise] config sections plus overrides."""
    values = {
        "n": n,
        "cycles": settings.simulation.cycles,
        "block_size": settings.simulation.block_size,
        "burn_in_blocks": settings.simulation.burn_in_blocks,
        "oversample": settings.noise.oversample,
        "replicas": settings.search.replicas,
        "holdout_replicas": settings.search.holdout_replicas,
        "restarts": settings.search.restarts,
        "screen_cycles": settings.search.screen_cycles,
        "threshold_factor": settings.search.threshold_factor,
        "xatol": settings.search.xatol,
        "fatol": settings.search.fatol,
        "max_iterations": settings.search.max_iterations,
        "workers": settings.search.workers,
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    return SearchConfig(**values)


def search_config_from_manifest(manifest: Optional[dict]) -> SearchConfig:
    """
    Rebuild the SearchConfig recorded by a search run.

    Raises:
        SearchError: If the manifest is missing or was not written by a search.
    """
    if not manifest or manifest.get("subcommand") != "search":
        raise SearchError("protocol file carries no search manifest")
    fields = {f.name for f in dataclasses.fields(SearchConfig)}
    values = {k: v for k, v in manifest.get("config", {}).items() if k in fields}
    return SearchConfig(**values)

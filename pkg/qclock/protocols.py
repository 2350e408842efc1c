"""
Clock protocols for qclock.

A protocol is an initial symmetric state, a measurement basis, one frequency
correction per outcome and a probe period T. This module builds the known
protocol families (Ramsey, GHZ, spin-squeezed, sine-state/Fourier-basis),
computes prior-based corrections, converts protocols to and from the flat
real vector the optimizer works on, and reads/writes the JSON format.
"""

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.special import gammaln

from qclock.symstate import (
    MeasurementBasis,
    StateError,
    SymmetricState,
    collective_rotation,
    evolve_phase,
    normalize,
    phase_scan,
)


# Prior phase spread used when no frequency prior is given, radians
DEFAULT_PRIOR_SIGMA_PHASE = 1.0
PRIOR_GRID_POINTS = 4001
PRIOR_GRID_WIDTH = 5.0  # in prior standard deviations
UNREACHABLE_MASS = 1e-12

FAMILIES = ("ramsey", "ghz", "squeezed", "buzek")


class ProtocolError(ValueError):
    """Exception raised for invalid protocols or protocol files."""
    pass


@dataclass(frozen=True, eq=False)
class ClockProtocol:
    """
    One clock protocol instance.

    Attributes:
        n: Qubit count
        psi1: Initial state
        basis: Measurement basis
        corrections: Frequency correction per outcome, Hz
        probe_period: Free-evolution period T, seconds
        label: Family name or "custom"
        kappa: Squeezing parameter for squeezed protocols
    """
    n: int
    psi1: SymmetricState
    basis: MeasurementBasis
    corrections: np.ndarray
    probe_period: float
    label: str = "custom"
    kappa: Optional[float] = None

    def __post_init__(self):
        if self.psi1.n != self.n or self.basis.n != self.n:
            raise ProtocolError(
                f"psi1 (n={self.psi1.n}) and basis (n={self.basis.n}) must match n={self.n}"
            )
        if not self.psi1.is_normalized():
            raise ProtocolError(f"psi1 must be normalized (norm {self.psi1.norm:.15f})")
        corrections = np.array(self.corrections, dtype=float)
        if corrections.shape != (self.n + 1,):
            raise ProtocolError(
                f"length(corrections) must equal n+1 = {self.n + 1} (got shape {corrections.shape})"
            )
        if not np.all(np.isfinite(corrections)):
            raise ProtocolError("corrections must be finite")
        if not (self.probe_period > 0 and math.isfinite(self.probe_period)):
            raise ProtocolError(f"probe_period must be > 0 (got {self.probe_period})")
        corrections.setflags(write=False)
        object.__setattr__(self, "corrections", corrections)
        object.__setattr__(self, "probe_period", float(self.probe_period))

    def with_corrections(self, corrections) -> "ClockProtocol":
        return dataclasses.replace(self, corrections=np.asarray(corrections, dtype=float))

    def with_probe_period(self, probe_period: float) -> "ClockProtocol":
        return dataclasses.replace(self, probe_period=probe_period)

    def phase_estimates(self) -> np.ndarray:
        """phi_Est per outcome, radians: correction * 2 pi T."""
        return 2.0 * np.pi * self.probe_period * self.corrections

    def to_dict(self) -> dict:
        data = {
            "n": self.n,
            "T_seconds": self.probe_period,
            "psi1": [[float(a.real), float(a.imag)] for a in self.psi1.amp],
            "basis": [
                [[float(a.real), float(a.imag)] for a in row] for row in self.basis.matrix
            ],
            "corrections_hz": [float(c) for c in self.corrections],
            "label": self.label,
        }
        if self.kappa is not None:
            data["kappa"] = self.kappa
        return data

    @classmethod
    def from_dict(cls, data: dict, orthonormalize: bool = False) -> "ClockProtocol":
        """
        Build a protocol from the JSON schema.

        Args:
            data: Parsed JSON object
            orthonormalize: Snap the basis to the nearest unitary and
                renormalize psi1 (for hand-typed, rounded numbers)

        Raises:
            ProtocolError: If a field is missing or an invariant is violated.
        """
        try:
            n = int(data["n"])
            probe_period = float(data["T_seconds"])
            psi1 = _complex_array(data["psi1"])
            rows = _complex_array(data["basis"])
            corrections = np.asarray(data["corrections_hz"], dtype=float)
        except KeyError as e:
            raise ProtocolError(f"protocol is missing field {e}") from e
        except (TypeError, ValueError) as e:
            raise ProtocolError(f"malformed protocol field: {e}") from e

        try:
            state = SymmetricState(n=n, amp=psi1)
            if orthonormalize:
                state = normalize(state)
            basis = MeasurementBasis.from_matrix(rows, orthonormalize=orthonormalize)
        except StateError as e:
            raise ProtocolError(str(e)) from e
        return cls(
            n=n,
            psi1=state,
            basis=basis,
            corrections=corrections,
            probe_period=probe_period,
            label=data.get("label", "custom"),
            kappa=data.get("kappa"),
        )


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat real parameterization of an N-qubit protocol (N^2 + 4N + 3 reals)."""
    n: int
    reals: np.ndarray = field(repr=False)

    def __post_init__(self):
        reals = np.array(self.reals, dtype=float)
        expected = param_count(self.n)
        if reals.shape != (expected,):
            raise ProtocolError(
                f"parameter vector for n={self.n} needs {expected} reals (got shape {reals.shape})"
            )
        reals.setflags(write=False)
        object.__setattr__(self, "reals", reals)

    def to_list(self) -> list:
        return [float(x) for x in self.reals]


def param_count(n: int) -> int:
    """2N+1 state + N^2+N basis + N+1 corrections + 1 probe period."""
    return n * n + 4 * n + 3


def _complex_array(pairs) -> np.ndarray:
    arr = np.asarray(pairs, dtype=float)
    if arr.shape[-1] != 2:
        raise ValueError("complex numbers must be [re, im] pairs")
    return arr[..., 0] + 1j * arr[..., 1]


def _log_binomial(n: int, k: np.ndarray) -> np.ndarray:
    return gammaln(n + 1.0) - gammaln(k + 1.0) - gammaln(n - k + 1.0)


# ============================================================================
# Protocol families
# ============================================================================

def ramsey_state(n: int) -> SymmetricState:
    """Symmetric image of ((1, -i)/sqrt 2)^{(x)N}: sqrt(C(N,k)) (-i)^k / 2^{N/2}."""
    k = np.arange(n + 1)
    magnitude = np.exp(0.5 * _log_binomial(n, k) - 0.5 * n * np.log(2.0))
    return SymmetricState(n=n, amp=magnitude * (-1j) ** k)


def ramsey_basis(n: int) -> MeasurementBasis:
    """Collective pi/2 y-rotation followed by excitation counting."""
    return MeasurementBasis.from_matrix(collective_rotation(n, np.pi / 2.0))


def _with_prior_corrections(protocol: ClockProtocol, prior_sigma_f: Optional[float]) -> ClockProtocol:
    return protocol.with_corrections(init_corrections(protocol, prior_sigma_f))


def ramsey_protocol(n: int, T: float, prior_sigma_f: Optional[float] = None) -> ClockProtocol:
    """Unentangled Ramsey clock of n qubits with probe period T."""
    if n < 1:
        raise ProtocolError(f"ramsey protocol needs n >= 1 (got {n})")
    protocol = ClockProtocol(
        n=n, psi1=ramsey_state(n), basis=ramsey_basis(n),
        corrections=np.zeros(n + 1), probe_period=T, label="ramsey",
    )
    return _with_prior_corrections(protocol, prior_sigma_f)


def ghz_basis(n: int, readout_phase: float = 0.0) -> MeasurementBasis:
    """
    (|N,0> + e^{-i chi}|N,N>)/sqrt 2 as outcome 0, the minus partner as
    outcome N, and the unreachable Dicke states |N,1..N-1> in between.
    """
    rows = np.eye(n + 1, dtype=complex)
    phase = np.exp(-1j * readout_phase)
    rows[0] = 0.0
    rows[n] = 0.0
    rows[0, 0], rows[0, n] = 1.0, phase
    rows[n, 0], rows[n, n] = 1.0, -phase
    rows[0] /= np.sqrt(2.0)
    rows[n] /= np.sqrt(2.0)
    return MeasurementBasis.from_matrix(rows)


def ghz_protocol(
    n: int,
    T: float,
    readout_phase: float = 0.0,
    prior_sigma_f: Optional[float] = None,
) -> ClockProtocol:
    """
    GHZ clock: psi1 = (|N,0> + |N,N>)/sqrt 2.

    With readout_phase chi the two reachable outcomes occur with
    probabilities (1 +- cos(N phi - chi))/2; chi = pi/2 gives the
    sign-sensitive quadrature readout.
    """
    if n < 2:
        raise ProtocolError(f"GHZ protocol needs n >= 2 (got {n})")
    amp = np.zeros(n + 1, dtype=complex)
    amp[0] = amp[n] = 1.0 / np.sqrt(2.0)
    protocol = ClockProtocol(
        n=n, psi1=SymmetricState(n=n, amp=amp), basis=ghz_basis(n, readout_phase),
        corrections=np.zeros(n + 1), probe_period=T, label="ghz",
    )
    return _with_prior_corrections(protocol, prior_sigma_f)


def squeezed_state(n: int, kappa: float) -> SymmetricState:
    """
    Spin-squeezed state with amplitude (-1)^k exp(-(m/kappa)^2) at
    excitation k = m + N/2, normalized.
    """
    if not kappa > 0:
        raise ProtocolError(f"kappa must be > 0 (got {kappa})")
    k = np.arange(n + 1)
    m = k - 0.5 * n
    log_env = -((m / kappa) ** 2)
    envelope = np.exp(log_env - log_env.max())
    return normalize(SymmetricState(n=n, amp=(-1.0) ** k * envelope))


def squeezed_basis(n: int) -> MeasurementBasis:
    """
    Ramsey readout about the axis perpendicular to the squeezed state's
    mean spin: each Ramsey basis row phase-evolved by pi/2.
    """
    rows = [evolve_phase(v, np.pi / 2.0).amp for v in ramsey_basis(n).vectors]
    return MeasurementBasis.from_matrix(np.vstack(rows))


def squeezed_protocol(
    n: int,
    kappa: float,
    T: float,
    prior_sigma_f: Optional[float] = None,
) -> ClockProtocol:
    """Squeezed-state clock with squeezing parameter kappa."""
    protocol = ClockProtocol(
        n=n, psi1=squeezed_state(n, kappa), basis=squeezed_basis(n),
        corrections=np.zeros(n + 1), probe_period=T, label="squeezed", kappa=float(kappa),
    )
    return _with_prior_corrections(protocol, prior_sigma_f)


def buzek_state(n: int) -> SymmetricState:
    """Sine-envelope state sqrt(2/(N+1)) sin(pi (m + 1/2) / (N+1))."""
    if n < 1:
        raise ProtocolError(f"n must be >= 1 (got {n})")
    m = np.arange(n + 1)
    amp = np.sqrt(2.0 / (n + 1)) * np.sin(np.pi * (m + 0.5) / (n + 1))
    return SymmetricState(n=n, amp=amp.astype(complex))


def buzek_phases(n: int, half_shift: bool) -> np.ndarray:
    """phi(j) = 2 pi (j [+ 1/2]) / (N+1)."""
    j = np.arange(n + 1) + (0.5 if half_shift else 0.0)
    return 2.0 * np.pi * j / (n + 1)


def buzek_basis(n: int, half_shift: bool = False) -> MeasurementBasis:
    """Fourier basis a_{j,m} = exp(i m phi(j)) / sqrt(N+1)."""
    if n < 1:
        raise ProtocolError(f"n must be >= 1 (got {n})")
    m = np.arange(n + 1)
    rows = np.exp(1j * np.outer(buzek_phases(n, half_shift), m)) / np.sqrt(n + 1)
    return MeasurementBasis.from_matrix(rows)


def buzek_protocol(
    n: int,
    half_shift: Optional[bool] = None,
    T: float = 1.0,
    prior_sigma_f: Optional[float] = None,
) -> ClockProtocol:
    """
    Sine-state / Fourier-basis clock. half_shift defaults to True for odd n.
    """
    if half_shift is None:
        half_shift = n % 2 == 1
    protocol = ClockProtocol(
        n=n, psi1=buzek_state(n), basis=buzek_basis(n, half_shift),
        corrections=np.zeros(n + 1), probe_period=T, label="buzek",
    )
    return _with_prior_corrections(protocol, prior_sigma_f)


def build_family(
    family: str,
    n: int,
    T: float,
    kappa: Optional[float] = None,
    half_shift: Optional[bool] = None,
    readout_phase: float = 0.0,
    prior_sigma_f: Optional[float] = None,
) -> ClockProtocol:
    """Construct a protocol of a named family."""
    if family == "ramsey":
        return ramsey_protocol(n, T, prior_sigma_f)
    if family == "ghz":
        return ghz_protocol(n, T, readout_phase, prior_sigma_f)
    if family == "squeezed":
        if kappa is None:
            raise ProtocolError("squeezed protocol requires kappa")
        return squeezed_protocol(n, kappa, T, prior_sigma_f)
    if family == "buzek":
        return buzek_protocol(n, half_shift, T, prior_sigma_f)
    raise ProtocolError(f"unknown protocol family {family!r} (choose from {', '.join(FAMILIES)})")


# ============================================================================
# Frequency corrections
# ============================================================================

def init_corrections(protocol: ClockProtocol, prior_sigma_f: Optional[float] = None) -> np.ndarray:
    """
    Posterior-mean frequency for each outcome under a Gaussian prior.

    correction_j = E[f | j] with prior f ~ N(0, prior_sigma_f^2), evaluated
    by quadrature over [-5 sigma, 5 sigma]. Outcomes whose prior mass is
    below 1e-12 get 0.

    Args:
        protocol: Protocol whose state and basis define p_j(2 pi f T)
        prior_sigma_f: Prior frequency spread, Hz. Defaults to a 1 rad
            phase spread, 1 / (2 pi T).
    """
    T = protocol.probe_period
    if prior_sigma_f is None:
        prior_sigma_f = DEFAULT_PRIOR_SIGMA_PHASE / (2.0 * np.pi * T)
    if not prior_sigma_f > 0:
        raise ProtocolError(f"prior_sigma_f must be > 0 (got {prior_sigma_f})")

    f = np.linspace(-PRIOR_GRID_WIDTH * prior_sigma_f, PRIOR_GRID_WIDTH * prior_sigma_f,
                    PRIOR_GRID_POINTS)
    weight = np.exp(-0.5 * (f / prior_sigma_f) ** 2)
    probs = phase_scan(protocol.psi1, protocol.basis, 2.0 * np.pi * f * T)

    mass = weight @ probs
    first_moment = (weight * f) @ probs
    reachable = mass / weight.sum() >= UNREACHABLE_MASS
    corrections = np.zeros(protocol.n + 1)
    corrections[reachable] = first_moment[reachable] / mass[reachable]
    return corrections


# ============================================================================
# Parameter-vector codec
# ============================================================================

def givens_pairs(n: int) -> list:
    """Index pairs (p, q), p < q, in the order the basis block uses them."""
    return [(p, q) for p in range(n + 1) for q in range(p + 1, n + 1)]


def _apply_givens_rows(u: np.ndarray, p: int, q: int, theta: float, phi: float) -> None:
    c, s = np.cos(theta), np.sin(theta)
    row_p = u[p].copy()
    u[p] = c * row_p - np.exp(1j * phi) * s * u[q]
    u[q] = np.exp(-1j * phi) * s * row_p + c * u[q]


def decode_basis(n: int, angles: np.ndarray) -> MeasurementBasis:
    """Product of (N+1)N/2 Givens rotations, one (angle, phase) pair each, applied to the identity."""
    u = np.eye(n + 1, dtype=complex)
    for (p, q), (theta, phi) in zip(givens_pairs(n), np.reshape(angles, (-1, 2))):
        _apply_givens_rows(u, p, q, theta, phi)
    return MeasurementBasis.from_matrix(u)


def encode_basis(basis: MeasurementBasis) -> np.ndarray:
    """
    Givens angles whose decode reproduces the basis rows up to per-row phases.

    Right-multiplies the basis matrix by conjugate Givens rotations that
    zero each row beyond its diagonal; the unitary leftover is diagonal.
    """
    a = np.array(basis.matrix, dtype=complex)
    angles = []
    for p, q in givens_pairs(basis.n):
        x, y = a[p, p], a[p, q]
        if abs(y) == 0.0:
            theta, phi = 0.0, 0.0
        elif abs(x) == 0.0:
            theta, phi = np.pi / 2.0, 0.0
        else:
            theta = math.atan2(abs(y), abs(x))
            phi = float(np.angle(-y) - np.angle(x))
        c, s = np.cos(theta), np.sin(theta)
        col_p = a[:, p].copy()
        a[:, p] = c * col_p - np.exp(-1j * phi) * s * a[:, q]
        a[:, q] = np.exp(1j * phi) * s * col_p + c * a[:, q]
        angles.extend([theta, phi])
    return np.asarray(angles)


def decode_params(p: ParamVector) -> ClockProtocol:
    """
    Turn a flat parameter vector into a protocol.

    Layout: [amp0, re1, im1, ..., reN, imN | N^2+N Givens (angle, phase)
    pairs | N+1 corrections (Hz) | T]. The state is normalized and T is
    taken as |T|.

    Raises:
        ProtocolError: If the state block is all zero or T decodes to 0.
    """
    n = p.n
    v = p.reals
    state_end = 2 * n + 1
    basis_end = state_end + n * n + n
    corr_end = basis_end + n + 1

    amp = np.empty(n + 1, dtype=complex)
    amp[0] = v[0]
    amp[1:] = v[1:state_end:2] + 1j * v[2:state_end:2]
    try:
        psi1 = normalize(SymmetricState(n=n, amp=amp))
    except StateError as e:
        raise ProtocolError(f"degenerate state block: {e}") from e

    probe_period = abs(float(v[corr_end]))
    if probe_period == 0.0:
        raise ProtocolError("degenerate protocol: probe period decoded to 0")

    return ClockProtocol(
        n=n,
        psi1=psi1,
        basis=decode_basis(n, v[state_end:basis_end]),
        corrections=v[basis_end:corr_end],
        probe_period=probe_period,
    )


def encode_params(protocol: ClockProtocol) -> ParamVector:
    """Flat vector whose decode has the same outcome curves, corrections and T."""
    amp = protocol.psi1.amp
    gauge = np.exp(-1j * np.angle(amp[0])) if abs(amp[0]) > 0 else 1.0
    amp = amp * gauge
    state = np.empty(2 * protocol.n + 1)
    state[0] = amp[0].real
    state[1::2] = amp[1:].real
    state[2::2] = amp[1:].imag
    reals = np.concatenate([
        state,
        encode_basis(protocol.basis),
        protocol.corrections,
        [protocol.probe_period],
    ])
    return ParamVector(n=protocol.n, reals=reals)


# ============================================================================
# JSON files
# ============================================================================

def _read_json(path: Union[str, Path]):
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ProtocolError(
            f"{path}: malformed JSON at line {e.lineno}, column {e.colno}: {e.msg}"
        ) from e


def load_protocol(path: Union[str, Path], orthonormalize: bool = False) -> ClockProtocol:
    """
    Read a protocol JSON file.

    Raises:
        ProtocolError: On malformed JSON (with line and column) or invalid content.
        OSError: If the file cannot be read.
    """
    data = _read_json(path)
    if isinstance(data, dict) and "protocol" in data:
        data = data["protocol"]
    if not isinstance(data, dict):
        raise ProtocolError(f"{path}: protocol must be a JSON object")
    return ClockProtocol.from_dict(data, orthonormalize=orthonormalize)


def read_manifest(path: Union[str, Path]) -> Optional[dict]:
    """Manifest stored alongside a protocol, or None."""
    data = _read_json(path)
    manifest = data.get("manifest") if isinstance(data, dict) else None
    return manifest if isinstance(manifest, dict) else None


def save_protocol(protocol: ClockProtocol, path: Union[str, Path], manifest: Optional[dict] = None) -> None:
    """Write a protocol JSON file, with the producing manifest when given."""
    data = protocol.to_dict()
    if manifest is not None:
        data["manifest"] = manifest
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")

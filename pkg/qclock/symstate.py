"""
Symmetric-subspace linear algebra for qclock.

All clock protocols live in the (N+1)-dimensional span of the Dicke states
|N,m>, the fully symmetrized N-qubit states with m excitations. States are
stored as N+1 complex amplitudes indexed by the excitation number m.
"""

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from scipy.special import gammaln


NORM_TOLERANCE = 1e-12
ORTHONORMAL_TOLERANCE = 1e-10


class StateError(ValueError):
    """Exception raised for invalid symmetric states or bases."""
    pass


class DegenerateStateError(StateError):
    """Raised when a state cannot be normalized (all amplitudes zero)."""
    pass


class DimensionMismatchError(StateError):
    """Raised when two objects belong to different qubit counts."""
    pass


def _frozen_array(values, dtype=complex) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SymmetricState:
    """
    State vector over the Dicke states |N,0>, ..., |N,N>.

    Attributes:
        n: Number of qubits (>= 1)
        amp: N+1 complex amplitudes, index = excitation number
    """
    n: int
    amp: np.ndarray

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise StateError(f"qubit count must be an integer >= 1 (got {self.n})")
        amp = _frozen_array(self.amp)
        if amp.shape != (self.n + 1,):
            raise DimensionMismatchError(
                f"length(amp) must equal n+1 = {self.n + 1} (got shape {amp.shape})"
            )
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "amp", amp)

    @classmethod
    def from_amplitudes(cls, amp: Sequence[complex]) -> "SymmetricState":
        """Build a state from its amplitudes; n is inferred as len(amp) - 1."""
        amp = np.asarray(amp, dtype=complex)
        return cls(n=len(amp) - 1, amp=amp)

    @classmethod
    def dicke(cls, n: int, m: int) -> "SymmetricState":
        """The Dicke basis vector |n, m>."""
        if not 0 <= m <= n:
            raise StateError(f"excitation number must lie in [0, {n}] (got {m})")
        amp = np.zeros(n + 1, dtype=complex)
        amp[m] = 1.0
        return cls(n=n, amp=amp)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.amp))

    def is_normalized(self, tol: float = NORM_TOLERANCE) -> bool:
        return abs(self.norm - 1.0) <= tol


@dataclass(frozen=True, eq=False)
class MeasurementBasis:
    """
    Orthonormal measurement basis {|a_j>} of N+1 symmetric states.

    The vectors are the rows of ``matrix``; outcome j has probability
    |<a_j|psi>|^2.
    """
    n: int
    vectors: tuple

    def __post_init__(self):
        vectors = tuple(self.vectors)
        if len(vectors) != self.n + 1:
            raise DimensionMismatchError(
                f"basis for n={self.n} needs {self.n + 1} vectors (got {len(vectors)})"
            )
        for v in vectors:
            if v.n != self.n:
                raise DimensionMismatchError(f"basis vector has n={v.n}, expected {self.n}")
        object.__setattr__(self, "vectors", vectors)

        matrix = np.vstack([v.amp for v in vectors])
        matrix.setflags(write=False)
        object.__setattr__(self, "_matrix", matrix)

        gram = matrix.conj() @ matrix.T
        deviation = float(np.max(np.abs(gram - np.eye(self.n + 1))))
        if deviation >= ORTHONORMAL_TOLERANCE:
            raise StateError(
                f"basis vectors must be orthonormal: max |<a_i|a_j> - delta_ij| = {deviation:.3e}"
            )

    @classmethod
    def from_matrix(cls, rows: np.ndarray, orthonormalize: bool = False) -> "MeasurementBasis":
        """
        Build a basis from a square matrix whose rows are the basis vectors.

        Args:
            rows: (N+1) x (N+1) complex matrix
            orthonormalize: Replace the rows by the nearest unitary matrix
                (polar decomposition) before validation. Used for bases
                typed in with rounded digits.
        """
        rows = np.asarray(rows, dtype=complex)
        if rows.ndim != 2 or rows.shape[0] != rows.shape[1]:
            raise DimensionMismatchError(f"basis matrix must be square (got shape {rows.shape})")
        if orthonormalize:
            from scipy.linalg import polar
            rows, _ = polar(rows)
        n = rows.shape[0] - 1
        return cls(n=n, vectors=tuple(SymmetricState(n=n, amp=row) for row in rows))

    @classmethod
    def dicke(cls, n: int) -> "MeasurementBasis":
        """Excitation-counting basis {|n, m>}."""
        return cls.from_matrix(np.eye(n + 1))

    @property
    def matrix(self) -> np.ndarray:
        """Rows are the basis vectors a_j (read-only)."""
        return self._matrix


def _check_same_n(a_n: int, b_n: int) -> None:
    if a_n != b_n:
        raise DimensionMismatchError(f"qubit counts differ: {a_n} vs {b_n}")


def normalize(state: SymmetricState) -> SymmetricState:
    """
    Divide the amplitudes by their Euclidean norm.

    Raises:
        DegenerateStateError: If every amplitude is zero.
    """
    norm = np.linalg.norm(state.amp)
    if norm == 0.0 or not np.isfinite(norm):
        raise DegenerateStateError(f"cannot normalize state with norm {norm}")
    return SymmetricState(n=state.n, amp=state.amp / norm)


def evolve_phase(state: SymmetricState, phi: float) -> SymmetricState:
    """Free evolution |N,m> -> exp(-i m phi) |N,m>."""
    m = np.arange(state.n + 1)
    return SymmetricState(n=state.n, amp=state.amp * np.exp(-1j * m * phi))


def collective_rotation(n: int, theta: float) -> np.ndarray:
    """
    Collective y-rotation by theta restricted to the symmetric subspace.

    Entry [k, l] is <N,k| R_y(theta)^{(x)N} |N,l> with the single-qubit
    rotation [[cos t/2, -sin t/2], [sin t/2, cos t/2]], i.e. the Wigner
    little-d matrix for j = N/2. The factorial ratios are accumulated as
    log-gamma sums so large N does not overflow.

    Returns:
        Real orthogonal (n+1) x (n+1) matrix.
    """
    if n < 1:
        raise StateError(f"qubit count must be >= 1 (got {n})")
    c = np.cos(theta / 2.0)
    s = np.sin(theta / 2.0)
    lf = gammaln(np.arange(n + 2) + 1.0)  # lf[k] = log(k!)

    d = np.zeros((n + 1, n + 1))
    for k in range(n + 1):
        for l in range(n + 1):
            half = 0.5 * (lf[k] + lf[n - k] + lf[l] + lf[n - l])
            total = 0.0
            for p in range(max(0, k + l - n), min(k, l) + 1):
                log_coeff = half - (lf[p] + lf[l - p] + lf[k - p] + lf[n - l - k + p])
                sign = -1.0 if (l - p) % 2 else 1.0
                total += sign * np.exp(log_coeff) * c ** (n - l - k + 2 * p) * s ** (l + k - 2 * p)
            d[k, l] = total
    return d


def inner_product(a: SymmetricState, b: SymmetricState) -> complex:
    """<a|b> = sum_m conj(a_m) b_m."""
    _check_same_n(a.n, b.n)
    return complex(np.vdot(a.amp, b.amp))


def outcome_probabilities(state: SymmetricState, basis: MeasurementBasis) -> np.ndarray:
    """Probabilities p_j = |<a_j|state>|^2 for every basis vector."""
    _check_same_n(state.n, basis.n)
    return np.abs(basis.matrix.conj() @ state.amp) ** 2


def phase_scan(
    state: SymmetricState,
    basis: MeasurementBasis,
    phis: Union[Sequence[float], np.ndarray],
) -> np.ndarray:
    """
    Outcome probabilities after free evolution, for many phases at once.

    Returns:
        Array of shape (len(phis), N+1); row i equals
        outcome_probabilities(evolve_phase(state, phis[i]), basis).
    """
    _check_same_n(state.n, basis.n)
    phis = np.atleast_1d(np.asarray(phis, dtype=float))
    m = np.arange(state.n + 1)
    evolved = state.amp[None, :] * np.exp(-1j * np.outer(phis, m))
    return np.abs(evolved @ basis.matrix.conj().T) ** 2


def sample_outcome(probs: Sequence[float], rng_draw: float) -> int:
    """
    Inverse-CDF sampling: the smallest j whose cumulative probability
    exceeds rng_draw.
    """
    cdf = np.cumsum(probs)
    j = int(np.searchsorted(cdf, rng_draw, side="right"))
    # rounding can leave cdf[-1] a hair below a draw close to 1
    return min(j, len(cdf) - 1)

"""
Tests for the symmetric-subspace primitives.

Dicke-space results are checked against explicit 2^N tensor-product
computations for small N.
"""

import numpy as np
import pytest

from qclock.symstate import (
    DegenerateStateError,
    DimensionMismatchError,
    MeasurementBasis,
    StateError,
    SymmetricState,
    collective_rotation,
    evolve_phase,
    inner_product,
    normalize,
    outcome_probabilities,
    phase_scan,
    sample_outcome,
)


def random_state(n: int, rng: np.random.Generator) -> SymmetricState:
    amp = rng.standard_normal(n + 1) + 1j * rng.standard_normal(n + 1)
    return normalize(SymmetricState(n=n, amp=amp))


def random_basis(n: int, rng: np.random.Generator) -> MeasurementBasis:
    z = rng.standard_normal((n + 1, n + 1)) + 1j * rng.standard_normal((n + 1, n + 1))
    q, _ = np.linalg.qr(z)
    return MeasurementBasis.from_matrix(q)


# ═══════════════════════════════════════════════════════════════════
# States
# ═══════════════════════════════════════════════════════════════════


class TestSymmetricState:

    def test_amplitudes_are_read_only(self):
        state = SymmetricState.dicke(2, 1)
        with pytest.raises(ValueError):
            state.amp[0] = 1.0

    def test_length_must_match_n(self):
        with pytest.raises(DimensionMismatchError, match="n\\+1 = 3"):
            SymmetricState(n=2, amp=[1.0, 0.0])

    def test_n_must_be_positive(self):
        with pytest.raises(StateError):
            SymmetricState(n=0, amp=[1.0])

    def test_from_amplitudes_infers_n(self):
        state = SymmetricState.from_amplitudes([0.6, 0.8j, 0.0, 0.0])
        assert state.n == 3
        assert state.is_normalized()

    def test_normalize(self):
        state = normalize(SymmetricState(n=1, amp=[3.0, 4.0]))
        np.testing.assert_allclose(state.amp, [0.6, 0.8])

    def test_normalize_zero_vector(self):
        with pytest.raises(DegenerateStateError):
            normalize(SymmetricState(n=2, amp=np.zeros(3)))

    def test_evolve_phase(self):
        state = SymmetricState(n=2, amp=np.ones(3) / np.sqrt(3))
        evolved = evolve_phase(state, 0.3)
        np.testing.assert_allclose(evolved.amp, np.exp(-1j * 0.3 * np.arange(3)) / np.sqrt(3))

    def test_evolve_phase_two_pi_is_identity(self):
        state = random_state(4, np.random.default_rng(0))
        np.testing.assert_allclose(evolve_phase(state, 2 * np.pi).amp, state.amp, atol=1e-12)

    def test_inner_product_conjugates_left(self):
        a = SymmetricState(n=1, amp=[1j, 0.0])
        b = SymmetricState(n=1, amp=[1.0, 0.0])
        assert inner_product(a, b) == pytest.approx(-1j)

    def test_inner_product_dimension_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            inner_product(SymmetricState.dicke(1, 0), SymmetricState.dicke(2, 0))


# ═══════════════════════════════════════════════════════════════════
# Bases
# ═══════════════════════════════════════════════════════════════════


class TestMeasurementBasis:

    def test_dicke_basis(self):
        basis = MeasurementBasis.dicke(3)
        np.testing.assert_array_equal(basis.matrix, np.eye(4))

    def test_rejects_non_orthonormal(self):
        rows = np.array([[1.0, 0.0], [1.0, 1.0]]) / np.sqrt(2)
        with pytest.raises(StateError, match="orthonormal"):
            MeasurementBasis.from_matrix(rows)

    def test_rejects_wrong_count(self):
        with pytest.raises(DimensionMismatchError):
            MeasurementBasis(n=2, vectors=(SymmetricState.dicke(2, 0),))

    def test_orthonormalize_rounded_rows(self):
        rows = np.array([[0.707, 0.707], [0.707, -0.707]])
        basis = MeasurementBasis.from_matrix(rows, orthonormalize=True)
        np.testing.assert_allclose(basis.matrix, np.array([[1, 1], [1, -1]]) / np.sqrt(2), atol=1e-12)


# ═══════════════════════════════════════════════════════════════════
# Collective rotation
# ═══════════════════════════════════════════════════════════════════


class TestCollectiveRotation:

    @pytest.mark.parametrize("n", [1, 2, 3, 4])
    @pytest.mark.parametrize("theta", [0.3, np.pi / 2, 2.1])
    def test_matches_tensor_product(self, oracle, n, theta):
        embed = oracle.embedding(n)
        expected = embed.T @ oracle.rotation(n, theta) @ embed
        np.testing.assert_allclose(collective_rotation(n, theta), expected, atol=1e-12)

    @pytest.mark.parametrize("n", [1, 5, 20])
    def test_orthogonal(self, n):
        d = collective_rotation(n, np.pi / 2)
        np.testing.assert_allclose(d @ d.T, np.eye(n + 1), atol=1e-10)

    def test_zero_angle_is_identity(self):
        np.testing.assert_allclose(collective_rotation(6, 0.0), np.eye(7), atol=1e-15)

    def test_single_qubit(self):
        c, s = np.cos(0.35), np.sin(0.35)
        np.testing.assert_allclose(collective_rotation(1, 0.7), [[c, -s], [s, c]], atol=1e-15)


# ═══════════════════════════════════════════════════════════════════
# Probabilities and sampling
# ═══════════════════════════════════════════════════════════════════


class TestProbabilities:

    def test_dicke_state_in_dicke_basis(self):
        probs = outcome_probabilities(SymmetricState.dicke(3, 2), MeasurementBasis.dicke(3))
        np.testing.assert_allclose(probs, [0, 0, 1, 0])

    def test_sum_to_one(self):
        rng = np.random.default_rng(1)
        for n in (1, 3, 7):
            probs = outcome_probabilities(random_state(n, rng), random_basis(n, rng))
            assert probs.sum() == pytest.approx(1.0, abs=1e-12)

    def test_subspace_matches_full_space(self, oracle):
        """100 random (state, basis, phase) cases for n <= 4."""
        rng = np.random.default_rng(2)
        for case in range(100):
            n = 1 + case % 4
            state = random_state(n, rng)
            basis = random_basis(n, rng)
            phi = rng.uniform(-np.pi, np.pi)
            expected = oracle.probabilities(state.amp, basis.matrix, phi)
            got = outcome_probabilities(evolve_phase(state, phi), basis)
            np.testing.assert_allclose(got, expected, atol=1e-10)

    def test_phase_scan_matches_pointwise(self):
        rng = np.random.default_rng(3)
        state, basis = random_state(3, rng), random_basis(3, rng)
        phis = np.linspace(-np.pi, np.pi, 17)
        scan = phase_scan(state, basis, phis)
        assert scan.shape == (17, 4)
        for i, phi in enumerate(phis):
            np.testing.assert_allclose(scan[i], outcome_probabilities(evolve_phase(state, phi), basis),
                                       atol=1e-14)

    def test_sample_outcome_inverse_cdf(self):
        probs = [0.2, 0.5, 0.3]
        assert sample_outcome(probs, 0.0) == 0
        assert sample_outcome(probs, 0.19) == 0
        assert sample_outcome(probs, 0.2) == 1
        assert sample_outcome(probs, 0.69) == 1
        assert sample_outcome(probs, 0.71) == 2
        assert sample_outcome(probs, 0.999999) == 2

    def test_sample_outcome_skips_zero_probability(self):
        probs = [0.5, 0.0, 0.5]
        draws = np.linspace(0, 0.999, 1000)
        assert 1 not in {sample_outcome(probs, u) for u in draws}

    def test_sample_outcome_rounding_at_top(self):
        assert sample_outcome([0.5, 0.5 - 1e-16], 1.0 - 1e-17) == 1

    def test_sample_outcome_frequencies(self):
        rng = np.random.default_rng(4)
        probs = np.array([0.1, 0.6, 0.3])
        counts = np.bincount([sample_outcome(probs, u) for u in rng.random(20000)], minlength=3)
        np.testing.assert_allclose(counts / 20000, probs, atol=0.015)

import numpy as np
import pytest

from fluxtheo import channels as chn
from fluxtheo.quantum_core import SX, SZ, ValidationError, random_density_matrix


def amplitude_damping(g):
    return chn.channel([np.array([[1, 0], [0, np.sqrt(1 - g)]]), np.array([[0, np.sqrt(g)], [0, 0]])])


def test_amplitude_damping_hand_computed():
    E = amplitude_damping(0.3)
    rho = np.array([[0.25, 0.1], [0.1, 0.75]])
    out = chn.apply(E, rho)
    want = np.array([[0.25 + 0.3 * 0.75, np.sqrt(0.7) * 0.1], [np.sqrt(0.7) * 0.1, 0.7 * 0.75]])
    assert np.allclose(out, want, atol=1e-15)
    assert not chn.is_unital(E)
    assert chn.unitality_residual(E) == pytest.approx(0.3, abs=1e-14)


def test_dual_is_trace_adjoint(rng):
    E = chn.random_channel(3, rng, 3)
    X = random_density_matrix(3, rng)
    Y = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
    lhs = np.trace(Y.conj().T @ chn.apply(E, X))
    rhs = np.trace(chn.apply_dual(E, Y).conj().T @ X)
    assert lhs == pytest.approx(rhs, abs=1e-13)
    assert np.allclose(chn.apply_dual(E, np.eye(3)), np.eye(3), atol=1e-13)


def test_compose_order():
    Ux = chn.unitary_channel(SX)
    Uz = chn.unitary_channel(SZ)
    rho = np.array([[0.6, 0.2], [0.2, 0.4]])
    assert np.allclose(chn.apply(chn.compose(Uz, Ux), rho), SZ @ SX @ rho @ SX @ SZ)


def test_superoperator_round_trip(rng):
    E = chn.random_channel(2, rng, 2)
    back = chn.from_superoperator(chn.superoperator(E))
    assert chn.channel_distance(E, back) < 1e-13


def test_constant_channel():
    s = np.diag([0.3, 0.7]).astype(complex)
    E = chn.constant_channel(s)
    assert np.allclose(chn.apply(E, np.array([[1, 0], [0, 0]])), s)
    assert chn.is_trace_preserving(E)


def test_non_tp_kraus_rejected():
    with pytest.raises(ValidationError):
        chn.channel([np.eye(2), np.eye(2)])
    with pytest.raises(ValidationError):
        chn.channel([])
    with pytest.raises(ValidationError):
        chn.cp_map_from_kraus([2 * np.eye(2)], allow_trace_decreasing=True)
    assert chn.cp_map_from_kraus([0.5 * np.eye(2)], allow_trace_decreasing=True).dim == 2


def test_json_round_trip(rng):
    E = chn.random_channel(2, rng)
    E2 = chn.from_json(chn.to_json(E))
    assert chn.channel_distance(E, E2) == 0.0


def test_random_unital_channel_is_unital(rng):
    assert chn.is_unital(chn.random_unital_channel(4, rng, 3))

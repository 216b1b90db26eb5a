import numpy as np
import pytest

from fluxtheo import quantum_core as qc
from fluxtheo.quantum_core import DomainError, ValidationError


def test_gibbs_state_qubit_closed_form():
    beta, e = 0.7, 1.3
    H = np.diag([-e, e])
    rho = qc.gibbs_state(H, beta)
    z = 2 * np.cosh(beta * e)
    assert np.allclose(np.diag(rho).real, [np.exp(beta * e) / z, np.exp(-beta * e) / z], atol=1e-15)
    assert qc.free_energy(H, beta) == pytest.approx(-np.log(z) / beta, abs=1e-14)
    assert qc.partition_function(H, beta) == pytest.approx(z, rel=1e-14)


def test_gibbs_is_overflow_safe():
    H = np.diag([0.0, 1e4, 2e4])
    rho = qc.gibbs_state(H, 10.0)
    assert np.isfinite(rho).all()
    assert rho[0, 0].real == pytest.approx(1.0, abs=1e-15)
    assert np.isfinite(qc.log_partition_function(H, 10.0))


def test_entropies(rng):
    assert qc.von_neumann_entropy(np.eye(4) / 4) == pytest.approx(np.log(4), abs=1e-14)
    assert qc.shannon_entropy([0.5, 0.5, 0.0]) == pytest.approx(np.log(2), abs=1e-15)
    rho = qc.random_density_matrix(3, rng)
    assert qc.relative_entropy(rho, rho) == pytest.approx(0.0, abs=1e-12)
    # diagonal states reduce to the classical divergence
    p, q = np.array([0.2, 0.3, 0.5]), np.array([0.4, 0.4, 0.2])
    assert qc.relative_entropy(np.diag(p), np.diag(q)) == pytest.approx(
        float(np.sum(p * np.log(p / q))), abs=1e-14)
    assert qc.classical_relative_entropy(p, q) == pytest.approx(float(np.sum(p * np.log(p / q))), abs=1e-15)


def test_relative_entropy_support_mismatch_is_infinite():
    assert qc.relative_entropy(np.diag([0.5, 0.5]), np.diag([1.0, 0.0])) == np.inf
    assert qc.classical_relative_entropy([0.5, 0.5], [1.0, 0.0]) == np.inf


def test_psd_power_inverse(rng):
    rho = qc.random_density_matrix(4, rng)
    A = qc.psd_power(rho, -0.5)
    assert np.allclose(A @ rho @ A, np.eye(4), atol=1e-10)
    assert np.allclose(qc.sqrtm_psd(rho) @ qc.sqrtm_psd(rho), rho, atol=1e-13)


def test_psd_power_rejects_singular_negative_power():
    with pytest.raises(DomainError):
        qc.psd_power(np.diag([1.0, 0.0]), -1.0)


def test_validation_errors():
    with pytest.raises(ValidationError):
        qc.as_hermitian(np.array([[0, 1], [0, 0]]))
    with pytest.raises(ValidationError):
        qc.as_density_matrix(np.diag([0.7, 0.7]))
    with pytest.raises(ValidationError):
        qc.as_density_matrix(np.diag([1.2, -0.2]))
    assert not qc.is_density_matrix(np.diag([1.2, -0.2]))


def test_norms():
    A = np.diag([3.0, -4.0])
    assert qc.trace_norm(A) == pytest.approx(7.0)
    assert qc.operator_norm(A) == pytest.approx(4.0)


def test_site_operator_and_kron():
    Z0 = qc.site_operator(qc.SZ, 0, 2)
    assert np.allclose(Z0, np.kron(qc.SZ, np.eye(2)))
    assert np.allclose(qc.kron_all([qc.SX, qc.SZ]), np.kron(qc.SX, qc.SZ))


def test_random_unitary_is_unitary(rng):
    U = qc.random_unitary(5, rng)
    assert np.allclose(U @ U.conj().T, np.eye(5), atol=1e-13)


def test_tolerance_context_restores():
    before = qc.TOL
    with qc.tolerances(herm=1e-3):
        assert qc.TOL.herm == 1e-3
    assert qc.TOL == before

import numpy as np
import pytest

from fluxtheo import measurements as ms
from fluxtheo.acceptance import measure_prepare_measurement, pair_measurements, unitary_mixture_measurement
from fluxtheo.quantum_core import SX, ValidationError, random_density_matrix, random_unitary


def test_incomplete_measurement_rejected():
    with pytest.raises(ValidationError):
        ms.measurement([np.diag([1.0, 0.0])])


def test_born_and_post_measurement_states():
    M = ms.projective_from_basis(np.eye(2))
    rho = np.array([[0.3, 0.1], [0.1, 0.7]])
    ens = ms.measure_prepare(M, rho)
    assert np.allclose(ens.probs, [0.3, 0.7])
    assert np.allclose(ens.states[0], np.diag([1, 0]))


def test_zero_probability_outcome_has_no_state():
    M = ms.projective_from_basis(np.eye(2))
    ens = ms.measure_prepare(M, np.diag([1.0, 0.0]))
    assert ens.states[1] is None
    assert list(ens.support) == [True, False]


def test_projective_from_hamiltonian_diagonalizes():
    H = SX
    M = ms.projective_from_hamiltonian(H)
    rec = sum(e * P for e, P in zip([-1, 1], M.ops))
    assert np.allclose(rec, H)


def test_pair_measurement_is_microreversible():
    P, Q = pair_measurements()
    assert ms.check_microreversible(P, Q).ok


def test_random_povm_is_not_microreversible(rng):
    P = ms.random_measurement(2, 2, rng)
    Q = ms.random_measurement(2, 2, rng)
    rep = ms.check_microreversible(P, Q)
    assert not rep.ok
    assert rep.messages
    assert rep.violating_state is not None


def test_admissible_families(rng):
    for d in (2, 3, 4):
        P = measure_prepare_measurement(d, rng)
        Q = unitary_mixture_measurement(d, rng)
        assert ms.check_microreversible(P, Q).ok


def test_random_measurement_complete(rng):
    assert ms.random_measurement(3, 4, rng).completeness_residual() < 1e-12


def test_reverse_measurements_complete(rng):
    d = 3
    P = ms.projective_from_basis(random_unitary(d, rng))
    Q = ms.projective_from_basis(random_unitary(d, rng))
    q = rng.dirichlet(np.ones(d))
    rho = random_density_matrix(d, rng)
    rt = sum(q[b] * Q.ops[b] @ Q.ops[b].conj().T for b in range(d))
    Pt, Qt = ms.build_reverse_measurements(P, Q, q, rho, rt)
    assert Qt.completeness_residual() < 1e-10
    assert Pt.dim == d


def test_json_round_trip(rng):
    M = ms.random_measurement(2, 3, rng)
    M2 = ms.from_json(ms.to_json(M))
    assert np.array_equal(M.ops, M2.ops)

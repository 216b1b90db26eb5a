import numpy as np
import pytest

from fluxtheo import channels as chn
from fluxtheo import fluctuation as fl
from fluxtheo import measurements as ms
from fluxtheo.acceptance import pair_measurements, random_protocol
from fluxtheo.quantum_core import SX, DomainError, ValidationError, random_density_matrix

Z2 = ms.projective_from_basis(np.eye(2))


def swap_protocol():
    return fl.protocol(np.diag([0.8, 0.2]), Z2, chn.unitary_channel(SX), Z2, np.array([0.6, 0.4]))


def decay_protocol(q0=0.3):
    # full amplitude damping to |0>
    E = chn.channel([np.array([[1, 0], [0, 0]]), np.array([[0, 1], [0, 0]])])
    return fl.protocol(np.diag([0.55, 0.45]), Z2, E, Z2, np.array([q0, 1 - q0]))


def test_swap_pdf_by_hand():
    d = fl.forward_pdf(swap_protocol())
    m = d.prob > 0  # unsupported (a, b) pairs stay as zero-weight atoms
    assert np.allclose(d.v[m], [np.log(0.2 / 0.6), np.log(0.8 / 0.4)], atol=1e-15)
    assert np.allclose(d.prob[m], [0.2, 0.8], atol=1e-15)
    assert d.mean() == pytest.approx(0.8 * np.log(2) + 0.2 * np.log(1 / 3), abs=1e-15)


def test_swap_jarzynski_unital():
    lhs, rhs, res = fl.jarzynski_check(swap_protocol())
    assert lhs == pytest.approx(1.0, abs=1e-15)
    assert rhs == pytest.approx(1.0, abs=1e-15)


def test_decay_efficacy_by_hand():
    sp = decay_protocol(0.3)
    g_sum, g_closed, res = fl.efficacy_both(sp)
    assert g_closed == pytest.approx(0.6, abs=1e-15)
    assert g_sum == pytest.approx(0.6, abs=1e-15)
    assert fl.jarzynski_check(sp)[0] == pytest.approx(0.6, abs=1e-15)


def test_saturating_efficacy():
    # everything decays to |0> and q puts all weight on it
    sp = decay_protocol(1 - 1e-15)
    g, bound, d = fl.gamma_bound(sp)
    assert g == pytest.approx(2.0, abs=1e-12)
    assert g <= bound + 1e-12 <= d + 1e-12


def test_identity_protocol_has_zero_v():
    rho = np.diag([0.7, 0.3])
    sp = fl.protocol(rho, Z2, chn.identity_channel(2), Z2, np.array([0.7, 0.3]))
    d = fl.forward_pdf(sp)
    assert np.allclose(d.v[d.prob > 0], 0.0) and d.total == pytest.approx(1.0)


def test_observable_choices():
    sp = swap_protocol()
    for choice in fl.VChoice:
        lhs, rhs, res = fl.jarzynski_check(sp, choice)
        assert res < 1e-14
    # ln(p_{b|a}/f_b) averages to the mutual information, here H(f) since a fixes b
    d = fl.forward_pdf(sp, fl.VChoice.LOG_COND_F)
    assert d.mean() == pytest.approx(-0.2 * np.log(0.2) - 0.8 * np.log(0.8), abs=1e-15)


def test_crooks_rejects_non_unital_and_non_microreversible(rng):
    with pytest.raises(DomainError):
        fl.crooks_check(decay_protocol())
    P = ms.random_measurement(2, 2, rng)
    sp = fl.protocol(random_density_matrix(2, rng), P, chn.random_unital_channel(2, rng), Z2,
                     np.array([0.5, 0.5]))
    with pytest.raises(DomainError):
        fl.crooks_check(sp)


def test_crooks_qubit_pair(rng):
    P, Q = pair_measurements()
    for _ in range(5):
        sp = fl.protocol(random_density_matrix(2, rng), P, chn.random_unital_channel(2, rng), Q,
                         rng.dirichlet([1, 1]))
        assert fl.crooks_check(sp) <= 1e-12


def test_crooks_with_reverse_unitaries(rng):
    from fluxtheo.quantum_core import random_unitary
    sp = random_protocol(3, rng, unital=True, projective=True)
    Ua = [random_unitary(3, rng) for _ in range(3)]
    Ub = [random_unitary(3, rng) for _ in range(3)]
    assert fl.crooks_check(sp, Ua, Ub) <= 1e-12


def test_bistochastic_report(rng):
    sp = random_protocol(3, rng, unital=True, projective=True)
    rep = fl.bistochasticity_and_microreversibility_check(sp)
    assert rep.unital and rep.bistochastic and rep.reverse_residual < 1e-12
    rep2 = fl.bistochasticity_and_microreversibility_check(decay_protocol())
    assert not rep2.unital and rep2.reverse_residual < 1e-12


def test_mgf_at_zero_is_gamma(rng):
    sp = random_protocol(3, rng, unital=False)
    a, b, res = fl.mgf_identity(sp, 0.0)
    assert a == pytest.approx(fl.efficacy(sp), abs=1e-12)
    assert res < 1e-12


def test_projective_closed_form_at_zero_is_one(rng):
    sp = random_protocol(2, rng, projective=True)
    rp, rq = fl.projective_states(sp)
    assert fl.mgf_projective_closed_form(rp, rq, sp.channel, 0.0) == pytest.approx(1.0, abs=1e-12)


def test_second_law(rng):
    for _ in range(10):
        mv, rhs, gap = fl.second_law_check(random_protocol(3, rng))
        assert gap >= -1e-12


def test_entropy_identity_swap():
    r = fl.mean_v_entropy_identity(swap_protocol())
    assert max(r.residuals.values()) < 1e-14


def test_protocol_validation(rng):
    rho = random_density_matrix(2, rng)
    with pytest.raises(ValidationError):
        fl.protocol(rho, Z2, chn.identity_channel(2), Z2, np.array([1.0, 0.0]))
    with pytest.raises(ValidationError):
        fl.protocol(rho, Z2, chn.identity_channel(3), Z2, np.array([0.5, 0.5]))
    with pytest.raises(ValidationError):
        fl.protocol(rho, Z2, chn.identity_channel(2), Z2, np.array([0.5, 0.3, 0.2]))


def test_merge_atoms():
    d = fl.merge_atoms([0.0, 1.0, 1.0 + 1e-12, -2.0], [0.1, 0.2, 0.3, 0.4])
    assert np.allclose(d.v, [-2.0, 0.0, 1.0], atol=1e-11)
    assert np.allclose(d.prob, [0.4, 0.1, 0.5])


def test_mgf_overflow_warns():
    d = fl.merge_atoms([800.0], [1.0])
    with pytest.warns(RuntimeWarning):
        assert fl.mgf(d, 1.0) == np.inf

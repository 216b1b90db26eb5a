import numpy as np
import pytest

from fluxtheo import channels as chn
from fluxtheo import feedback as fb
from fluxtheo import fluctuation as fl
from fluxtheo import measurements as ms
from fluxtheo.acceptance import random_protocol, random_unitary_feedback
from fluxtheo.quantum_core import SX, ValidationError

Z2 = ms.projective_from_basis(np.eye(2))


def flip_back_feedback():
    """Measure z; on outcome 1 flip back to |0>. Final readout z with q = (0.9, 0.1)."""
    rho = np.diag([0.6, 0.4])
    q = [np.array([0.9, 0.1])] * 2
    return fb.unitary_feedback_protocol(rho, Z2, np.eye(2), Z2, [np.eye(2), SX], [Z2, Z2], q)


def test_flip_back_by_hand():
    s = flip_back_feedback()
    # every branch ends in |0>, so gamma = sum_j q_{0|j} Tr[Q_j] = 2 * 0.9
    assert fb.feedback_efficacy(s) == pytest.approx(1.8, abs=1e-15)
    assert fb.feedback_efficacy(s, "sum") == pytest.approx(1.8, abs=1e-15)
    lhs, g, res = fb.feedback_jarzynski(s)
    assert res < 1e-15
    assert fb.joint_total(s) == pytest.approx(1.0, abs=1e-15)


def test_trivial_feedback_reproduces_protocol(rng):
    sp = random_protocol(3, rng, unital=False)
    s = fb.trivial_feedback(sp)
    assert fb.feedback_efficacy(s) == pytest.approx(fl.efficacy(sp, "closed"), abs=1e-12)


def test_unitary_feedback_gamma(rng):
    for proj in (True, False):
        s = random_unitary_feedback(3, rng, proj)
        rq = [s.rho_q(j) for j in range(s.n_branches)]
        Ub = [m.kraus[0] for m in s.branch_maps]
        assert fb.unitary_feedback_gamma(s.mid, Ub, rq) == pytest.approx(fb.feedback_efficacy(s), abs=1e-12)


def test_error_free_limit_of_error_model(rng):
    s = random_unitary_feedback(2, rng)
    em = fb.symmetric_binary_error(0.0, p_j=fb.mid_probabilities(s))
    se = fb.with_error_model(s, em)
    assert fb.feedback_efficacy(se) == pytest.approx(fb.feedback_efficacy(s), abs=1e-13)


def test_classical_error_gamma(rng):
    s = random_unitary_feedback(2, rng)
    em = fb.symmetric_binary_error(0.2, p_j=fb.mid_probabilities(s))
    se = fb.with_error_model(s, em)
    rq = [s.rho_q(j) for j in range(2)]
    Ub = [m.kraus[0] for m in s.branch_maps]
    assert fb.classical_error_gamma(s.mid, Ub, rq, em.confusion) == pytest.approx(
        fb.feedback_efficacy(se), abs=1e-12)


def test_mutual_information_integral(rng):
    s = random_unitary_feedback(3, rng, projective_mid=True)
    C = 0.7 * np.eye(3) + 0.1 * np.ones((3, 3))
    em = fb.error_model(C, p_j=fb.mid_probabilities(s))
    r = fb.mutual_info_observable_pdf(s, em)
    assert r.integral == pytest.approx(1.0, abs=1e-12)
    assert r.mean_information >= -1e-12


def test_mgf_three_way(rng):
    s = random_unitary_feedback(2, rng, projective_mid=False)
    for lam in (-1.5, -0.3, 0.0, 0.8, 2.0):
        assert fb.feedback_mgf_identity(s, lam)[3] < 1e-10


def test_error_model_validation():
    with pytest.raises(ValidationError):
        fb.error_model([[0.5, 0.5], [0.6, 0.5]], p_j=[0.5, 0.5])
    with pytest.raises(ValidationError):
        fb.error_model([[1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(ValidationError):
        fb.error_model(np.eye(3)[:2], p_j=[0.5, 0.5])


def test_branches_must_be_jointly_tp():
    with pytest.raises(ValidationError):
        fb.feedback_protocol_from_maps(np.eye(2) / 2, Z2, [chn.identity_channel(2)] * 2, [Z2, Z2],
                                       [np.array([0.5, 0.5])] * 2)

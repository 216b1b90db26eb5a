"""Invariants as property tests; hypothesis draws seeds, dimensions and parameters."""
import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from fluxtheo import ame
from fluxtheo import channels as chn
from fluxtheo import feedback as fb
from fluxtheo import fluctuation as fl
from fluxtheo.acceptance import pair_measurements, random_protocol, random_unitary_feedback
from fluxtheo.quantum_core import (
    gibbs_state,
    random_density_matrix,
    random_hermitian,
    relative_entropy,
    von_neumann_entropy,
)

seeds = st.integers(0, 2 ** 32 - 1)
dims = st.integers(2, 4)
lams = st.floats(-2.0, 2.0, allow_nan=False)


@given(seeds, dims, st.integers(1, 4))
def test_channel_output_is_a_state(seed, d, k):
    rng = np.random.default_rng(seed)
    E = chn.random_channel(d, rng, k)
    out = chn.apply(E, random_density_matrix(d, rng))
    assert abs(np.trace(out) - 1) < 1e-12
    assert np.min(np.linalg.eigvalsh(0.5 * (out + out.conj().T))) > -1e-12


@given(seeds, dims)
def test_dual_of_tp_map_is_unital(seed, d):
    rng = np.random.default_rng(seed)
    E = chn.random_channel(d, rng, 3)
    assert np.allclose(chn.apply_dual(E, np.eye(d)), np.eye(d), atol=1e-12)


@given(seeds, dims, st.booleans(), st.booleans())
def test_jarzynski_equals_efficacy(seed, d, unital, projective):
    sp = random_protocol(d, np.random.default_rng(seed), unital, projective)
    g_sum, g_closed, res = fl.efficacy_both(sp)
    assert res < 1e-10
    assert fl.jarzynski_check(sp)[2] < 1e-10


@given(seeds, dims, st.booleans())
def test_efficacy_bounds(seed, d, unital):
    g, bound, dd = fl.gamma_bound(random_protocol(d, np.random.default_rng(seed), unital))
    assert -1e-12 <= g <= bound + 1e-12
    assert bound <= dd + 1e-12


@given(seeds, dims, lams)
def test_mgf_identity(seed, d, lam):
    sp = random_protocol(d, np.random.default_rng(seed))
    assert fl.mgf_identity(sp, lam)[2] < 1e-9


@given(seeds, dims)
def test_crooks_projective_unital(seed, d):
    sp = random_protocol(d, np.random.default_rng(seed), unital=True, projective=True)
    assert fl.crooks_check(sp) < 1e-10


@given(seeds)
def test_crooks_qubit_pair(seed):
    rng = np.random.default_rng(seed)
    P, Q = pair_measurements()
    sp = fl.protocol(random_density_matrix(2, rng), P, chn.random_unital_channel(2, rng), Q,
                     rng.dirichlet([1, 1]))
    assert fl.crooks_check(sp) < 1e-10


@given(seeds, dims)
def test_generalized_entropy_identity_and_second_law(seed, d):
    sp = random_protocol(d, np.random.default_rng(seed))
    assert fl.mean_v_entropy_identity(sp).residuals["generalized"] < 1e-9
    assert fl.second_law_check(sp)[2] > -1e-12


@given(seeds, dims)
def test_unital_protocols_are_bistochastic(seed, d):
    sp = random_protocol(d, np.random.default_rng(seed), unital=True, projective=True)
    rep = fl.bistochasticity_and_microreversibility_check(sp)
    assert rep.bistochastic


@given(seeds, st.integers(2, 3), st.booleans(), lams)
def test_feedback_gamma_and_mgf(seed, d, projective_mid, lam):
    s = random_unitary_feedback(d, np.random.default_rng(seed), projective_mid)
    assert fb.feedback_jarzynski(s)[2] < 1e-10
    assert abs(fb.feedback_efficacy(s) - fb.feedback_efficacy(s, "sum")) < 1e-10
    assert fb.feedback_mgf_identity(s, lam)[3] < 1e-9


# subnormal confusion entries carry too few bits for a 1e-10 check, so eps is 0 or a normal float
@given(seeds, st.integers(2, 3), st.one_of(st.just(0.0), st.floats(1e-300, 0.5)))
def test_information_integral(seed, d, eps):
    rng = np.random.default_rng(seed)
    s = random_unitary_feedback(d, rng, projective_mid=True)
    C = (1 - eps) * np.eye(d) + eps / d * np.ones((d, d))
    r = fb.mutual_info_observable_pdf(s, fb.error_model(C, p_j=fb.mid_probabilities(s)))
    if eps > 0:
        assert abs(r.integral - 1) < 1e-10
    else:
        assert abs(r.pseudo_total - 1) < 1e-10


@given(seeds, dims, st.floats(0.05, 5.0))
def test_gibbs_and_relative_entropy(seed, d, beta):
    rng = np.random.default_rng(seed)
    H = random_hermitian(d, rng)
    G = gibbs_state(H, beta)
    assert abs(np.trace(G) - 1) < 1e-12
    rho = random_density_matrix(d, rng)
    assert relative_entropy(rho, G) >= -1e-12
    assert 0 <= von_neumann_entropy(rho) <= np.log(d) + 1e-12


@given(st.floats(-80, 80).filter(lambda w: abs(w) > 1e-6), st.floats(0.05, 5.0))
def test_kms_and_asymmetry(w, beta):
    wc = 8 * np.pi
    g, gm = ame.ohmic_rate(w, beta, wc), ame.ohmic_rate(-w, beta, wc)
    assert g > 0 and gm > 0
    assert abs(g / gm / np.exp(beta * w) - 1) < 1e-10
    assert abs((g - gm) - ame.rate_asymmetry(w, wc)) <= 1e-9 * max(g, gm, 1.0)


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_lindblad_completeness_along_schedule(s, J):
    sp = ame.reference_spec(J=J)
    assert ame.lindblad_ops_at(sp, s * sp.t_f).completeness_residual(sp) < 1e-10


@given(st.floats(0.0, 1.0), st.floats(0.05, 1.0))
def test_dissipator_fixes_instantaneous_gibbs(s, J):
    sp = ame.reference_spec(J=J)
    D = ame.dissipator_at(sp, s * sp.t_f)
    G = ame.gibbs_at(sp, s)
    assert np.max(np.abs(D @ G.reshape(-1))) < 1e-9
    assert np.max(np.abs(np.eye(4).reshape(-1) @ D)) < 1e-12


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=30), seeds)
def test_merge_atoms_conserves_mass(v, seed):
    w = np.random.default_rng(seed).random(len(v))
    d = fl.merge_atoms(v, w)
    assert abs(d.total - w.sum()) < 1e-12
    assert np.all(np.diff(d.v) > 0)

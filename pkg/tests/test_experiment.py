import numpy as np
import pytest
from scipy.interpolate import CubicSpline

from fluxtheo import ame
from fluxtheo import experiment as ex
from fluxtheo import fluctuation as fl
from fluxtheo.quantum_core import SX, SZ, ValidationError, gibbs_probs, random_unitary

OPTS = ame.SolverOptions(ode_tol=1e-6, h_max_frac=0.05)
KSTAR = 2.34e-3


def test_mean_v_of_thermal_final_state():
    sp = ame.reference_spec(J=0.5)
    ep = ex.endpoints(sp)
    assert ex.mean_v(sp, ep.q) == pytest.approx(
        sp.beta * (ep.q @ ep.eps1 - ep.mean_e0) - sp.beta * ep.dF, abs=1e-15)
    # beta (<E>_q - F_1) = S(q) and beta (<E>_p - F_0) = S(p)
    s_p = -np.sum(ep.p * np.log(ep.p))
    s_q = -np.sum(ep.q * np.log(ep.q))
    assert ex.mean_v(sp, ep.q) == pytest.approx(s_q - s_p, abs=1e-12)


def test_mean_v_validation():
    with pytest.raises(ValidationError):
        ex.mean_v(ame.reference_spec(), [0.5, 0.5])


def test_closed_system_scenario():
    beta = 0.8
    H0, H1 = -SX, -SZ
    U = random_unitary(2, np.random.default_rng(2))
    sp = ex.closed_system_scenario(H0, H1, U, beta)
    g_sum, g_closed, res = fl.efficacy_both(sp)
    assert g_closed == pytest.approx(1.0, abs=1e-14)
    assert fl.jarzynski_check(sp)[2] < 1e-14
    # atoms are beta (eps_b(t_f) - eps_a(0) - dF)
    d = fl.forward_pdf(sp)
    dF = -np.log(2 * np.cosh(beta)) / beta + np.log(2 * np.cosh(beta)) / beta
    allowed = {round(beta * (b - a - dF), 10) for a in (-1, 1) for b in (-1, 1)}
    assert {round(v, 10) for v in d.v[d.prob > 0]} <= allowed


def test_experiment_identities_short_anneal():
    sim = ex.simulate(ame.reference_spec(J=0.5, t_f=0.5, kappa=KSTAR), OPTS)
    assert ex.qje_experiment_check(sim)[2] < 1e-10
    assert ex.first_moment_check(sim)[2] < 1e-10
    assert sim.mean_v >= -1e-12


def test_j_zero_symmetry():
    sim = ex.simulate(ame.reference_spec(J=0.0, t_f=0.5, kappa=KSTAR), OPTS)
    f = dict(zip(sim.labels, sim.f))
    assert f["01"] == pytest.approx(f["10"], abs=1e-9)


def test_sweep_helpers():
    assert ex.has_interior_minimum([0, 1, 2], [2.0, 1.0, 3.0])
    assert not ex.has_interior_minimum([0, 1, 2], [1.0, 2.0, 3.0])
    assert ex.is_decreasing([3, 2, 1])
    assert not ex.is_decreasing([3, 3, 1])
    with pytest.raises(ValidationError):
        ex.sweep(ame.reference_spec(), "beta", [1.0])


def test_counts_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    pts = ex.synthetic_points(ame.reference_spec(), [(0.0, 0.5)], KSTAR, shots=1000, rng=rng, options=OPTS)
    path = tmp_path / "counts.csv"
    ex.write_counts_csv(path, pts)
    back = ex.read_counts_csv(path)
    assert len(back) == 1
    assert np.array_equal(back[0].counts, pts[0].counts)
    assert back[0].labels == pts[0].labels


def test_counts_csv_unknown_label(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("J,t_f_us,state_label,count\n0.5,1.0,0x,10\n")
    with pytest.raises(ValidationError):
        ex.read_counts_csv(path)


def test_synthetic_needs_rng():
    with pytest.raises(ValidationError):
        ex.synthetic_points(ame.reference_spec(), [(0.5, 0.5)], KSTAR, shots=10, rng=None, options=OPTS)


def _model(grid, kappas):
    """Cubic spline of <v> in log kappa per design point, from simulated nodes."""
    specs = [ex.with_coupling(ame.reference_spec(), J=J, t_f=tf, kappa=k) for J, tf in grid for k in kappas]
    v = np.array([ex.simulate(s, OPTS).mean_v for s in specs]).reshape(len(grid), len(kappas))
    splines = {g: CubicSpline(np.log(kappas), row) for g, row in zip(grid, v)}
    return lambda J, tf, k: float(splines[(J, tf)](np.log(k)))


def test_single_point_fit_is_flagged():
    grid = [(0.0, 0.5)]
    model = _model(grid, np.geomspace(1e-3, 5e-3, 7))
    pts = ex.synthetic_points(ame.reference_spec(), grid, KSTAR, shots=None, options=OPTS)
    r = ex.fit_kappa(pts, kappa_range=(1e-3, 5e-3), per_decade=6, model=model)
    assert r.underdetermined
    assert r.kappa_hat == pytest.approx(KSTAR, rel=1e-3)


def test_boundary_fit_is_flagged():
    grid = [(0.0, 0.5), (0.02, 1.0)]
    model = _model(grid, np.geomspace(1e-3, 5e-3, 7))
    pts = ex.synthetic_points(ame.reference_spec(), grid, 4.9e-3, shots=None, options=OPTS)
    r = ex.fit_kappa(pts, kappa_range=(1e-3, 3e-3), per_decade=6, model=model)
    assert r.boundary


@pytest.mark.slow
def test_noisy_fit_unbiased_over_seeds():
    grid = [(0.0, 0.5), (0.0, 1.0), (0.02, 1.0)]
    model = _model(grid, np.geomspace(1e-3, 5e-3, 9))
    clean = ex.synthetic_points(ame.reference_spec(), grid, KSTAR, shots=None, options=OPTS)
    ks = []
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        pts = [ex.point_from_counts(p.J, p.t_f, rng.multinomial(10 ** 6, p.f), p.labels) for p in clean]
        ks.append(ex.fit_kappa(pts, kappa_range=(1e-3, 5e-3), per_decade=8, xtol=1e-4, model=model).kappa_hat)
    lk = np.log(np.array(ks) / KSTAR)
    se = lk.std(ddof=1) / np.sqrt(lk.size)
    assert abs(lk.mean()) < 3 * se
    # the spread should match the linearized shot-noise prediction
    sd, _, _ = ex.predicted_log_kappa_sd(ame.reference_spec(), grid, KSTAR, 10 ** 6, OPTS)
    assert 0.5 * sd < lk.std(ddof=1) < 2 * sd

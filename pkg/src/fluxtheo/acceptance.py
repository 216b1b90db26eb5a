"""Acceptance suite shared by the tests and `fluxtheo selftest`.

Each criterion returns a CriterionResult; `tol_scale` multiplies every
tolerance, so a tiny scale forces a controlled failure.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import ame
from . import channels as chn
from . import experiment as ex
from . import feedback as fb
from . import fluctuation as fl
from . import measurements as ms
from .quantum_core import (
    SX,
    SY,
    classical_relative_entropy,
    eig_hermitian,
    gibbs_probs,
    random_density_matrix,
    random_hermitian,
    random_unitary,
)

log = logging.getLogger(__name__)

KAPPA_STAR = 2.34e-3


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    metric: float  # worst observed residual or violation
    tolerance: float
    seconds: float
    time_limit: float | None = None
    details: dict = field(default_factory=dict)

    def line(self) -> str:
        lim = f" (limit {self.time_limit:.0f}s)" if self.time_limit else ""
        note = f" [{self.details['note']}]" if "note" in self.details else ""
        return (f"{'PASS' if self.passed else 'FAIL'} criterion {self.number:2d} {self.name}: "
                f"worst {self.metric:.3e} vs tol {self.tolerance:.1e}, {self.seconds:.1f}s{lim}{note}")

    def to_json(self):
        return {"number": self.number, "name": self.name, "passed": self.passed, "metric": self.metric,
                "tolerance": self.tolerance, "seconds": self.seconds, "time_limit": self.time_limit,
                "details": {k: _plain(v) for k, v in self.details.items()}}


def _plain(v):
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    return v


def _finish(number, name, t0, worst, tol, limit=None, ok=True, **details):
    dt = time.perf_counter() - t0
    passed = bool(ok and worst <= tol and (limit is None or dt < limit))
    if limit is not None and dt >= limit:
        details["note"] = f"over time limit {limit:.0f}s"
    return CriterionResult(number, name, passed, float(worst), float(tol), dt, limit, details)


# random protocol builders

def pair_measurements():
    """Non-projective microreversible qubit pair P = (s+, s-), Q = (sx, sy)/sqrt 2."""
    sp = (SX + 1j * SY) / 2
    sm = (SX - 1j * SY) / 2
    return ms.measurement([sp, sm]), ms.measurement([SX / np.sqrt(2), SY / np.sqrt(2)])


def _basis_measurement(d, rng):
    return ms.projective_from_basis(random_unitary(d, rng))


def measure_prepare_measurement(d, rng):
    """P_a = |phi_a><psi_a| for two random bases; the prepared states sum to 1."""
    Phi, Psi = random_unitary(d, rng), random_unitary(d, rng)
    return ms.measurement(np.einsum("ia,ja->aij", Phi, Psi.conj()))


def unitary_mixture_measurement(d, rng):
    """Q_b = U_b / sqrt(d) with d random unitaries; every Tr[Q_b^dag Q_b] = 1."""
    return ms.measurement([random_unitary(d, rng) / np.sqrt(d) for _ in range(d)])


def random_protocol(d, rng, unital=None, projective=None):
    """Random full-rank rho, channel (unital or not) and P, Q, q.

    P always has prepared states summing to the identity and Q always has
    unit-trace effects, which is the setting where the efficacy sum, its
    closed form and the bounds coincide. Non-projective draws use
    measure-and-prepare P and either kind of Q.
    """
    if unital is None:
        unital = bool(rng.integers(2))
    if projective is None:
        projective = bool(rng.integers(2))
    E = (chn.random_unital_channel(d, rng, int(rng.integers(2, 5))) if unital
         else chn.random_channel(d, rng, int(rng.integers(2, 4))))
    if projective:
        P, Q = _basis_measurement(d, rng), _basis_measurement(d, rng)
    else:
        P = measure_prepare_measurement(d, rng)
        Q = (unitary_mixture_measurement(d, rng) if rng.integers(2)
             else measure_prepare_measurement(d, rng))
    rho = random_density_matrix(d, rng)
    q = rng.dirichlet(np.ones(len(Q)))
    return fl.protocol(rho, P, E, Q, q)


def random_unitary_feedback(d, rng, projective_mid=True):
    rho = random_density_matrix(d, rng)
    P = _basis_measurement(d, rng)
    mid = _basis_measurement(d, rng) if projective_mid else ms.random_measurement(d, 2, rng)
    n = len(mid)
    Ub = [random_unitary(d, rng) for _ in range(n)]
    finals = [_basis_measurement(d, rng) for _ in range(n)]
    qs = [rng.dirichlet(np.ones(d)) for _ in range(n)]
    return fb.unitary_feedback_protocol(rho, P, random_unitary(d, rng), mid, Ub, finals, qs)


def _random_confusion(n, rng):
    C = rng.dirichlet(np.ones(n), size=n).T  # columns are distributions
    return 0.5 * C + 0.5 * np.eye(n)


# criteria 1-6: the fluctuation-theorem toolkit

def crooks(seed=0, quick=False, tol_scale=1.0, **_):
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    n = 20 if quick else 100
    Pq, Qq = pair_measurements()
    worst_proj = worst_pair = 0.0
    for i in range(n):
        d = (2, 3, 4)[i % 3]
        E = chn.random_unital_channel(d, rng, int(rng.integers(2, 5)))
        sp = fl.protocol(random_density_matrix(d, rng), _basis_measurement(d, rng), E,
                         _basis_measurement(d, rng), rng.dirichlet(np.ones(d)))
        worst_proj = max(worst_proj, fl.crooks_check(sp))
        E2 = chn.random_unital_channel(2, rng, int(rng.integers(2, 5)))
        sp2 = fl.protocol(random_density_matrix(2, rng), Pq, E2, Qq, rng.dirichlet(np.ones(2)))
        worst_pair = max(worst_pair, fl.crooks_check(sp2))
    worst = max(worst_proj, worst_pair)
    return _finish(1, "Crooks relation for unital channels", t0, worst, 1e-10 * tol_scale, 30.0,
                   n_channels=n, projective=worst_proj, qubit_pair=worst_pair)


def qje(seed=0, quick=False, tol_scale=1.0, **_):
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed + 1)
    n = 40 if quick else 200
    worst_eff = worst_jar = 0.0
    n_nonunital = 0
    for i in range(n):
        d = (2, 3, 4)[i % 3]
        sp = random_protocol(d, rng, unital=(i % 2 == 0))
        n_nonunital += chn.unitality_residual(sp.channel) > 1e-8
        worst_eff = max(worst_eff, fl.efficacy_both(sp)[2])
        worst_jar = max(worst_jar, fl.jarzynski_check(sp)[2])
    worst = max(worst_eff, worst_jar)
    return _finish(2, "quantum Jarzynski equality <e^-v> = gamma", t0, worst, 1e-10 * tol_scale, 30.0,
                   n_protocols=n, n_nonunital=int(n_nonunital), sum_vs_closed=worst_eff,
                   lhs_vs_gamma=worst_jar)


def mgf(seed=0, quick=False, tol_scale=1.0, **_):
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed + 2)
    n = 10 if quick else 40
    worst_id = worst_cf = 0.0
    for i in range(n):
        d = (2, 3, 4)[i % 3]
        sp = random_protocol(d, rng)
        spp = random_protocol(d, rng, projective=True)
        rp, rq = fl.projective_states(spp)
        dist = fl.forward_pdf(spp)
        for lam in rng.uniform(-2, 2, 10):
            worst_id = max(worst_id, fl.mgf_identity(sp, lam)[2], fl.mgf_identity(spp, lam)[2])
            a = fl.mgf(dist, lam)
            b = fl.mgf_projective_closed_form(rp, rq, spp.channel, lam)
            worst_cf = max(worst_cf, abs(a - b) / max(abs(a), abs(b)))
    ok = worst_id <= 1e-9 * tol_scale and worst_cf <= 1e-10 * tol_scale
    return _finish(3, "MGF relation and projective closed form", t0, worst_id,
                   1e-9 * tol_scale, ok=ok, identity=worst_id, closed_form=worst_cf,
                   note="closed form checked at 1e-10 relative")


def entropy(seed=0, quick=False, tol_scale=1.0, **_):
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed + 3)
    n = 15 if quick else 60
    w = {"generalized": 0.0, "projective_a": 0.0, "projective_b": 0.0, "heat": 0.0, "adiabatic": 0.0}
    for i in range(n):
        d = (2, 3, 4)[i % 3]
        sp = random_protocol(d, rng, projective=False)
        w["generalized"] = max(w["generalized"], fl.mean_v_entropy_identity(sp).residuals["generalized"])
        # thermal readout: Q the eigenbasis of H_f and q its Gibbs weights
        beta = rng.uniform(0.2, 2.0)
        Hf = random_hermitian(d, rng)
        Q = ms.projective_from_hamiltonian(Hf)
        q = gibbs_probs(eig_hermitian(Hf).eigenvalues, beta)
        E = chn.random_channel(d, rng, int(rng.integers(1, 4))) if i % 2 else \
            chn.random_unital_channel(d, rng, 3)
        spt = fl.protocol(random_density_matrix(d, rng), _basis_measurement(d, rng), E, Q, q)
        r = fl.mean_v_entropy_identity(spt, Hf, beta).residuals
        for k in ("generalized", "projective_a", "projective_b", "heat"):
            w[k] = max(w[k], r[k])
        # adiabatic map: E(P_a) = Q_a
        VP, VQ = random_unitary(d, rng), random_unitary(d, rng)
        spa = fl.protocol(random_density_matrix(d, rng), ms.projective_from_basis(VP),
                          chn.unitary_channel(VQ @ VP.conj().T), ms.projective_from_basis(VQ),
                          rng.dirichlet(np.ones(d)))
        p = fl.forward_statistics(spa).p
        w["adiabatic"] = max(w["adiabatic"],
                             abs(fl.forward_pdf(spa).mean() - classical_relative_entropy(p, spa.q)))
    ok = max(w["generalized"], w["projective_a"], w["projective_b"], w["heat"]) <= 1e-9 * tol_scale \
        and w["adiabatic"] <= 1e-10 * tol_scale
    worst = max(w["generalized"], w["projective_a"], w["projective_b"], w["heat"])
    return _finish(4, "entropy decompositions of <v>", t0, worst, 1e-9 * tol_scale, ok=ok, **w,
                   note="adiabatic case checked at 1e-10")


def gamma_bounds(seed=0, quick=False, tol_scale=1.0, **_):
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed + 4)
    n = 40 if quick else 200
    viol = 0.0
    for i in range(n):
        sp = random_protocol((2, 3, 4)[i % 3], rng, unital=(i % 4 == 0))
        g, b, d = fl.gamma_bound(sp)
        viol = max(viol, -g, g - b, b - d)
    one = np.diag([0.0, 1.0]).astype(complex)
    E = chn.constant_channel(one)  # amplitude damping to |1>
    g_sat = float(np.trace(chn.apply_dual(E, one)).real)
    sat = abs(g_sat - 2.0)
    ok = viol <= 1e-12 * tol_scale and sat <= 1e-12 * tol_scale
    return _finish(5, "efficacy bounds and saturation", t0, max(viol, sat), 1e-12 * tol_scale, ok=ok,
                   bound_violation=viol, saturation_error=sat)


def feedback(seed=0, quick=False, tol_scale=1.0, **_):
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed + 5)
    n = 6 if quick else 24
    w = {"gamma_error_free": 0.0, "gamma_classical_error": 0.0, "mi_integral": 0.0,
         "mi_pseudo_total_error_free": 0.0, "mgf_three_way": 0.0}
    for i in range(n):
        d = (2, 3)[i % 2]
        projective_mid = i % 3 != 2
        s = random_unitary_feedback(d, rng, projective_mid)
        rq = [s.rho_q(j) for j in range(s.n_branches)]
        Ub = [m.kraus[0] for m in s.branch_maps]
        g = fb.unitary_feedback_gamma(s.mid, Ub, rq)
        w["gamma_error_free"] = max(w["gamma_error_free"], abs(fb.feedback_efficacy(s) - g),
                                    abs(fb.feedback_efficacy(s, "sum") - g))
        pj = fb.mid_probabilities(s)
        em = fb.error_model(_random_confusion(len(s.mid), rng), p_j=pj)
        se = fb.with_error_model(s, em)
        gc = fb.classical_error_gamma(s.mid, Ub, rq, em.confusion)
        w["gamma_classical_error"] = max(w["gamma_classical_error"], abs(fb.feedback_efficacy(se) - gc))
        if projective_mid:
            # the information integral is 1 when sum_j Q_j Q_j^dag = 1
            r = fb.mutual_info_observable_pdf(s, em)
            w["mi_integral"] = max(w["mi_integral"], abs(r.integral - 1))
            r0 = fb.mutual_info_observable_pdf(s, fb.error_model(np.eye(len(s.mid)), p_j=pj))
            w["mi_pseudo_total_error_free"] = max(w["mi_pseudo_total_error_free"], abs(r0.pseudo_total - 1))
        for lam in rng.uniform(-2, 2, 5):
            w["mgf_three_way"] = max(w["mgf_three_way"], fb.feedback_mgf_identity(s, lam)[3],
                                     fb.feedback_mgf_identity(se, lam)[3])
    ok = max(w["gamma_error_free"], w["gamma_classical_error"], w["mi_integral"],
             w["mi_pseudo_total_error_free"]) <= 1e-10 * tol_scale and w["mgf_three_way"] <= 1e-9 * tol_scale
    worst = max(w["gamma_error_free"], w["gamma_classical_error"], w["mi_integral"],
                w["mi_pseudo_total_error_free"])
    return _finish(6, "feedback efficacy, information integral, MGF", t0, worst, 1e-10 * tol_scale, ok=ok,
                   **w, note="three-way MGF checked at 1e-9")


# criteria 7-10: the annealing master equation

def _opts(ode_tol):
    return ame.SolverOptions(ode_tol=ode_tol)


def me_consistency(seed=0, quick=False, tol_scale=1.0, ode_tol=1e-8, threads=None, **_):
    t0 = time.perf_counter()
    kappas = [KAPPA_STAR] if quick else list(np.geomspace(1e-4, 1e-2, 5))
    tol = ode_tol if not quick else max(ode_tol, 1e-6)
    rows = ex.sweep(ame.reference_spec(), "kappa", kappas, _opts(tol), threads)
    qje_res = max(r["qje_residual"] for r in rows)
    mom_res = max(r["moment_residual"] for r in rows)
    gam = [r["gamma"] for r in rows]
    return _finish(7, "master-equation QJE and first-moment identities", t0, max(qje_res, mom_res),
                   1e-6 * tol_scale, None if quick else 600.0, kappa=kappas, gamma=gam,
                   qje_residual=qje_res, moment_residual=mom_res, ode_tol=tol)


SHAPE_J = tuple(np.round(np.linspace(0.1, 1.0, 10), 10))
SHAPE_TF = (1.0, 2.0, 3.0, 5.0, 8.0, 12.0, 16.0, 20.0)
SHAPE_ODE_TOL = 1e-6


def curve_shapes(seed=0, quick=False, tol_scale=1.0, ode_tol=None, threads=None, **_):
    t0 = time.perf_counter()
    tol = SHAPE_ODE_TOL if ode_tol is None else ode_tol
    tmpl = ame.reference_spec(kappa=KAPPA_STAR)
    Js = SHAPE_J[::3] if quick else SHAPE_J
    rj = ex.sweep(tmpl, "J", Js, _opts(tol), threads)
    vj = [r["mean_v"] for r in rj]
    min_ok = ex.has_interior_minimum(Js, vj)
    tfs = SHAPE_TF[:4] if quick else SHAPE_TF
    rt = ex.sweep(tmpl, "t_f", tfs, _opts(tol), threads)
    vt = [r["mean_v"] for r in rt]
    mono = ex.is_decreasing(vt)
    # the qualitative checks have no residual; report the smallest margin
    margin_j = min(vj[0], vj[-1]) - min(vj)
    margin_t = float(np.min(-np.diff(vt)))
    return _finish(8, "<v> minimum in J and decrease in t_f", t0, 0.0 if (min_ok and mono) else 1.0, 0.0,
                   ok=min_ok and mono, J=list(Js), mean_v_J=vj, t_f=list(tfs), mean_v_t_f=vt,
                   interior_minimum=min_ok, decreasing=mono, margin_J=margin_j, margin_t_f=margin_t)


# uncoupled qubits and sub-microsecond anneals carry the most kappa information per shot
FIT_GRID = ((0.0, 0.3), (0.0, 0.4), (0.0, 0.5), (0.0, 0.6), (0.0, 0.7), (0.0, 1.0))
FIT_ODE_TOL = 1e-6
FIT_H_MAX_FRAC = 0.05


def kappa_fit(seed=0, quick=False, tol_scale=1.0, ode_tol=None, threads=None, **_):
    t0 = time.perf_counter()
    tol = FIT_ODE_TOL if ode_tol is None else ode_tol
    opts = ame.SolverOptions(ode_tol=tol, h_max_frac=FIT_H_MAX_FRAC)
    tmpl = ame.reference_spec()
    rng = np.random.default_rng(seed + 9)
    grid = FIT_GRID
    clean = ex.synthetic_points(tmpl, grid, KAPPA_STAR, shots=None, options=opts, threads=threads)
    noisy = ex.synthetic_points(tmpl, grid, KAPPA_STAR, shots=10 ** 6, rng=rng, options=opts, threads=threads)
    cache = {}
    f0 = ex.fit_kappa(clean, tmpl, options=opts, threads=threads, cache=cache)
    f1 = ex.fit_kappa(noisy, tmpl, options=opts, threads=threads, cache=cache)
    sd, sens, sds = ex.predicted_log_kappa_sd(tmpl, grid, KAPPA_STAR, 10 ** 6, opts, threads)
    e0 = abs(f0.kappa_hat / KAPPA_STAR - 1)
    e1 = abs(f1.kappa_hat / KAPPA_STAR - 1)
    ok = e0 <= 1e-3 * tol_scale and e1 <= 0.05 * tol_scale and not (f0.boundary or f1.boundary)
    return _finish(9, "kappa recovery from synthetic data", t0, e1, 0.05 * tol_scale, 1800.0, ok=ok,
                   kappa_hat_noiseless=f0.kappa_hat, kappa_hat_noisy=f1.kappa_hat,
                   rel_error_noiseless=e0, rel_error_noisy=e1, n_points=len(grid), ode_tol=tol,
                   predicted_rel_sd=sd, sensitivities=sens, shot_sd=sds,
                   note=f"noiseless error {e0:.1e} vs 1e-3; predicted shot-noise sd {sd:.1%}")


def solver_properties(seed=0, quick=False, tol_scale=1.0, ode_tol=1e-8, threads=None, **_):
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed + 10)
    sp0 = ame.reference_spec(kappa=KAPPA_STAR)
    w = rng.uniform(-60, 60, 200)
    w = w[np.abs(w) > 1e-6]
    kms = float(np.max(np.abs(ame.ohmic_rate(w, sp0.beta, sp0.omega_c) /
                              ame.ohmic_rate(-w, sp0.beta, sp0.omega_c) / np.exp(sp0.beta * w) - 1)))
    tol = ode_tol if not quick else max(ode_tol, 1e-6)
    n_runs = 1 if quick else 3
    trace_res = pos = herm = 0.0
    for t_f in rng.uniform(0.5, 5.0, n_runs):
        spec = ame.with_params(sp0, t_f=float(t_f))
        res = ame.anneal(spec, _opts(tol))
        trace_res = max(trace_res, res.trace_residual)
        for _ in range(3):
            X = random_density_matrix(spec.dim, rng)
            Y = res.apply(X)
            herm = max(herm, float(np.max(np.abs(Y - Y.conj().T))))
            pos = max(pos, -float(np.min(np.linalg.eigvalsh(0.5 * (Y + Y.conj().T)))))
        A = rng.normal(size=(spec.dim, spec.dim)) + 1j * rng.normal(size=(spec.dim, spec.dim))
        trace_res = max(trace_res, abs(np.trace(res.apply(A)) - np.trace(A)))
    s = rng.uniform(0.05, 0.95, 4)
    wit_pos = min(np.linalg.norm(ame.non_unitality_witness(sp0, float(x) * sp0.t_f), 2) for x in s)
    wit_k0 = max(np.linalg.norm(ame.non_unitality_witness(ame.with_params(sp0, kappa=0.0), float(x) * sp0.t_f), 2)
                 for x in s)
    wit_b0 = max(np.linalg.norm(ame.non_unitality_witness(ame.with_params(sp0, beta=0.0), float(x) * sp0.t_f), 2)
                 for x in s)
    checks = {"kms": kms <= 1e-10 * tol_scale, "trace": trace_res <= tol * tol_scale,
              "hermiticity": herm <= tol * tol_scale, "positivity": pos <= 1e-7 * tol_scale,
              "witness_kappa0": wit_k0 <= 1e-10 * tol_scale, "witness_positive": wit_pos > 0,
              "witness_beta0": wit_b0 <= 1e-10 * tol_scale}
    failed = [k for k, v in checks.items() if not v]
    details = dict(kms=kms, trace_residual=trace_res, hermiticity=herm, negativity=pos,
                   witness_min_norm=wit_pos, witness_kappa0=wit_k0, witness_beta0=wit_b0,
                   failed=failed, ode_tol=tol)
    if failed:
        details["note"] = "failed: " + ", ".join(failed)
    worst = max(kms, trace_res, herm, pos, wit_k0, wit_b0)
    return _finish(10, "KMS, trace, positivity, non-unitality witness", t0, worst, 1e-7 * tol_scale,
                   ok=not failed, **details)


CRITERIA = {1: crooks, 2: qje, 3: mgf, 4: entropy, 5: gamma_bounds, 6: feedback,
            7: me_consistency, 8: curve_shapes, 9: kappa_fit, 10: solver_properties}
QUICK = (1, 2, 3, 4, 5, 6, 10)


def run(numbers=None, quick=False, seed=0, tol_scale=1.0, ode_tol=None, threads=None, echo=print):
    numbers = (QUICK if quick else tuple(CRITERIA)) if numbers is None else tuple(numbers)
    out = []
    for n in numbers:
        kw = dict(seed=seed, quick=quick, tol_scale=tol_scale, threads=threads)
        if ode_tol is not None:
            kw["ode_tol"] = ode_tol
        r = CRITERIA[n](**kw)
        if echo is not None:
            echo(r.line())
        out.append(r)
    return out

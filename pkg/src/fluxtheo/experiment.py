"""The two-qubit annealing experiment: <v>, the efficacy checks and the kappa fit."""
from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import ame
from . import channels as chn
from .fluctuation import ProtocolSpec, protocol
from .measurements import projective_from_hamiltonian
from .quantum_core import (
    DomainError,
    ValidationError,
    eig_hermitian,
    free_energy,
    gibbs_probs,
    relative_entropy,
    von_neumann_entropy,
)

log = logging.getLogger(__name__)


@dataclass
class ExperimentPoint:
    J: float
    t_f: float  # microseconds
    f: np.ndarray  # final-state distribution in the readout basis
    counts: np.ndarray | None = None
    labels: tuple | None = None

    def __post_init__(self):
        self.f = np.asarray(self.f, float)
        if self.f.ndim != 1 or np.any(self.f < -1e-12) or abs(self.f.sum() - 1) > 1e-9:
            raise ValidationError(f"f must be a probability vector, got sum {self.f.sum()!r}")
        if self.counts is not None:
            self.counts = np.asarray(self.counts)
            if self.counts.shape != self.f.shape or np.any(self.counts < 0):
                raise ValidationError("counts must be non-negative and match f")


def point_from_counts(J, t_f, counts, labels=None) -> ExperimentPoint:
    c = np.asarray(counts, np.int64)
    if c.sum() <= 0:
        raise ValidationError("no counts")
    return ExperimentPoint(float(J), float(t_f), c / c.sum(), c, None if labels is None else tuple(labels))


def with_coupling(spec: ame.AnnealSpec, J=None, t_f=None, kappa=None) -> ame.AnnealSpec:
    """Spec with every coupling set to J and/or a new anneal time or bath coupling."""
    kw = {}
    if J is not None:
        kw["J"] = tuple((i, j, float(J)) for i, j, _ in spec.J)
    if t_f is not None:
        kw["t_f"] = float(t_f)
    if kappa is not None:
        kw["kappa"] = float(kappa)
    return ame.with_params(spec, **kw)


# endpoint thermodynamics

@dataclass
class Endpoints:
    eps0: np.ndarray  # H(0) levels, ascending
    p: np.ndarray  # initial Gibbs populations
    eps1: np.ndarray  # readout levels at t_f
    q: np.ndarray  # Gibbs populations at t_f
    dF: float
    beta: float
    mean_e0: float


def endpoints(spec: ame.AnnealSpec) -> Endpoints:
    if not spec.beta > 0:
        raise DomainError("the experiment needs beta > 0")
    H0 = ame._h_real(spec, 0.0)
    H1 = ame._h_real(spec, 1.0)
    eps0 = eig_hermitian(H0).eigenvalues
    eps1, _ = ame.final_basis(spec)
    p = gibbs_probs(eps0, spec.beta)
    q = gibbs_probs(eps1, spec.beta)
    dF = free_energy(H1, spec.beta) - free_energy(H0, spec.beta)
    return Endpoints(eps0, p, np.asarray(eps1, float), q, dF, spec.beta, float(p @ eps0))


def mean_v_levels(beta, eps1, f, mean_e0, dF) -> float:
    """beta (sum_b eps_b(t_f) f_b - <eps(0)> - dF)."""
    eps1, f = np.asarray(eps1, float), np.asarray(f, float)
    if eps1.shape != f.shape:
        raise ValidationError(f"f has {f.size} entries but there are {eps1.size} final levels")
    return float(beta * (eps1 @ f - mean_e0 - dF))


def mean_v(spec: ame.AnnealSpec, f) -> float:
    """<v> from a final-state distribution f over the readout levels of spec."""
    ep = endpoints(spec)
    return mean_v_levels(ep.beta, ep.eps1, f, ep.mean_e0, ep.dF)


# simulation

@dataclass
class Simulation:
    spec: ame.AnnealSpec
    stats: ame.TransitionStats
    ends: Endpoints
    f: np.ndarray
    rho_tf: np.ndarray  # E(rho_G(0)) in the lab basis
    mean_v: float
    options: ame.SolverOptions | None = None

    @property
    def labels(self):
        return self.stats.labels


def simulate(spec: ame.AnnealSpec, options=None) -> Simulation:
    st = ame.induced_channel_statistics(spec, options)
    ep = endpoints(spec)
    f = st.M @ ep.p
    rho0 = ame.gibbs_at(spec, 0.0)
    rho_tf = st.result.apply(rho0)
    rho_tf = 0.5 * (rho_tf + rho_tf.conj().T)
    mv = mean_v_levels(ep.beta, ep.eps1, f, ep.mean_e0, ep.dF)
    return Simulation(spec, st, ep, f, rho_tf, mv, options)


def _sim(spec_or_sim, options=None) -> Simulation:
    return spec_or_sim if isinstance(spec_or_sim, Simulation) else simulate(spec_or_sim, options)


def qje_experiment_check(spec_or_sim, options=None):
    """(<e^{-beta(dE - dF)}>, Tr[E*(rho_G(t_f))], residual)."""
    sim = _sim(spec_or_sim, options)
    ep = sim.ends
    v = ep.beta * (ep.eps1[:, None] - ep.eps0[None, :] - ep.dF)  # [b, a]
    lhs = float(np.sum(sim.stats.M * ep.p[None, :] * np.exp(-v)))
    rho_q = sim.stats.V1 @ np.diag(ep.q) @ sim.stats.V1.T
    rhs = float(np.trace(sim.stats.result.apply_dual(rho_q)).real)
    return lhs, rhs, abs(lhs - rhs)


def first_moment_check(spec_or_sim, options=None):
    """(beta(<dE> - dF), S(rho(t_f)||rho_G(t_f)) + S(rho(t_f)) - S(rho_G(0)), residual)."""
    sim = _sim(spec_or_sim, options)
    spec = sim.spec
    lhs = sim.mean_v
    sig = ame.gibbs_at(spec, 1.0)
    rho0 = ame.gibbs_at(spec, 0.0)
    rhs = relative_entropy(sim.rho_tf, sig) + von_neumann_entropy(sim.rho_tf) - von_neumann_entropy(rho0)
    return lhs, float(rhs), abs(lhs - rhs)


def efficacy(spec_or_sim, options=None) -> float:
    return qje_experiment_check(spec_or_sim, options)[1]


# sweeps

def _threads(threads):
    if threads is None:
        return os.cpu_count() or 1
    return max(1, int(threads))


def _pmap(fn, items, threads=None):
    items = list(items)
    n = min(_threads(threads), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(n) as ex:
        return list(ex.map(fn, items))


def _sweep_row(args):
    spec, options, key, val = args
    sim = simulate(spec, options)
    lhs, rhs, res = qje_experiment_check(sim)
    m_l, m_r, m_res = first_moment_check(sim)
    return {key: val, "J": spec.J[0][2] if spec.J else 0.0, "t_f_us": spec.t_f, "kappa": spec.kappa,
            "mean_v": sim.mean_v, "qje_lhs": lhs, "gamma": rhs, "qje_residual": res,
            "moment_rhs": m_r, "moment_residual": m_res, "n_steps": sim.stats.result.n_steps,
            **{f"f_{lab}": x for lab, x in zip(sim.labels, sim.f)}}


def sweep(template: ame.AnnealSpec, key, values, options=None, threads=None):
    """Rows of <v>, gamma and the identity residuals with one of J, t_f, kappa varied."""
    if key not in ("J", "t_f", "kappa"):
        raise ValidationError(f"cannot sweep {key!r}; use J, t_f or kappa")
    jobs = [(with_coupling(template, **{key: v}), options, key, float(v)) for v in values]
    return _pmap(_sweep_row, jobs, threads)


def has_interior_minimum(x, y) -> bool:
    """Strict interior minimum of y over the sampled x."""
    y = np.asarray(y, float)
    k = int(np.argmin(y))
    return 0 < k < y.size - 1 and y[k] < y[0] and y[k] < y[-1]


def is_decreasing(y) -> bool:
    return bool(np.all(np.diff(np.asarray(y, float)) < 0))


# synthetic data and CSV import

def synthetic_points(template, grid, kappa, shots=10 ** 6, rng=None, options=None, threads=None):
    """ExperimentPoints simulated at kappa; multinomial counts when shots is not None."""
    specs = [with_coupling(template, J=J, t_f=tf, kappa=kappa) for J, tf in grid]
    sims = _pmap(_sim_job, [(s, options) for s in specs], threads)
    pts = []
    for (J, tf), sim in zip(grid, sims):
        f = np.clip(sim.f, 0.0, None)
        f = f / f.sum()
        if shots is None:
            pts.append(ExperimentPoint(float(J), float(tf), f, None, tuple(sim.labels)))
        else:
            if rng is None:
                raise ValidationError("sampling needs an rng (seeded)")
            pts.append(point_from_counts(J, tf, rng.multinomial(int(shots), f), sim.labels))
    return pts


def _sim_job(args):
    return simulate(*args)


def read_counts_csv(path, template=None) -> list:
    """Rows J, t_f_us, state_label, count; labels are bit strings of the readout basis."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    need = {"J", "t_f_us", "state_label", "count"}
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    if not need <= set(rows[0]):
        raise ValidationError(f"{path}: columns {sorted(need)} required")
    template = ame.reference_spec() if template is None else template
    groups = {}
    for r in rows:
        key = (float(r["J"]), float(r["t_f_us"]))
        groups.setdefault(key, {})
        lab = r["state_label"].strip()
        groups[key][lab] = groups[key].get(lab, 0) + int(r["count"])
    pts = []
    for (J, tf), cnt in groups.items():
        spec = with_coupling(template, J=J, t_f=tf)
        _, V1 = ame.final_basis(spec)
        labels = ame.basis_labels(spec, V1)
        unknown = set(cnt) - set(labels)
        if unknown:
            raise ValidationError(f"{path}: unknown state labels {sorted(unknown)} (expected {labels})")
        pts.append(point_from_counts(J, tf, [cnt.get(lab, 0) for lab in labels], labels))
    return pts


def write_counts_csv(path, points):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["J", "t_f_us", "state_label", "count"])
        for p in points:
            if p.counts is None:
                raise ValidationError("points carry no counts")
            for lab, c in zip(p.labels, p.counts):
                w.writerow([repr(p.J), repr(p.t_f), lab, int(c)])


# kappa fit

@dataclass
class FitResult:
    kappa_hat: float
    msd_curve: list  # (kappa, msd) in evaluation order
    msd_min: float
    converged: bool
    boundary: bool
    underdetermined: bool
    n_evals: int
    settings: dict = field(default_factory=dict)

    def to_json(self):
        return {"kappa_hat": self.kappa_hat, "msd_min": self.msd_min,
                "msd_curve": [[k, m] for k, m in self.msd_curve],
                "converged": self.converged, "boundary": self.boundary,
                "underdetermined": self.underdetermined, "n_evals": self.n_evals,
                "settings": self.settings}


def _mean_v_job(args):
    spec, options = args
    return simulate(spec, options).mean_v


def fit_kappa(points, template=None, kappa_range=(1e-4, 1e-2), options=None, per_decade=11,
              xtol=1e-5, threads=None, cache=None, model=None) -> FitResult:
    """Minimize MSD(kappa) = mean_i (<v>_ex,i - <v(kappa)>_th,i)^2 over log kappa.

    A log-spaced pre-scan brackets the minimum, then a bounded scalar search
    (golden section with parabolic steps) refines it to xtol in log kappa.
    `cache` maps (J, t_f, kappa) to the simulated <v> and may be shared
    between fits with the same template and options. `model(J, t_f, kappa)`
    replaces the simulator, e.g. with an interpolated table.
    """
    points = list(points)
    if not points:
        raise ValidationError("fit needs at least one data point")
    lo, hi = (float(x) for x in kappa_range)
    if not (0 < lo < hi):
        raise ValidationError(f"kappa range must satisfy 0 < lo < hi, got {kappa_range}")
    template = ame.reference_spec() if template is None else template
    v_ex = np.array([mean_v(with_coupling(template, J=p.J, t_f=p.t_f), p.f) for p in points])
    curve = []
    seen = {}
    table = {} if cache is None else cache

    def msd(logk):
        k = float(np.exp(logk))
        if k not in seen:
            keys = [(p.J, p.t_f, k) for p in points]
            todo = [key for key in dict.fromkeys(keys) if key not in table]
            if model is None:
                jobs = [(with_coupling(template, J=J, t_f=tf, kappa=kk), options) for J, tf, kk in todo]
                table.update(zip(todo, _pmap(_mean_v_job, jobs, threads)))
            else:
                table.update((key, float(model(*key))) for key in todo)
            v_th = np.array([table[key] for key in keys])
            seen[k] = float(np.mean((v_ex - v_th) ** 2))
            curve.append((k, seen[k]))
            log.info("fit: kappa=%.6e msd=%.6e", k, seen[k])
        return seen[k]

    n = max(2, int(np.ceil(per_decade * np.log10(hi / lo))) + 1)
    grid = np.linspace(np.log(lo), np.log(hi), n)
    vals = np.array([msd(g) for g in grid])
    k = int(np.argmin(vals))
    boundary = k in (0, n - 1)
    a, b = grid[max(k - 1, 0)], grid[min(k + 1, n - 1)]
    res = optimize.minimize_scalar(msd, bounds=(a, b), method="bounded",
                                   options={"xatol": xtol, "maxiter": 200})
    best = min(seen.items(), key=lambda kv: kv[1])
    kappa_hat = best[0]
    if boundary:
        log.warning("fit: minimum on the edge of the kappa range")
    underdetermined = len(points) < 2
    if underdetermined:
        log.warning("fit: a single point leaves kappa under-determined")
    settings = {"kappa_range": [lo, hi], "per_decade": per_decade, "xtol_log": xtol,
                "omega_c": template.omega_c, "beta": template.beta,
                "ode_tol": (options or ame.SolverOptions()).ode_tol, "n_points": len(points)}
    return FitResult(kappa_hat, curve, best[1], bool(res.success), boundary, underdetermined,
                     len(curve), settings)


def predicted_log_kappa_sd(template, grid, kappa, shots=10 ** 6, options=None, threads=None,
                           rel_step=0.05):
    """Linearized std of log kappa_hat for the unweighted MSD fit.

    With sensitivities s_i = d<v>_i/dln kappa and shot variances
    var_i = beta^2 Var_f(eps_b(t_f)) / shots, the least-squares estimate has
    var(ln kappa_hat) = sum s_i^2 var_i / (sum s_i^2)^2.
    """
    ks = (kappa * np.exp(-rel_step), kappa, kappa * np.exp(rel_step))
    specs = [with_coupling(template, J=J, t_f=tf, kappa=k) for J, tf in grid for k in ks]
    sims = _pmap(_sim_job, [(s, options) for s in specs], threads)
    s2 = sv = 0.0
    sens, sds = [], []
    for i in range(len(grid)):
        lo, mid, hi = sims[3 * i: 3 * i + 3]
        s = (hi.mean_v - lo.mean_v) / (2 * rel_step)
        f = np.clip(mid.f, 0.0, None)
        f = f / f.sum()
        e = mid.ends.eps1
        var = mid.ends.beta ** 2 * float(f @ e ** 2 - (f @ e) ** 2) / shots
        s2 += s * s
        sv += s * s * var
        sens.append(float(s))
        sds.append(float(np.sqrt(var)))
    return float(np.sqrt(sv) / s2), sens, sds


# closed-system scenario

def closed_system_scenario(H0, H1, unitary, beta) -> ProtocolSpec:
    """Gibbs start, energy measurements at both ends, q Gibbs at t_f.

    With the LOG_PQ observable, v = beta (eps_b(t_f) - eps_a(0) - dF).
    """
    H0, H1 = np.asarray(H0, complex), np.asarray(H1, complex)
    ch = unitary if isinstance(unitary, chn.CPMap) else chn.unitary_channel(np.asarray(unitary, complex))
    if not beta > 0:
        raise DomainError("the closed-system scenario needs beta > 0")
    P = projective_from_hamiltonian(H0)
    Q = projective_from_hamiltonian(H1)
    q = gibbs_probs(eig_hermitian(H1).eigenvalues, beta)
    p = gibbs_probs(eig_hermitian(H0).eigenvalues, beta)
    rho = np.einsum("a,aij->ij", p, P.effects())
    return protocol(rho, P, ch, Q, q)

"""Forward/reverse protocol statistics and the fluctuation relations built on them."""
from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import channels as chn
from .measurements import (
    Measurement,
    PreparedEnsemble,
    build_reverse_measurements,
    check_microreversible,
    measure_prepare,
    born_probabilities,
)
from .quantum_core import (
    TOL,
    DomainError,
    ValidationError,
    as_density_matrix,
    dag,
    logm_pd,
    operator_norm,
    psd_power,
    relative_entropy,
    shannon_entropy,
    classical_relative_entropy,
    trace_norm,
    von_neumann_entropy,
)


class VChoice(enum.Enum):
    LOG_PQ = "log_pq"  # ln(p_a / q_b)
    LOG_COND_Q = "log_cond_q"  # ln(p_{b|a} / q_b)
    LOG_COND_F = "log_cond_f"  # ln(p_{b|a} / f_b)


@dataclass(frozen=True, eq=False)
class ProtocolSpec:
    rho: np.ndarray
    P: Measurement
    channel: chn.Channel
    Q: Measurement
    q: np.ndarray

    @property
    def dim(self):
        return self.rho.shape[0]

    def rho_q(self):
        """Virtual final state sum_b q_b Q_b^dag Q_b."""
        return np.einsum("b,bij->ij", self.q, self.Q.effects())


def protocol(rho, P, channel, Q, q) -> ProtocolSpec:
    rho = as_density_matrix(rho)
    q = np.asarray(q, float)
    d = rho.shape[0]
    for name, obj in (("P", P), ("channel", channel), ("Q", Q)):
        if obj.dim != d:
            raise ValidationError(f"{name} has dimension {obj.dim}, state has {d}")
    if q.shape != (len(Q),):
        raise ValidationError(f"q has {q.size} entries but Q has {len(Q)} outcomes")
    if np.any(q <= 0):
        raise ValidationError(f"q must be strictly positive (outcome {int(np.argmin(q))})")
    if abs(q.sum() - 1) > 1e-10:
        raise ValidationError(f"q sums to {q.sum()!r}")
    return ProtocolSpec(rho, P, channel, Q, q)


@dataclass(frozen=True, eq=False)
class ObservableDistribution:
    v: np.ndarray
    prob: np.ndarray
    normalized: bool = True

    @property
    def total(self) -> float:
        return float(self.prob.sum())

    def mean(self) -> float:
        return float(self.v @ self.prob / (self.total if self.normalized else 1.0))

    def __len__(self):
        return self.v.size


def merge_atoms(v, w, normalized=True, tol=None) -> ObservableDistribution:
    """Sort atoms and merge neighbours closer than v_merge_tol."""
    tol = TOL.v_merge if tol is None else tol
    v = np.asarray(v, float).ravel()
    w = np.asarray(w, float).ravel()
    if v.size == 0:
        return ObservableDistribution(v, w, normalized)
    order = np.argsort(v, kind="stable")
    v, w = v[order], w[order]
    starts = np.concatenate([[True], np.diff(v) > tol])
    idx = np.cumsum(starts) - 1
    wsum = np.bincount(idx, weights=w)
    # weighted location, falling back to the first member for zero weight
    vsum = np.bincount(idx, weights=v * w)
    first = v[starts]
    vm = np.where(wsum > 0, vsum / np.where(wsum > 0, wsum, 1), first)
    return ObservableDistribution(vm, wsum, normalized)


@dataclass(frozen=True, eq=False)
class ForwardStats:
    ensemble: PreparedEnsemble
    M: np.ndarray  # M[b, a] = p_{b|a}
    f: np.ndarray
    f_closed: np.ndarray

    @property
    def p(self):
        return self.ensemble.probs

    @property
    def joint(self):
        return self.M * self.p[None, :]


def forward_statistics(spec: ProtocolSpec) -> ForwardStats:
    ens = measure_prepare(spec.P, spec.rho)
    eff = spec.Q.effects()
    M = np.zeros((len(spec.Q), len(spec.P)))
    for a, s in enumerate(ens.states):
        if s is not None:
            M[:, a] = np.einsum("bij,ji->b", eff, chn.apply(spec.channel, s)).real
    f = M @ ens.probs
    rho_p = np.einsum("a,aij->ij", ens.probs, np.array(
        [s if s is not None else np.zeros_like(spec.rho) for s in ens.states]))
    f_closed = np.einsum("bij,ji->b", eff, chn.apply(spec.channel, rho_p)).real
    return ForwardStats(ens, M, f, f_closed)


@dataclass(frozen=True)
class Atoms:
    alpha: np.ndarray
    beta: np.ndarray
    V: np.ndarray
    weight: np.ndarray  # forward joint probability


def observable_atoms(spec: ProtocolSpec, choice=VChoice.LOG_PQ, stats=None) -> Atoms:
    choice = VChoice(choice)
    st = forward_statistics(spec) if stats is None else stats
    p, M, f, q = st.p, st.M, st.f, spec.q
    floor = TOL.p_floor
    nb, na = M.shape
    B, A = np.meshgrid(np.arange(nb), np.arange(na), indexing="ij")
    supp_a = p > floor
    if choice is VChoice.LOG_PQ:
        mask = np.broadcast_to(supp_a[None, :], M.shape)
        with np.errstate(divide="ignore"):
            V = np.log(p)[None, :] - np.log(q)[:, None]
    else:
        mask = supp_a[None, :] & (M > floor)
        denom = q if choice is VChoice.LOG_COND_Q else f
        with np.errstate(divide="ignore", invalid="ignore"):
            V = np.log(np.where(M > 0, M, 1.0)) - np.log(denom)[:, None]
    V = np.where(mask, V, 0.0)
    if not np.all(np.isfinite(V[mask])):
        bad = np.argwhere(mask & ~np.isfinite(V))[0]
        raise DomainError(f"observable undefined at outcome (alpha={bad[1]}, beta={bad[0]})")
    return Atoms(A[mask], B[mask], V[mask], (M * p[None, :])[mask])


def forward_pdf(spec, choice=VChoice.LOG_PQ) -> ObservableDistribution:
    at = observable_atoms(spec, choice)
    return merge_atoms(at.V, at.weight, normalized=True)


def _reverse_weights(spec, at: Atoms, choice):
    """Tr[rho_a E*(Q_b^dag Q_b)] p_a e^{-V} through the dual map."""
    ens = measure_prepare(spec.P, spec.rho)
    dm = chn.dual(spec.channel)
    eff = spec.Q.effects()
    Estar = np.stack([chn.apply(dm, e) for e in eff])
    w = np.empty(at.V.size)
    for k, (a, b) in enumerate(zip(at.alpha, at.beta)):
        tr = np.trace(ens.states[a] @ Estar[b]).real
        if VChoice(choice) is VChoice.LOG_PQ:
            w[k] = tr * spec.q[b]
        else:
            w[k] = tr * ens.probs[a] * np.exp(-at.V[k])
    return w


def reverse_quantity(spec, choice=VChoice.LOG_PQ) -> ObservableDistribution:
    """Pseudo-distribution F_{E*} with atoms at -V; total mass gamma for LOG_PQ."""
    at = observable_atoms(spec, choice)
    return merge_atoms(-at.V, _reverse_weights(spec, at, choice), normalized=False)


def pointwise_reverse_residual(spec, choice=VChoice.LOG_PQ) -> float:
    """max |P_E(v) e^{-v} - F_{E*}(-v)| over atoms (forward via E, reverse via E*)."""
    at = observable_atoms(spec, choice)
    lhs = merge_atoms(at.V, at.weight * np.exp(-at.V), normalized=False)
    rhs = merge_atoms(at.V, _reverse_weights(spec, at, choice), normalized=False)
    return float(np.max(np.abs(lhs.prob - rhs.prob)))


def efficacy(spec, method="sum") -> float:
    """gamma by the double sum over prepared states, or 'closed' = Tr[E*(rho_q)]."""
    if method == "closed":
        return float(np.trace(chn.apply_dual(spec.channel, spec.rho_q())).real)
    ens = measure_prepare(spec.P, spec.rho)
    eff = spec.Q.effects()
    tot = 0.0
    for s in ens.states:
        if s is not None:
            Es = chn.apply(spec.channel, s)
            tot += float(np.einsum("b,bij,ji->", spec.q, eff, Es).real)
    return tot


def efficacy_both(spec):
    g_sum = efficacy(spec, "sum")
    g_closed = efficacy(spec, "closed")
    return g_sum, g_closed, abs(g_sum - g_closed)


def jarzynski_check(spec, choice=VChoice.LOG_PQ):
    """(<e^{-v}>, rhs, residual); rhs is gamma for LOG_PQ and the supported mass of p_a q_b otherwise."""
    choice = VChoice(choice)
    at = observable_atoms(spec, choice)
    lhs = float(np.sum(at.weight * np.exp(-at.V)))
    if choice is VChoice.LOG_PQ:
        rhs = efficacy(spec)
    elif choice is VChoice.LOG_COND_Q:
        st = forward_statistics(spec)
        # sum over supported pairs of p_a q_b; equals 1 with full support
        rhs = float(np.sum(st.p[at.alpha] * spec.q[at.beta]))
    else:
        st = forward_statistics(spec)
        rhs = float(np.sum(st.p[at.alpha] * st.f[at.beta]))
    return lhs, rhs, abs(lhs - rhs)


def mgf(dist: ObservableDistribution, lam) -> float:
    """sum prob e^{lam v}, evaluated in log space."""
    m = dist.prob > 0
    if not np.any(m):
        return 0.0
    lv = logsumexp(lam * dist.v[m], b=dist.prob[m])
    if lv > 709:
        warnings.warn(f"moment generating function overflows at lambda={lam}", RuntimeWarning)
        return float("inf")
    return float(np.exp(lv))


def mgf_identity(spec, lam, choice=VChoice.LOG_PQ):
    """chi_E(lam - 1) and chi~_{E*}(-lam), with relative residual."""
    a = mgf(forward_pdf(spec, choice), lam - 1)
    b = mgf(reverse_quantity(spec, choice), -lam)
    return a, b, abs(a - b) / max(abs(a), abs(b), 1e-300)


def mgf_projective_closed_form(rho_p, rho_q, ch, lam) -> float:
    """Tr[rho_q^{-lam} E(rho_p^{lam+1})]."""
    try:
        A = psd_power(rho_q, -lam, tol=TOL.p_floor, support_only=True)
        B = psd_power(rho_p, lam + 1, tol=TOL.p_floor, support_only=True)
    except DomainError as e:
        raise DomainError(f"closed-form MGF undefined at lambda={lam}: {e}") from e
    return float(np.trace(A @ chn.apply(ch, B)).real)


def projective_states(spec):
    """rho_p = sum p_a P_a^dag P_a and rho_q for the projective setting."""
    p = born_probabilities(spec.P, spec.rho)
    rho_p = np.einsum("a,aij->ij", p, spec.P.effects())
    return rho_p, spec.rho_q()


def is_rank1_projective(M: Measurement, tol=1e-10) -> bool:
    for op in M.ops:
        if np.max(np.abs(op @ op - op)) > tol or np.max(np.abs(op - dag(op))) > tol:
            return False
        if abs(np.trace(op).real - 1) > tol:
            return False
    return True


@dataclass
class EntropyDecomposition:
    mean_v: float
    terms: dict
    residuals: dict
    skipped: list = field(default_factory=list)


def mean_v_entropy_identity(spec, H_f=None, beta=None, projective=None) -> EntropyDecomposition:
    """<v> from the PDF against its entropy decompositions.

    Generalized: <v> = H(f||q) + H(f) - H(p).
    Projective:  <v> = S(E(rho_p)) - S(rho_p) + S(E(rho_p)||rho_q)
                     = S(rho_q) - S(rho_p) + Tr[(rho_q - E(rho_p)) ln rho_q].
    With H_f and beta given (thermal rho_q) the last trace is compared with
    the heat term beta (Tr[H_f E(rho_p)] - Tr[H_f rho_q]).
    """
    st = forward_statistics(spec)
    dist = forward_pdf(spec, VChoice.LOG_PQ)
    mv = dist.mean()
    p, f, q = st.p, st.f, spec.q
    terms, res, skipped = {}, {}, []
    terms["H(f||q)"] = classical_relative_entropy(f, q)
    terms["H(f)"] = shannon_entropy(f)
    terms["H(p)"] = shannon_entropy(p)
    res["generalized"] = abs(mv - (terms["H(f||q)"] + terms["H(f)"] - terms["H(p)"]))
    if projective is None:
        projective = is_rank1_projective(spec.P) and is_rank1_projective(spec.Q)
    if projective:
        rho_p, rho_q = projective_states(spec)
        Erp = chn.apply(spec.channel, rho_p)
        Erp = 0.5 * (Erp + dag(Erp))
        terms["S(E(rho_p))"] = von_neumann_entropy(Erp)
        terms["S(rho_p)"] = von_neumann_entropy(rho_p)
        terms["S(rho_q)"] = von_neumann_entropy(rho_q)
        terms["S(E(rho_p)||rho_q)"] = relative_entropy(Erp, rho_q)
        if np.isfinite(terms["S(E(rho_p)||rho_q)"]):
            res["projective_a"] = abs(
                mv - (terms["S(E(rho_p))"] - terms["S(rho_p)"] + terms["S(E(rho_p)||rho_q)"])
            )
        else:
            skipped.append("projective_a")
        try:
            L = logm_pd(rho_q)
            t2 = float(np.trace((rho_q - Erp) @ L).real)
            terms["Tr[(rho_q-E(rho_p)) ln rho_q]"] = t2
            res["projective_b"] = abs(mv - (terms["S(rho_q)"] - terms["S(rho_p)"] + t2))
            qmin = float(np.min(q))
            terms["distance_bound"] = trace_norm(Erp - rho_q) * abs(np.log(qmin))
            res["distance_bound_violation"] = max(0.0, abs(t2) - terms["distance_bound"])
            if H_f is not None and beta is not None:
                heat = beta * float(np.trace(H_f @ Erp).real - np.trace(H_f @ rho_q).real)
                terms["-beta Q"] = heat
                res["heat"] = abs(t2 - heat)
        except DomainError:
            skipped.append("projective_b")
    return EntropyDecomposition(mv, terms, res, skipped)


def second_law_check(spec):
    mv = forward_pdf(spec).mean()
    g = efficacy(spec)
    rhs = -np.log(g) if g > 0 else float("inf")
    return mv, rhs, mv - rhs


def reverse_virtual_state(Q: Measurement, q, U_beta=None):
    """rho~ = sum_b q_b Ut_b^dag Q_b Q_b^dag Ut_b, which makes Q~ complete."""
    d = Q.dim
    out = np.zeros((d, d), complex)
    for b, Qb in enumerate(Q.ops):
        U = np.eye(d) if U_beta is None else U_beta[b]
        out += q[b] * dag(U) @ Qb @ dag(Qb) @ U
    return 0.5 * (out + dag(out))


@dataclass
class ReverseRun:
    q_rev: np.ndarray  # outcome probabilities of Q~ on rho~
    M_rev: np.ndarray  # M_rev[a, b] = p~_{a|b}
    P_tilde: Measurement
    Q_tilde: Measurement
    rho_tilde: np.ndarray


def run_reverse_protocol(spec, rho_tilde=None, U_alpha=None, U_beta=None) -> ReverseRun:
    """Prepare rho~, measure Q~, evolve with E*, measure P~."""
    if rho_tilde is None:
        rho_tilde = reverse_virtual_state(spec.Q, spec.q, U_beta)
    Pt, Qt = build_reverse_measurements(spec.P, spec.Q, spec.q, spec.rho, rho_tilde, U_alpha, U_beta)
    ens = measure_prepare(Qt, rho_tilde)
    dm = chn.dual(spec.channel)
    M_rev = np.zeros((len(Pt), len(Qt)))
    for b, s in enumerate(ens.states):
        if s is None:
            continue
        out = chn.apply(dm, s)
        M_rev[:, b] = born_probabilities(Pt, out)
    return ReverseRun(ens.probs, M_rev, Pt, Qt, rho_tilde)


def crooks_check(spec, U_alpha=None, U_beta=None, tol_unital=1e-10) -> float:
    """max atomwise |P_E(v) e^{-v} - P~_{E*}(-v)| with the reverse protocol executed."""
    r = chn.unitality_residual(spec.channel)
    if r > tol_unital:
        raise DomainError(f"channel is not unital: ||E(1) - 1|| = {r:.3e}")
    rep = check_microreversible(spec.P, spec.Q)
    if not rep.ok:
        raise DomainError("measurements are not microreversible: " + "; ".join(rep.messages))
    at = observable_atoms(spec, VChoice.LOG_PQ)
    run = run_reverse_protocol(spec, U_alpha=U_alpha, U_beta=U_beta)
    w_rev = run.q_rev[at.beta] * run.M_rev[at.alpha, at.beta]
    lhs = merge_atoms(at.V, at.weight * np.exp(-at.V), normalized=False)
    rhs = merge_atoms(at.V, w_rev, normalized=False)  # reverse atoms at -V, reflected
    return float(np.max(np.abs(lhs.prob - rhs.prob)))


@dataclass
class BistochasticReport:
    row_sums: np.ndarray
    row_sum_residual: float
    unital: bool
    bistochastic: bool
    reverse_residual: float


def bistochasticity_and_microreversibility_check(spec, tol=1e-10) -> BistochasticReport:
    st = forward_statistics(spec)
    rows = st.M.sum(axis=1)
    rr = float(np.max(np.abs(rows - 1)))
    unital = chn.unitality_residual(spec.channel) <= tol
    if unital:
        run = run_reverse_protocol(spec)
        rev = float(np.max(np.abs(st.M - run.M_rev.T)))
    else:
        # E* is not trace preserving, so compare against Tr[rho_a E*(Q^dag Q)]
        ens = st.ensemble
        dm = chn.dual(spec.channel)
        Mr = np.array([[np.trace(s @ chn.apply(dm, e)).real if s is not None else 0.0
                        for s in ens.states] for e in spec.Q.effects()])
        rev = float(np.max(np.abs(st.M - Mr)))
    return BistochasticReport(rows, rr, unital, rr <= tol, rev)


def gamma_bound(spec):
    """(gamma, d min{||rho_q||, ||E(1/d)||}, d)."""
    d = spec.dim
    g = efficacy(spec, "closed")
    b = d * min(operator_norm(spec.rho_q()), operator_norm(chn.apply(spec.channel, np.eye(d) / d)))
    return g, b, d

"""Feedback-controlled protocols.

A mid-protocol measurement Q = {Q_j} selects a branch j. Branch j applies
E_j = Ebar_j o (Q_j . Q_j^dag) o Ebar and is read out by its own final
measurement {Q_{b|j}} with reference distribution q_{.|j}.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import channels as chn
from .fluctuation import ObservableDistribution, ProtocolSpec, merge_atoms, mgf
from .measurements import Measurement, born_probabilities, measure_prepare
from .quantum_core import (
    TOL,
    DomainError,
    ValidationError,
    as_density_matrix,
    dag,
    is_density_matrix,
    psd_power,
)


@dataclass(frozen=True, eq=False)
class FeedbackProtocolSpec:
    rho: np.ndarray
    P: Measurement
    maps: list  # composite CP map E_j per branch
    finals: list  # Measurement per branch
    q_cond: list  # q_{.|j} per branch
    pre_channel: chn.Channel | None = None
    mid: Measurement | None = None
    branch_maps: list | None = None

    @property
    def dim(self):
        return self.rho.shape[0]

    @property
    def n_branches(self):
        return len(self.maps)

    def rho_q(self, j):
        """rho_{q|j} = sum_b q_{b|j} Q_{b|j}^dag Q_{b|j}."""
        return np.einsum("b,bij->ij", self.q_cond[j], self.finals[j].effects())

    def total_map(self) -> chn.CPMap:
        return chn.CPMap(np.concatenate([m.kraus for m in self.maps]))


@dataclass(frozen=True, eq=False)
class ErrorModel:
    confusion: np.ndarray  # confusion[j', j] = p_{j'|j}
    marginal: np.ndarray  # p_{j'}


def _check_q(q, n, j):
    q = np.asarray(q, float)
    if q.shape != (n,):
        raise ValidationError(f"q_cond[{j}] has {q.size} entries, final measurement has {n}")
    if np.any(q <= 0):
        raise ValidationError(f"q_cond[{j}] must be strictly positive")
    if abs(q.sum() - 1) > 1e-10:
        raise ValidationError(f"q_cond[{j}] sums to {q.sum()!r}")
    return q


def _projection(op):
    return chn.CPMap(np.asarray(op, complex)[None])


def composite_maps(pre_channel, mid: Measurement, branch_maps):
    """E_j = Ebar_j o Q_j o Ebar for each branch."""
    if len(branch_maps) != len(mid):
        raise ValidationError(f"{len(branch_maps)} branch maps for {len(mid)} mid outcomes")
    return [chn.compose(bm, chn.compose(_projection(Qj), pre_channel))
            for bm, Qj in zip(branch_maps, mid.ops)]


def _validate(rho, P, maps, finals, q_cond, tol):
    rho = as_density_matrix(rho)
    d = rho.shape[0]
    if not (len(maps) == len(finals) == len(q_cond)) or not maps:
        raise ValidationError("branch maps, final measurements and q_cond must have equal nonzero length")
    if P.dim != d:
        raise ValidationError(f"P has dimension {P.dim}, state has {d}")
    for j, (m, F) in enumerate(zip(maps, finals)):
        if m.dim != d or F.dim != d:
            raise ValidationError(f"branch {j} has inconsistent dimension")
    qs = [_check_q(q, len(F), j) for j, (q, F) in enumerate(zip(q_cond, finals))]
    tot = chn.CPMap(np.concatenate([m.kraus for m in maps]))
    r = tot.tp_residual()
    tol = TOL.tp if tol is None else tol
    if r > tol:
        raise ValidationError(f"branch maps are not jointly trace preserving (residual {r:.3e})")
    return rho, qs


def feedback_protocol(rho, P, pre_channel, mid, branch_maps, finals, q_cond, tol=None):
    """Validated spec from the pre-channel, mid measurement and per-branch maps.

    Branch maps may be trace decreasing; only the sum over branches must
    preserve trace.
    """
    for bm in branch_maps:
        if not isinstance(bm, chn.CPMap):
            raise ValidationError("branch maps must be CPMap instances")
    maps = composite_maps(pre_channel, mid, branch_maps)
    rho, qs = _validate(rho, P, maps, finals, q_cond, tol)
    return FeedbackProtocolSpec(rho, P, maps, list(finals), qs, pre_channel, mid, list(branch_maps))


def feedback_protocol_from_maps(rho, P, maps, finals, q_cond, tol=None):
    """Spec from already composed branch maps E_j."""
    rho, qs = _validate(rho, P, list(maps), finals, q_cond, tol)
    return FeedbackProtocolSpec(rho, P, list(maps), list(finals), qs)


def trivial_feedback(spec: ProtocolSpec) -> FeedbackProtocolSpec:
    """One branch, identity mid measurement and identity branch map."""
    d = spec.dim
    mid = Measurement(np.eye(d, dtype=complex)[None], ("all",))
    return feedback_protocol(spec.rho, spec.P, spec.channel, mid,
                             [chn.identity_channel(d)], [spec.Q], [spec.q])


@dataclass(frozen=True)
class FeedbackAtoms:
    alpha: np.ndarray
    j: np.ndarray
    beta: np.ndarray
    V: np.ndarray
    weight: np.ndarray  # p_a Tr[Q_{b|j} E_j(rho_a)]


def _ensemble(spec):
    return measure_prepare(spec.P, spec.rho)


def feedback_atoms(spec: FeedbackProtocolSpec) -> FeedbackAtoms:
    """V_{a j b} = ln(p_a / q_{b|j}) on every (a, j, b) with p_a above the floor."""
    ens = _ensemble(spec)
    p = ens.probs
    rows = []
    for j, (m, F, q) in enumerate(zip(spec.maps, spec.finals, spec.q_cond)):
        eff = F.effects()
        for a, s in enumerate(ens.states):
            if s is None:
                continue
            w = np.einsum("bij,ji->b", eff, chn.apply(m, s)).real * p[a]
            V = np.log(p[a]) - np.log(q)
            for b in range(len(F)):
                rows.append((a, j, b, V[b], w[b]))
    if not rows:
        raise DomainError("no supported initial outcome")
    arr = np.array(rows, dtype=float)
    return FeedbackAtoms(arr[:, 0].astype(int), arr[:, 1].astype(int), arr[:, 2].astype(int),
                         arr[:, 3], arr[:, 4])


def feedback_forward_pdf(spec: FeedbackProtocolSpec) -> ObservableDistribution:
    at = feedback_atoms(spec)
    return merge_atoms(at.V, at.weight, normalized=True)


def _reverse_weights(spec, at: FeedbackAtoms):
    """Tr[rho_a E_j*(Q_{b|j}^dag Q_{b|j})] q_{b|j} through the dual maps."""
    ens = _ensemble(spec)
    duals = [chn.dual(m) for m in spec.maps]
    cache = {}
    w = np.empty(at.V.size)
    for k, (a, j, b) in enumerate(zip(at.alpha, at.j, at.beta)):
        key = (j, b)
        if key not in cache:
            cache[key] = chn.apply(duals[j], spec.finals[j].effects()[b])
        w[k] = np.trace(ens.states[a] @ cache[key]).real * spec.q_cond[j][b]
    return w


def feedback_reverse_quantity(spec) -> ObservableDistribution:
    """Pseudo-distribution with atoms at -V built from the dual branch maps."""
    at = feedback_atoms(spec)
    return merge_atoms(-at.V, _reverse_weights(spec, at), normalized=False)


def feedback_pointwise_residual(spec) -> float:
    """max |P(v) e^{-v} - F*(-v)| over atoms."""
    at = feedback_atoms(spec)
    lhs = merge_atoms(at.V, at.weight * np.exp(-at.V), normalized=False)
    rhs = merge_atoms(at.V, _reverse_weights(spec, at), normalized=False)
    return float(np.max(np.abs(lhs.prob - rhs.prob)))


def feedback_efficacy(spec, method="closed") -> float:
    """gamma = sum_j Tr[E_j*(rho_{q|j})], or 'sum' over prepared states."""
    if method == "closed":
        return float(sum(np.trace(chn.apply_dual(m, spec.rho_q(j))).real
                         for j, m in enumerate(spec.maps)))
    ens = _ensemble(spec)
    tot = 0.0
    for j, m in enumerate(spec.maps):
        rq = spec.rho_q(j)
        for s in ens.states:
            if s is not None:
                tot += float(np.trace(rq @ chn.apply(m, s)).real)
    return tot


def feedback_jarzynski(spec):
    """(<e^{-v}>, gamma, residual)."""
    at = feedback_atoms(spec)
    lhs = float(np.sum(at.weight * np.exp(-at.V)))
    g = feedback_efficacy(spec)
    return lhs, g, abs(lhs - g)


def joint_total(spec) -> float:
    return float(feedback_atoms(spec).weight.sum())


def feedback_mgf_closed_form(spec, lam) -> float:
    """sum_j Tr[rho_{q|j}^{1-lam} E_j(rho_p^lam)]."""
    p = born_probabilities(spec.P, spec.rho)
    rho_p = np.einsum("a,aij->ij", p, spec.P.effects())
    try:
        A = psd_power(rho_p, lam, tol=TOL.p_floor, support_only=True)
        tot = 0.0
        for j, m in enumerate(spec.maps):
            B = psd_power(spec.rho_q(j), 1 - lam, tol=TOL.p_floor, support_only=True)
            tot += float(np.trace(B @ chn.apply(m, A)).real)
    except DomainError as e:
        raise DomainError(f"feedback MGF undefined at lambda={lam}: {e}") from e
    return tot


def feedback_mgf_identity(spec, lam):
    """(chi(lam-1), closed form, chi~(-lam), max relative residual)."""
    a = mgf(feedback_forward_pdf(spec), lam - 1)
    b = feedback_mgf_closed_form(spec, lam)
    c = mgf(feedback_reverse_quantity(spec), -lam)
    scale = max(abs(a), abs(b), abs(c), 1e-300)
    res = max(abs(a - b), abs(a - c), abs(b - c)) / scale
    return a, b, c, res


# error-free unitary feedback and the classical-error model

def unitary_feedback_protocol(rho, P, U, mid, U_branch, finals, q_cond, tol=None):
    """E_j(X) = U_j Q_j U X U^dag Q_j U_j^dag."""
    bms = [chn.CPMap(np.asarray(Uj, complex)[None]) for Uj in U_branch]
    return feedback_protocol(rho, P, chn.unitary_channel(U), mid, bms, finals, q_cond, tol)


def unitary_feedback_gamma(mid, U_branch, rho_q_list) -> float:
    """sum_j Tr[rho_{q|j} U_j Q_j Q_j^dag U_j^dag], i.e. Tr[rho_{q|j} E_j(1)]."""
    return float(sum(np.trace(dag(Qj) @ dag(Uj) @ rq @ Uj @ Qj).real
                     for Qj, Uj, rq in zip(mid.ops, U_branch, rho_q_list)))


def classical_error_gamma(mid, U_branch, rho_q_list, confusion) -> float:
    """sum_{j,j'} p_{j'|j} Tr[rho_{q|j'} U_{j'} Q_j Q_j^dag U_{j'}^dag]."""
    C = np.asarray(confusion, float)
    tot = 0.0
    for jp, (Ujp, rq) in enumerate(zip(U_branch, rho_q_list)):
        X = dag(Ujp) @ rq @ Ujp
        for j, Qj in enumerate(mid.ops):
            tot += C[jp, j] * np.trace(dag(Qj) @ X @ Qj).real
    return float(tot)


def mid_probabilities(spec: FeedbackProtocolSpec) -> np.ndarray:
    """p_j = Tr[Q_j Ebar(rho) Q_j^dag]."""
    if spec.mid is None or spec.pre_channel is None:
        raise ValidationError("spec has no explicit mid measurement")
    return born_probabilities(spec.mid, chn.apply(spec.pre_channel, spec.rho))


def error_model(confusion, p_j=None, marginal=None, tol=1e-10) -> ErrorModel:
    """Column-stochastic confusion matrix with marginal p_{j'} = sum_j p_{j'|j} p_j."""
    C = np.asarray(confusion, float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValidationError(f"confusion matrix must be square, got {C.shape}")
    if np.any(C < -tol):
        raise ValidationError("confusion matrix has negative entries")
    cs = C.sum(axis=0)
    if np.max(np.abs(cs - 1)) > tol:
        raise ValidationError(f"confusion matrix columns sum to {cs}")
    C = np.clip(C, 0, None)
    if marginal is None:
        if p_j is None:
            raise ValidationError("error model needs p_j or an explicit marginal")
        marginal = C @ np.asarray(p_j, float)
    marginal = np.asarray(marginal, float)
    if marginal.shape != (C.shape[0],) or abs(marginal.sum() - 1) > tol or np.any(marginal < 0):
        raise ValidationError("marginal p_{j'} must be a distribution over branches")
    return ErrorModel(C, marginal)


def symmetric_binary_error(eps, p_j=None, marginal=None) -> ErrorModel:
    return error_model([[1 - eps, eps], [eps, 1 - eps]], p_j, marginal)


def with_error_model(spec: FeedbackProtocolSpec, em: ErrorModel, tol=None) -> FeedbackProtocolSpec:
    """Branch j' applies E_{j'} = sum_j p_{j'|j} Ebar_{j'} o Q_j o Ebar."""
    if spec.mid is None:
        raise ValidationError("spec has no explicit mid measurement")
    n = len(spec.mid)
    if em.confusion.shape != (n, n):
        raise ValidationError("confusion matrix size does not match branch count")
    maps = []
    for jp in range(n):
        ks = []
        for j, Qj in enumerate(spec.mid.ops):
            c = em.confusion[jp, j]
            if c > 0:
                m = chn.compose(spec.branch_maps[jp], chn.compose(_projection(Qj), spec.pre_channel))
                ks.append(np.sqrt(c) * m.kraus)
        if not ks:
            ks = [np.zeros((1, spec.dim, spec.dim), complex)]
        maps.append(chn.CPMap(np.concatenate(ks)))
    rho, qs = _validate(spec.rho, spec.P, maps, spec.finals, spec.q_cond, tol)
    return FeedbackProtocolSpec(rho, spec.P, maps, list(spec.finals), qs,
                                spec.pre_channel, spec.mid, list(spec.branch_maps))


@dataclass
class MutualInfoResult:
    distribution: ObservableDistribution
    integral: float  # sum over forward atoms of weight * e^{-v}
    pseudo_total: float  # sum over all (a, j, j', b) of q_{b|j'} p_{j'} T
    closed_form: float  # sum_a Tr[P_a Ehat(rho_hat)]
    mean_information: float  # <I_{jj'}>
    rho_hat: np.ndarray
    rho_hat_valid: bool


def mutual_info_observable_pdf(spec: FeedbackProtocolSpec, em: ErrorModel) -> MutualInfoResult:
    """PDF of V = ln(p_a / q_{b|j'}) + ln(p_{j'|j} / p_{j'}).

    Atoms with p_{j'|j} = 0 carry no forward weight and are dropped from the
    PDF; pseudo_total keeps them, which is the sum the closed form evaluates.
    """
    if spec.mid is None or spec.branch_maps is None:
        raise ValidationError("mutual-information observable needs the mid measurement and branch maps")
    n = len(spec.mid)
    if em.confusion.shape != (n, n):
        raise ValidationError("confusion matrix size does not match branch count")
    if np.any(em.marginal <= TOL.p_floor):
        raise DomainError(f"marginal p_j' vanishes for branch {int(np.argmin(em.marginal))}")
    ens = _ensemble(spec)
    p = ens.probs
    C, pm = em.confusion, em.marginal
    v_list, w_list, info = [], [], 0.0
    integral = pseudo = 0.0
    for j, Qj in enumerate(spec.mid.ops):
        inner = chn.compose(_projection(Qj), spec.pre_channel)
        for jp in range(n):
            m = chn.compose(spec.branch_maps[jp], inner)
            eff = spec.finals[jp].effects()
            q = spec.q_cond[jp]
            for a, s in enumerate(ens.states):
                if s is None:
                    continue
                T = np.einsum("bij,ji->b", eff, chn.apply(m, s)).real
                pseudo += float(np.sum(q * pm[jp] * T))
                if C[jp, j] <= 0:
                    continue
                I = np.log(C[jp, j] / pm[jp])
                V = np.log(p[a]) - np.log(q) + I
                w = p[a] * C[jp, j] * T
                v_list.append(V)
                w_list.append(w)
                # w e^{-V} in log space: a tiny p_{j'|j} makes e^{-V} overflow while w underflows
                with np.errstate(divide="ignore"):
                    integral += float(np.sum(np.exp(np.log(np.clip(w, 0.0, None)) - V)))
                info += float(np.sum(w)) * I
    dist = merge_atoms(np.concatenate(v_list), np.concatenate(w_list), normalized=True)
    # rho_hat = sum_{j'} p_{j'} Ebar_{j'}*(rho_{q|j'}); Ehat(X) = Ebar*(sum_j Q_j^dag X Q_j)
    rho_hat = sum(pm[jp] * chn.apply_dual(spec.branch_maps[jp], spec.rho_q(jp)) for jp in range(n))
    rho_hat = 0.5 * (rho_hat + dag(rho_hat))
    X = sum(dag(Qj) @ rho_hat @ Qj for Qj in spec.mid.ops)
    Ehat = chn.apply_dual(spec.pre_channel, X)
    effP = spec.P.effects()
    closed = float(sum(np.trace(effP[a] @ Ehat).real for a in range(len(p)) if ens.states[a] is not None))
    return MutualInfoResult(dist, integral, pseudo, closed, info, rho_hat, is_density_matrix(rho_hat))

"""Generalized measurements, microreversible pairs and reverse measurements."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .quantum_core import (
    TOL,
    DomainError,
    ValidationError,
    as_density_matrix,
    as_operator,
    dag,
    eig_hermitian,
    psd_power,
    random_unitary,
)


@dataclass(frozen=True, eq=False)
class Measurement:
    ops: np.ndarray  # shape (n, d, d)
    labels: tuple = ()

    def __post_init__(self):
        if not self.labels:
            object.__setattr__(self, "labels", tuple(str(k) for k in range(len(self.ops))))

    @property
    def dim(self) -> int:
        return self.ops.shape[1]

    def __len__(self):
        return self.ops.shape[0]

    def effects(self) -> np.ndarray:
        """POVM elements M^dag M."""
        return np.einsum("kji,kjl->kil", self.ops.conj(), self.ops)

    def completeness_residual(self) -> float:
        return float(np.max(np.abs(self.effects().sum(axis=0) - np.eye(self.dim))))


def measurement(ops, labels=None, tol=None) -> Measurement:
    ops = list(ops)
    if not ops:
        raise ValidationError("measurement has no operators")
    arr = np.stack([as_operator(o) for o in ops]).astype(complex)
    if labels is not None and len(labels) != len(ops):
        raise ValidationError("label count does not match operator count")
    m = Measurement(arr, tuple(labels) if labels is not None else ())
    tol = TOL.meas if tol is None else tol
    r = m.completeness_residual()
    if r > tol:
        raise ValidationError(f"measurement is not complete (residual {r:.3e})")
    return m


@dataclass(frozen=True, eq=False)
class PreparedEnsemble:
    """Post-measurement ensemble; states[k] is None when probs[k] <= p_floor."""

    probs: np.ndarray
    states: list = field(default_factory=list)

    @property
    def support(self) -> np.ndarray:
        return np.array([s is not None for s in self.states])

    def average_state(self):
        d = next(s for s in self.states if s is not None).shape[0]
        out = np.zeros((d, d), complex)
        for p, s in zip(self.probs, self.states):
            if s is not None:
                out += p * s
        return out


def born_probabilities(M: Measurement, rho) -> np.ndarray:
    p = np.einsum("kij,ji->k", M.effects(), rho).real
    return np.clip(p, 0.0, None)


def measure_prepare(M: Measurement, rho, p_floor=None) -> PreparedEnsemble:
    rho = as_density_matrix(rho)
    if rho.shape[0] != M.dim:
        raise ValidationError("state and measurement dimensions differ")
    p_floor = TOL.p_floor if p_floor is None else p_floor
    probs = born_probabilities(M, rho)
    states = []
    for k, P in enumerate(M.ops):
        if probs[k] > p_floor:
            s = P @ rho @ dag(P) / probs[k]
            states.append(0.5 * (s + dag(s)))
        else:
            states.append(None)
    return PreparedEnsemble(probs, states)


def projective_from_hamiltonian(H) -> Measurement:
    sp = eig_hermitian(H)
    V = sp.eigenvectors
    ops = np.einsum("ik,jk->kij", V, V.conj())
    return Measurement(ops, tuple(f"e{k}" for k in range(V.shape[1])))


def projective_from_basis(V) -> Measurement:
    V = np.asarray(V, complex)
    return Measurement(np.einsum("ik,jk->kij", V, V.conj()))


def random_measurement(d, n_outcomes, rng) -> Measurement:
    """Kraus operators cut from the first d columns of a Haar unitary on C^{n d}."""
    W = random_unitary(n_outcomes * d, rng)[:, :d]
    return Measurement(W.reshape(n_outcomes, d, d))


def hermitian_basis(d):
    """Orthonormal Hermitian operator basis (generalized Gell-Mann plus identity)."""
    out = [np.eye(d, dtype=complex) / np.sqrt(d)]
    for j in range(d):
        for k in range(j + 1, d):
            S = np.zeros((d, d), complex)
            S[j, k] = S[k, j] = 1 / np.sqrt(2)
            A = np.zeros((d, d), complex)
            A[j, k], A[k, j] = -1j / np.sqrt(2), 1j / np.sqrt(2)
            out += [S, A]
    for l in range(1, d):
        D = np.zeros((d, d), complex)
        D[np.arange(l), np.arange(l)] = 1
        D[l, l] = -l
        out.append(D / np.sqrt(l * (l + 1)))
    return out


def ensemble_sum_map(P: Measurement, X):
    """sum_alpha P X P^dag / Tr[P^dag P X], with terms of vanishing weight dropped."""
    out = np.zeros((P.dim, P.dim), complex)
    for E, op in zip(P.effects(), P.ops):
        w = np.trace(E @ X)
        if abs(w) > TOL.p_floor:
            out += op @ X @ dag(op) / w
    return out


@dataclass
class MicroreversibilityReport:
    ok: bool
    ensemble_residual: float
    violating_state: np.ndarray | None
    q_trace_residual: float
    n_p: int
    n_q: int
    dim: int
    messages: list


def check_microreversible(P: Measurement, Q: Measurement, tol=1e-9) -> MicroreversibilityReport:
    """Check sum_alpha rho_alpha = 1 for all rho, Tr[Q^dag Q] = 1 and |P| = |Q| = d.

    The first condition is probed on d^2 full-rank states, the maximally
    mixed state shifted along each element of a Hermitian operator basis.
    """
    d = P.dim
    msgs = []
    worst, worst_state = 0.0, None
    eps = 0.5 / d
    probes = [np.eye(d, dtype=complex) / d]
    for B in hermitian_basis(d)[1:]:
        probes.append(np.eye(d) / d + eps * B / np.linalg.norm(B, 2))
    for rho in probes:
        r = float(np.max(np.abs(ensemble_sum_map(P, rho) - np.eye(d))))
        if r > worst:
            worst, worst_state = r, rho
    if worst > tol:
        msgs.append(f"sum of prepared states differs from identity by {worst:.3e}")
    qt = np.einsum("kii->k", Q.effects()).real
    qres = float(np.max(np.abs(qt - 1.0)))
    if qres > tol:
        msgs.append(f"Tr[Q^dag Q] deviates from 1 by {qres:.3e}")
    if len(P) != d or len(Q) != d:
        msgs.append(f"outcome counts |P|={len(P)}, |Q|={len(Q)} but d={d}")
    ok = not msgs
    return MicroreversibilityReport(
        ok, worst, None if worst <= tol else worst_state, qres, len(P), len(Q), d, msgs
    )


def build_reverse_measurements(P, Q, q, rho, rho_tilde, U_alpha=None, U_beta=None):
    """Reverse pair (P~, Q~).

    Q~_b = sqrt(q_b) Q_b^dag Ut_b rho~^{-1/2},  P~_a = U_a sqrt(rho) P_a^dag / sqrt(p_a).
    Unitaries default to the identity.
    """
    d = P.dim
    q = np.asarray(q, float)
    rho = as_density_matrix(rho)
    rho_tilde = as_density_matrix(rho_tilde)
    try:
        rt_isqrt = psd_power(rho_tilde, -0.5)
        r_sqrt = psd_power(rho, 0.5)
        psd_power(rho, -0.5)
    except DomainError as e:
        raise DomainError("reverse measurements need full-rank rho and rho_tilde") from e
    p = born_probabilities(P, rho)
    I = np.eye(d, dtype=complex)
    Ub = [I] * len(Q) if U_beta is None else list(U_beta)
    Ua = [I] * len(P) if U_alpha is None else list(U_alpha)
    Qt = np.stack([np.sqrt(q[b]) * dag(Q.ops[b]) @ Ub[b] @ rt_isqrt for b in range(len(Q))])
    Pt = np.stack([Ua[a] @ r_sqrt @ dag(P.ops[a]) / np.sqrt(p[a]) for a in range(len(P))])
    return Measurement(Pt, P.labels), Measurement(Qt, Q.labels)


def to_json(M: Measurement) -> dict:
    return {
        "dim": M.dim,
        "ops": [[[[z.real, z.imag] for z in row] for row in k] for k in M.ops],
        "labels": list(M.labels),
    }


def from_json(obj, tol=None) -> Measurement:
    from .channels import matrix_from_json

    ops = [matrix_from_json(k) for k in obj.get("ops", obj.get("kraus", []))]
    d = obj.get("dim")
    for k in ops:
        if d is not None and k.shape != (d, d):
            raise ValidationError(f"measurement operator shape {k.shape} does not match dim {d}")
    return measurement(ops, obj.get("labels"), tol)

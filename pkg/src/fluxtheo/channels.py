"""CP maps in Kraus form.

Vectorisation is row-major throughout: vec(A X B) = kron(A, B.T) @ vec(X),
matching numpy's reshape.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .quantum_core import TOL, ValidationError, as_operator, dag


@dataclass(frozen=True, eq=False)
class CPMap:
    """Completely positive map X -> sum_i A_i X A_i^dag."""

    kraus: np.ndarray  # shape (k, d, d)

    @property
    def dim(self) -> int:
        return self.kraus.shape[1]

    def __call__(self, X):
        return apply(self, X)

    def tp_residual(self) -> float:
        S = np.einsum("kji,kjl->il", self.kraus.conj(), self.kraus)
        return float(np.max(np.abs(S - np.eye(self.dim))))


class Channel(CPMap):
    """Trace-preserving CP map."""


class DualMap(CPMap):
    """Adjoint under the trace inner product, Kraus set {A_i^dag}."""


def _stack(kraus):
    if isinstance(kraus, np.ndarray) and kraus.ndim == 3:
        ks = kraus.astype(complex)
    else:
        kraus = list(kraus)
        if not kraus:
            raise ValidationError("Kraus list is empty")
        ks = np.stack([as_operator(k) for k in kraus]).astype(complex)
    if ks.shape[0] == 0:
        raise ValidationError("Kraus list is empty")
    if ks.shape[1] != ks.shape[2]:
        raise ValidationError("Kraus operators must be square")
    if not np.all(np.isfinite(ks)):
        raise ValidationError("Kraus operators have non-finite entries")
    return ks


def channel(kraus, tol=None) -> Channel:
    """Validated CPTP channel."""
    ch = Channel(_stack(kraus))
    tol = TOL.tp if tol is None else tol
    r = ch.tp_residual()
    if r > tol:
        raise ValidationError(f"Kraus set is not trace preserving (residual {r:.3e})")
    return ch


def cp_map_from_kraus(kraus, allow_trace_decreasing=False, tol=None) -> CPMap:
    if allow_trace_decreasing:
        m = CPMap(_stack(kraus))
        tol = TOL.tp if tol is None else tol
        S = np.einsum("kji,kjl->il", m.kraus.conj(), m.kraus)
        if np.linalg.eigvalsh(0.5 * (S + dag(S)))[-1] > 1 + tol:
            raise ValidationError("CP map increases trace")
        return m
    return channel(kraus, tol)


def apply(ch: CPMap, X):
    X = np.asarray(X, dtype=complex)
    if X.shape != (ch.dim, ch.dim):
        raise ValidationError(f"operator shape {X.shape} does not match map dimension {ch.dim}")
    A = ch.kraus
    return np.einsum("kij,jl,kml->im", A, X, A.conj())


def dual(ch: CPMap) -> DualMap:
    return DualMap(np.ascontiguousarray(dag(ch.kraus)))


def apply_dual(dm, X):
    """Apply a dual map; a plain Channel is dualised first."""
    if not isinstance(dm, DualMap):
        dm = dual(dm)
    return apply(dm, X)


def undual(dm: DualMap) -> CPMap:
    cls = Channel if isinstance(dm, DualMap) else CPMap
    return cls(np.ascontiguousarray(dag(dm.kraus)))


def compose(ch2: CPMap, ch1: CPMap) -> CPMap:
    """ch2 after ch1, Kraus set {B_j A_i}."""
    if ch1.dim != ch2.dim:
        raise ValidationError("cannot compose maps of different dimension")
    ks = np.einsum("jab,ibc->jiac", ch2.kraus, ch1.kraus).reshape(-1, ch1.dim, ch1.dim)
    cls = Channel if isinstance(ch1, Channel) and isinstance(ch2, Channel) else CPMap
    return cls(ks)


def is_unital(ch: CPMap, tol=1e-10) -> bool:
    return unitality_residual(ch) <= tol


def unitality_residual(ch: CPMap) -> float:
    E1 = apply(ch, np.eye(ch.dim))
    return float(np.linalg.norm(E1 - np.eye(ch.dim), 2))


def is_trace_preserving(ch: CPMap, tol=None) -> bool:
    tol = TOL.tp if tol is None else tol
    return ch.tp_residual() <= tol


def superoperator(ch: CPMap) -> np.ndarray:
    A = ch.kraus
    return np.einsum("kij,kml->imjl", A, A.conj()).reshape(ch.dim ** 2, ch.dim ** 2)


def from_superoperator(S, tol=1e-12) -> CPMap:
    """Kraus form of a CP superoperator via its Choi matrix."""
    S = np.asarray(S, dtype=complex)
    d = int(round(np.sqrt(S.shape[0])))
    # Choi[(i,j),(m,l)] = S[(i,m),(j,l)]
    C = S.reshape(d, d, d, d).transpose(0, 2, 1, 3).reshape(d * d, d * d)
    C = 0.5 * (C + dag(C))
    w, V = np.linalg.eigh(C)
    keep = w > tol * max(1.0, w[-1])
    ks = (V[:, keep] * np.sqrt(w[keep])).T.reshape(-1, d, d)
    return CPMap(ks)


def channel_distance(ch1: CPMap, ch2: CPMap) -> float:
    """Max entry difference of the superoperators (action on a spanning basis)."""
    return float(np.max(np.abs(superoperator(ch1) - superoperator(ch2))))


def unitary_channel(U) -> Channel:
    return Channel(_stack([U]))


def identity_channel(d) -> Channel:
    return Channel(np.eye(d, dtype=complex)[None])


def constant_channel(sigma) -> Channel:
    """E(X) = Tr[X] sigma."""
    sigma = np.asarray(sigma, complex)
    d = sigma.shape[0]
    w, V = np.linalg.eigh(sigma)
    ks = []
    for k in range(d):
        if w[k] <= 0:
            continue
        for j in range(d):
            ks.append(np.sqrt(w[k]) * np.outer(V[:, k], np.eye(d)[j]))
    return Channel(np.stack(ks))


def random_channel(d, rng, n_kraus=2) -> Channel:
    """Haar isometry d -> d*k, environment traced out."""
    from .quantum_core import random_unitary

    U = random_unitary(d * n_kraus, rng)
    iso = U[:, :d]
    ks = iso.reshape(n_kraus, d, d)
    return Channel(ks)


def random_unital_channel(d, rng, n_unitaries=3) -> Channel:
    from .quantum_core import random_unitary

    u = rng.dirichlet(np.ones(n_unitaries))
    ks = np.stack([np.sqrt(u[j]) * random_unitary(d, rng) for j in range(n_unitaries)])
    return Channel(ks)


def to_json(ch: CPMap) -> dict:
    return {"dim": ch.dim, "kraus": [[[[z.real, z.imag] for z in row] for row in k] for k in ch.kraus]}


def matrix_from_json(m) -> np.ndarray:
    a = np.asarray(m, dtype=float)
    if a.ndim == 3 and a.shape[-1] == 2:
        return a[..., 0] + 1j * a[..., 1]
    if a.ndim == 2:
        return a.astype(complex)
    raise ValidationError(f"cannot read matrix of shape {a.shape}")


def from_json(obj, tol=None, allow_trace_decreasing=False) -> CPMap:
    ks = [matrix_from_json(k) for k in obj["kraus"]]
    d = obj.get("dim")
    for k in ks:
        if d is not None and k.shape != (d, d):
            raise ValidationError(f"Kraus operator shape {k.shape} does not match dim {d}")
    return cp_map_from_kraus(ks, allow_trace_decreasing, tol)

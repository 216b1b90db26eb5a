"""Dense linear algebra on small Hilbert spaces.

Operators are plain complex numpy arrays. Energies are angular frequencies
in rad/ns (written GHz throughout, hbar = 1), so beta is in ns.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from contextlib import contextmanager

import numpy as np
from scipy.special import logsumexp


class ValidationError(ValueError):
    """Input violates a structural or physical invariant."""


class DomainError(ValueError):
    """Input is valid but outside the domain of the requested quantity."""


@dataclass(frozen=True)
class Tolerances:
    herm: float = 1e-10
    trace: float = 1e-10
    psd: float = 1e-9
    eig: float = 1e-10
    tp: float = 1e-8
    meas: float = 1e-8
    p_floor: float = 1e-14
    v_merge: float = 1e-9
    pv: float = 1e-6
    ode: float = 1e-8


TOL = Tolerances()


def set_tolerances(**kw) -> Tolerances:
    """Replace the global tolerances; returns the previous set."""
    global TOL
    old = TOL
    TOL = replace(TOL, **kw)
    return old


@contextmanager
def tolerances(**kw):
    old = set_tolerances(**kw)
    try:
        yield TOL
    finally:
        set_tolerances(**vars(old))


# Pauli matrices
SX = np.array([[0, 1], [1, 0]], dtype=complex)
SY = np.array([[0, -1j], [1j, 0]], dtype=complex)
SZ = np.array([[1, 0], [0, -1]], dtype=complex)
I2 = np.eye(2, dtype=complex)


@dataclass(frozen=True)
class Spectrum:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def projectors(self):
        V = self.eigenvectors
        return [np.outer(V[:, k], V[:, k].conj()) for k in range(V.shape[1])]


def as_operator(A, dim=None) -> np.ndarray:
    A = np.asarray(A, dtype=complex)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValidationError(f"operator must be square, got shape {A.shape}")
    if dim is not None and A.shape[0] != dim:
        raise ValidationError(f"operator dimension {A.shape[0]} != {dim}")
    if not np.all(np.isfinite(A)):
        raise ValidationError("operator has non-finite entries")
    return A


def dag(A):
    return np.conj(np.swapaxes(A, -1, -2))


def herm_residual(A) -> float:
    return float(np.max(np.abs(A - dag(A)))) if A.size else 0.0


def as_hermitian(H, tol=None) -> np.ndarray:
    H = as_operator(H)
    tol = TOL.herm if tol is None else tol
    r = herm_residual(H)
    if r > tol * max(1.0, float(np.max(np.abs(H)))):
        raise ValidationError(f"operator is not Hermitian (residual {r:.3e})")
    return 0.5 * (H + dag(H))


def as_density_matrix(rho, tol_trace=None, tol_psd=None) -> np.ndarray:
    rho = as_hermitian(rho)
    tol_trace = TOL.trace if tol_trace is None else tol_trace
    tol_psd = TOL.psd if tol_psd is None else tol_psd
    tr = np.trace(rho).real
    if abs(tr - 1.0) > tol_trace:
        raise ValidationError(f"density matrix trace is {tr!r}, expected 1")
    lmin = np.linalg.eigvalsh(rho)[0]
    if lmin < -tol_psd:
        raise ValidationError(f"density matrix has negative eigenvalue {lmin:.3e}")
    return rho


def is_density_matrix(rho, tol_trace=None, tol_psd=None) -> bool:
    try:
        as_density_matrix(rho, tol_trace, tol_psd)
    except ValidationError:
        return False
    return True


def eig_hermitian(H) -> Spectrum:
    H = as_hermitian(H)
    w, V = np.linalg.eigh(H)
    return Spectrum(w, V)


def matrix_function(H, f) -> np.ndarray:
    """f(H) for Hermitian H through its spectrum."""
    sp = eig_hermitian(H)
    V = sp.eigenvectors
    return (V * f(sp.eigenvalues)) @ dag(V)


def expm_hermitian(H, t=-1j):
    """exp(t H) for Hermitian H (default exp(-iH))."""
    return matrix_function(H, lambda w: np.exp(t * w))


def psd_power(rho, power, tol=None, support_only=False) -> np.ndarray:
    """rho**power for a positive semidefinite matrix.

    Eigenvalues below tol are clamped to zero. 0**0 is 1, or 0 when
    support_only is set (so rho**0 is the support projector). A negative
    power of a singular matrix raises DomainError.
    """
    tol = TOL.psd if tol is None else tol
    sp = eig_hermitian(rho)
    w = np.where(sp.eigenvalues > tol, sp.eigenvalues, 0.0)
    if power < 0 and np.any(w == 0.0):
        raise DomainError("negative power of a singular matrix")
    with np.errstate(divide="ignore"):
        if power == 0:
            fw = (w > 0).astype(float) if support_only else np.ones_like(w)
        else:
            fw = np.where(w > 0, w ** power, 0.0)
    V = sp.eigenvectors
    return (V * fw) @ dag(V)


def sqrtm_psd(rho):
    return psd_power(rho, 0.5)


def logm_pd(rho):
    sp = eig_hermitian(rho)
    if np.any(sp.eigenvalues <= 0):
        raise DomainError("logarithm of a singular matrix")
    V = sp.eigenvectors
    return (V * np.log(sp.eigenvalues)) @ dag(V)


def _gibbs_weights(energies, beta):
    if not (np.isfinite(beta) and beta >= 0):
        raise ValidationError(f"beta must be finite and non-negative, got {beta}")
    x = -beta * (energies - energies.min())
    w = np.exp(x)
    return w / w.sum()


def gibbs_state(H, beta) -> np.ndarray:
    sp = eig_hermitian(H)
    p = _gibbs_weights(sp.eigenvalues, beta)
    V = sp.eigenvectors
    return (V * p) @ dag(V)


def gibbs_probs(energies, beta) -> np.ndarray:
    return _gibbs_weights(np.asarray(energies, float), beta)


def log_partition_function(H, beta) -> float:
    w = eig_hermitian(H).eigenvalues
    return float(logsumexp(-beta * w))


def partition_function(H, beta) -> float:
    return float(np.exp(log_partition_function(H, beta)))


def free_energy(H, beta) -> float:
    if not beta > 0:
        raise DomainError("free energy needs beta > 0")
    return -log_partition_function(H, beta) / beta


def _entropy_from_eigs(w):
    w = np.clip(w, 0.0, 1.0)
    nz = w[w > 0]
    return float(-np.sum(nz * np.log(nz)))


def von_neumann_entropy(rho) -> float:
    rho = as_hermitian(rho)
    return _entropy_from_eigs(np.linalg.eigvalsh(rho))


def shannon_entropy(p) -> float:
    p = np.asarray(p, float)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def relative_entropy(rho, sigma, tol=None) -> float:
    """S(rho||sigma); +inf when supp(rho) is not inside supp(sigma).

    Eigenvalues of sigma at or below tol (default p_floor) form its kernel;
    weight of rho above the psd tolerance in that kernel gives +inf.
    """
    tol = TOL.p_floor if tol is None else tol
    rho = as_hermitian(rho)
    sigma = as_hermitian(sigma)
    r = eig_hermitian(rho)
    s = eig_hermitian(sigma)
    rw = np.clip(r.eigenvalues, 0.0, 1.0)
    sw = s.eigenvalues
    # overlap weights |<r_i|s_j>|^2
    ov = np.abs(dag(r.eigenvectors) @ s.eigenvectors) ** 2
    kernel = sw <= tol
    if np.any(kernel):
        leak = float(rw @ ov[:, kernel].sum(axis=1))
        if leak > max(tol, TOL.psd):
            return float("inf")
    logs = np.where(kernel, 0.0, np.log(np.where(kernel, 1.0, sw)))
    cross = float(rw @ (ov @ logs))
    return -_entropy_from_eigs(rw) - cross


def classical_relative_entropy(p, q) -> float:
    p = np.asarray(p, float)
    q = np.asarray(q, float)
    m = p > 0
    if np.any(q[m] <= 0):
        return float("inf")
    return float(np.sum(p[m] * np.log(p[m] / q[m])))


def singular_values(A):
    return np.linalg.svd(as_operator(A), compute_uv=False)


def trace_norm(A) -> float:
    return float(np.sum(singular_values(A)))


def operator_norm(A) -> float:
    s = singular_values(A)
    return float(s[0]) if s.size else 0.0


def kron_all(ops):
    out = np.eye(1, dtype=complex)
    for o in ops:
        out = np.kron(out, o)
    return out


def site_operator(op, site, n):
    """op acting on qubit `site` (0-based, leftmost is most significant)."""
    return kron_all([op if k == site else I2 for k in range(n)])


def random_unitary(d, rng):
    z = (rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    ph = np.diag(r) / np.abs(np.diag(r))
    return q * ph


def random_density_matrix(d, rng, rank=None):
    k = d if rank is None else rank
    g = rng.standard_normal((d, k)) + 1j * rng.standard_normal((d, k))
    rho = g @ dag(g)
    return rho / np.trace(rho).real


def random_hermitian(d, rng, scale=1.0):
    g = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
    return scale * 0.5 * (g + dag(g))

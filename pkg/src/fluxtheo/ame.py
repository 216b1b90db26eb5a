"""Adiabatic Markovian master equation for a transverse-field Ising annealer.

H_S(t) = -A(t) sum_i sx_i + B(t) H_Ising,  H_Ising = -sum h_i sz_i - sum J_ij sz_i sz_j.
Each qubit couples to its own Ohmic bath through sz. Energies are in rad/ns
(written GHz), times inside the solver are in ns, t_f is given in microseconds.
"""
from __future__ import annotations

import csv
import functools
import logging
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import integrate, interpolate, linalg
from scipy.optimize import linear_sum_assignment

from . import channels as chn
from .quantum_core import (
    SX,
    SZ,
    TOL,
    DomainError,
    ValidationError,
    dag,
    gibbs_state,
    site_operator,
)

log = logging.getLogger(__name__)

NS_PER_US = 1000.0
REF_A0 = 33.7
REF_B1 = 33.6
REF_BETA = 1 / 2.3
REF_OMEGA_C = 8 * np.pi
REF_KAPPA = 2.34e-3
REF_H = 1 / 3
OMEGA_BIN = 1e-8


# schedules

@dataclass(frozen=True, eq=False)
class Schedule:
    """A(s), B(s) on s = t/t_f in [0, 1], piecewise linear through the nodes."""

    s: np.ndarray
    A: np.ndarray
    B: np.ndarray
    name: str = "linear"

    def values(self, s):
        return float(np.interp(s, self.s, self.A)), float(np.interp(s, self.s, self.B))

    def slopes(self, s, side=1):
        """dA/ds, dB/ds on the linear piece containing s (right piece by default)."""
        k = np.searchsorted(self.s, s, side="right" if side > 0 else "left") - 1
        k = int(np.clip(k, 0, self.s.size - 2))
        ds = self.s[k + 1] - self.s[k]
        return (self.A[k + 1] - self.A[k]) / ds, (self.B[k + 1] - self.B[k]) / ds


def linear_schedule(A0=REF_A0, B1=REF_B1) -> Schedule:
    return Schedule(np.array([0.0, 1.0]), np.array([A0, 0.0]), np.array([0.0, B1]), "linear")


def schedule_from_arrays(s, A, B, name="table") -> Schedule:
    s, A, B = (np.asarray(x, float) for x in (s, A, B))
    if s.ndim != 1 or s.size < 2 or A.shape != s.shape or B.shape != s.shape:
        raise ValidationError("schedule needs matching 1-d arrays with at least two nodes")
    if abs(s[0]) > 1e-12 or abs(s[-1] - 1) > 1e-12 or np.any(np.diff(s) <= 0):
        raise ValidationError("schedule nodes must increase strictly from 0 to 1")
    if abs(A[-1]) > 1e-12 or abs(B[0]) > 1e-12 or A[0] <= 0 or B[-1] <= 0:
        raise ValidationError("schedule must satisfy A(1) = B(0) = 0 and A(0), B(1) > 0")
    return Schedule(s, A, B, name)


def schedule_from_csv(path) -> Schedule:
    """CSV with columns s, A, B (s = t/t_f)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or not {"s", "A", "B"} <= set(rows[0]):
        raise ValidationError(f"{path}: schedule CSV needs columns s, A, B")
    s = [float(r["s"]) for r in rows]
    A = [float(r["A"]) for r in rows]
    B = [float(r["B"]) for r in rows]
    return schedule_from_arrays(s, A, B, name=str(path))


# problem specification

@dataclass(frozen=True, eq=False)
class AnnealSpec:
    n_qubits: int
    h: np.ndarray
    J: tuple  # ((i, j, J_ij), ...)
    t_f: float  # microseconds
    beta: float  # ns (1/GHz)
    kappa: float
    omega_c: float = REF_OMEGA_C
    schedule: Schedule = field(default_factory=linear_schedule)
    lamb_shift: bool = True

    @property
    def dim(self):
        return 2 ** self.n_qubits

    @property
    def T(self):
        """Anneal duration in ns."""
        return self.t_f * NS_PER_US


def anneal_spec(n_qubits, h, J, t_f, beta=REF_BETA, kappa=REF_KAPPA, omega_c=REF_OMEGA_C,
                schedule=None, lamb_shift=True) -> AnnealSpec:
    if not (isinstance(n_qubits, (int, np.integer)) and 1 <= n_qubits <= 6):
        raise ValidationError(f"n_qubits must be an integer in [1, 6], got {n_qubits}")
    h = np.broadcast_to(np.asarray(h, float), (n_qubits,)).copy()
    Jt = []
    for i, j, v in (J.items() if isinstance(J, dict) else J):
        if isinstance(i, tuple):
            raise ValidationError("couplings must be (i, j, value) triples")
        i, j = int(i), int(j)
        if not (0 <= i < n_qubits and 0 <= j < n_qubits) or i == j:
            raise ValidationError(f"bad coupling indices ({i}, {j})")
        Jt.append((min(i, j), max(i, j), float(v)))
    if not (np.isfinite(t_f) and t_f > 0):
        raise ValidationError(f"t_f must be positive, got {t_f}")
    if not (np.isfinite(beta) and beta >= 0):
        raise ValidationError(f"beta must be non-negative, got {beta}")
    if not (np.isfinite(kappa) and kappa >= 0):
        raise ValidationError(f"kappa must be non-negative, got {kappa}")
    if not (np.isfinite(omega_c) and omega_c > 0):
        raise ValidationError(f"omega_c must be positive, got {omega_c}")
    sch = linear_schedule() if schedule is None else schedule
    return AnnealSpec(int(n_qubits), h, tuple(Jt), float(t_f), float(beta), float(kappa),
                      float(omega_c), sch, bool(lamb_shift))


def reference_spec(J=0.5, t_f=5.0, kappa=REF_KAPPA, beta=REF_BETA, **kw) -> AnnealSpec:
    """Two qubits, h = 1/3 on both, coupling J."""
    return anneal_spec(2, [REF_H, REF_H], [(0, 1, J)], t_f, beta, kappa, **kw)


def with_params(spec: AnnealSpec, **kw) -> AnnealSpec:
    return replace(spec, **kw)


def spec_from_json(obj, base_dir=None, schedule=None) -> AnnealSpec:
    """{n_qubits, h, J: [[i, j, v]], t_f_us, beta_per_GHz, kappa, omega_c, schedule, lamb_shift}.

    schedule is "linear", {"file": csv} (relative to base_dir) or {"s", "A", "B"};
    an explicit `schedule` argument overrides it.
    """
    need = {"n_qubits", "h", "J", "t_f_us"}
    missing = need - set(obj)
    if missing:
        raise ValidationError(f"anneal spec is missing {sorted(missing)}")
    if schedule is None:
        sch = obj.get("schedule", "linear")
        if sch == "linear":
            schedule = linear_schedule()
        elif isinstance(sch, dict) and "file" in sch:
            path = sch["file"] if base_dir is None else os.path.join(base_dir, sch["file"])
            if not os.path.exists(path):
                raise ValidationError(f"schedule file {path} does not exist")
            schedule = schedule_from_csv(path)
        elif isinstance(sch, dict) and {"s", "A", "B"} <= set(sch):
            schedule = schedule_from_arrays(sch["s"], sch["A"], sch["B"])
        else:
            raise ValidationError(f"unknown schedule {sch!r}")
    J = obj["J"]
    if any(len(c) != 3 for c in J):
        raise ValidationError("J entries must be [i, j, value]")
    return anneal_spec(obj["n_qubits"], obj["h"], [tuple(c) for c in J], float(obj["t_f_us"]),
                       float(obj.get("beta_per_GHz", REF_BETA)), float(obj.get("kappa", REF_KAPPA)),
                       float(obj.get("omega_c", REF_OMEGA_C)), schedule, bool(obj.get("lamb_shift", True)))


def spec_to_json(spec: AnnealSpec) -> dict:
    sch = spec.schedule
    lin = linear_schedule()
    same = sch.s.shape == lin.s.shape and np.all(sch.s == lin.s) and np.all(sch.A == lin.A) and np.all(sch.B == lin.B)
    out_s = "linear" if same else {"s": sch.s.tolist(), "A": sch.A.tolist(), "B": sch.B.tolist()}
    return {"n_qubits": spec.n_qubits, "h": spec.h.tolist(), "J": [list(c) for c in spec.J],
            "t_f_us": spec.t_f, "beta_per_GHz": spec.beta, "kappa": spec.kappa, "omega_c": spec.omega_c,
            "schedule": out_s, "lamb_shift": spec.lamb_shift}


@functools.lru_cache(maxsize=64)
def _operators(n, h_key, J_key):
    d = 2 ** n
    X = np.zeros((d, d), complex)
    Zs = np.stack([site_operator(SZ, i, n) for i in range(n)])
    for i in range(n):
        X += site_operator(SX, i, n)
    Hi = np.zeros((d, d), complex)
    for i, hv in enumerate(h_key):
        Hi -= hv * Zs[i]
    for i, j, v in J_key:
        Hi -= v * Zs[i] @ Zs[j]
    X.setflags(write=False)
    Hi.setflags(write=False)
    Zs.setflags(write=False)
    return X.real.copy(), Hi.real.copy(), Zs.real.copy()


def operators(spec: AnnealSpec):
    """(sum_i sx_i, H_Ising, stack of sz_i) as real arrays."""
    return _operators(spec.n_qubits, tuple(spec.h.tolist()), spec.J)


def ising_hamiltonian(spec):
    return operators(spec)[1].astype(complex)


def _check_t(spec, t):
    if not (-1e-12 <= t <= spec.t_f * (1 + 1e-12)):
        raise DomainError(f"t = {t} us is outside [0, {spec.t_f}] us")
    return min(max(t, 0.0), spec.t_f)


def hamiltonian_at(spec: AnnealSpec, t) -> np.ndarray:
    """H_S at time t in microseconds."""
    t = _check_t(spec, t)
    A, B = spec.schedule.values(t / spec.t_f)
    X, Hi, _ = operators(spec)
    return (-A * X + B * Hi).astype(complex)


def _h_real(spec, s):
    A, B = spec.schedule.values(s)
    X, Hi, _ = operators(spec)
    return -A * X + B * Hi


def _hdot_real(spec, s, side=1):
    """dH/dt in rad/ns^2."""
    dA, dB = spec.schedule.slopes(s, side)
    X, Hi, _ = operators(spec)
    return (-dA * X + dB * Hi) / spec.T


def spectral_width(spec) -> float:
    """Upper bound on any Bohr frequency along the schedule."""
    X, Hi, _ = operators(spec)
    sch = spec.schedule
    a = float(np.max(np.abs(sch.A))) * np.linalg.norm(X, 2)
    b = float(np.max(np.abs(sch.B))) * np.linalg.norm(Hi, 2)
    return 2.0 * (a + b)


# bath

def ohmic_rate(omega, beta, omega_c, kappa=1.0):
    """gamma(w) = kappa w e^{-|w|/w_c} / (1 - e^{-beta w}), gamma(0) = kappa/beta."""
    if not beta > 0:
        raise DomainError("Ohmic rates diverge at beta = 0")
    w = np.asarray(omega, float)
    x = beta * w
    small = np.abs(x) < 1e-8
    xs = np.where(small, 1.0, x)
    with np.errstate(over="ignore"):
        # w / (1 - e^{-x}) written so that neither branch overflows into a nan
        bose = np.where(x >= 0, w / -np.expm1(-np.abs(xs)), -w / np.expm1(np.abs(xs)))
    bose = np.where(small, 1 / beta + 0.5 * w, bose)
    return kappa * np.exp(-np.abs(w) / omega_c) * bose


def rate_asymmetry(omega, omega_c, kappa=1.0):
    """gamma(w) - gamma(-w) = kappa w e^{-|w|/w_c}, the same for every beta."""
    w = np.asarray(omega, float)
    return kappa * w * np.exp(-np.abs(w) / omega_c)


def lamb_shift_pv(omega, beta, omega_c, kappa=1.0, tol=None):
    """S(w) = (1/2pi) PV int gamma(w') / (w - w') dw'.

    The principal value is taken over a symmetric window around w,
    -int_0^inf [gamma(w+u) - gamma(w-u)] / u du, by adaptive quadrature.
    """
    tol = TOL.pv if tol is None else tol
    if not beta > 0:
        raise DomainError("Ohmic rates diverge at beta = 0")
    w = float(omega)
    beta, omega_c = float(beta), float(omega_c)

    def g(x):
        # scalar ohmic_rate with kappa = 1, cheap inside quad
        y = beta * x
        if abs(y) < 1e-8:
            b = 1 / beta + 0.5 * x
        elif y > 0:
            b = x / -math.expm1(-y)
        elif y > -700:
            b = -x / math.expm1(-y)
        else:
            return 0.0
        return math.exp(-abs(x) / omega_c) * b

    def f(u):
        if u == 0.0:
            return 0.0
        return (g(w + u) - g(w - u)) / u

    # absolute floor: S is of order omega_c and crosses zero
    floor = tol * 1e-3 * omega_c
    # the kink of |w'| at w' = 0 sits at u = |w| and leaves a 1/u tail; split geometrically
    top = abs(w) + 40 * omega_c
    if w != 0:
        n = int(np.ceil(np.log10(top / abs(w)))) + 1
        edges = [0.0] + list(np.geomspace(abs(w), top, n))
    else:
        edges = [0.0, top]
    val, err = 0.0, 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        v, e = integrate.quad(f, lo, hi, epsabs=floor, epsrel=tol * 1e-2, limit=400)
        val += v
        err += e
    v, e = integrate.quad(f, edges[-1], np.inf, epsabs=floor, epsrel=tol * 1e-2, limit=200)
    val += v
    err += e
    if err > tol * max(abs(val), omega_c * 1e-3):
        raise DomainError(f"Lamb shift quadrature at w={w} reached only {err:.2e} absolute error")
    return -kappa * val / (2 * np.pi)


def _pv_grid(width, omega_c):
    g = np.geomspace(1e-7 * omega_c, width, 800)
    return np.concatenate([-g[::-1], [0.0], g])


@functools.lru_cache(maxsize=32)
def _lamb_spline(beta, omega_c, width, tol):
    grid = _pv_grid(width, omega_c)
    vals = np.array([lamb_shift_pv(w, beta, omega_c, 1.0, tol) for w in grid])
    return interpolate.CubicSpline(grid, vals)


def lamb_shift_function(beta, omega_c, width, tol=None):
    """Cached spline of S(w)/kappa on [-width, width]; direct quadrature outside."""
    tol = TOL.pv if tol is None else tol
    # snap to a coarse geometric ladder so nearby specs share one spline
    width = float(2.0 ** (np.ceil(4 * np.log2(width * 1.05)) / 4))
    spl = _lamb_spline(float(beta), float(omega_c), width, float(tol))

    def S(w):
        w = np.asarray(w, float)
        out = spl(np.clip(w, -width, width))
        far = np.abs(w) > width
        if np.any(far):
            out = np.array(out, float)
            for k in zip(*np.nonzero(far)):
                out[k] = lamb_shift_pv(w[k], beta, omega_c, 1.0, tol)
        return out

    return S


# Lindblad structure in the instantaneous eigenbasis

def bohr_bins(eps, omega_bin=OMEGA_BIN):
    """Cluster the Bohr frequencies w_ab = eps_b - eps_a.

    Returns (labels[d, d], representative frequency per label).
    """
    w = eps[None, :] - eps[:, None]
    flat = w.ravel()
    order = np.argsort(flat, kind="stable")
    sw = flat[order]
    starts = np.concatenate([[True], np.diff(sw) > omega_bin])
    lab_sorted = np.cumsum(starts) - 1
    labels = np.empty_like(lab_sorted)
    labels[order] = lab_sorted
    rep = np.bincount(lab_sorted, weights=sw) / np.bincount(lab_sorted)
    return labels.reshape(w.shape), rep


@dataclass
class LindbladSet:
    """Jump operators L_{w,alpha} (lab frame) with their Bohr frequencies."""

    omegas: np.ndarray
    ops: list  # ops[k] is a list over qubits alpha
    eps: np.ndarray
    V: np.ndarray

    def completeness_residual(self, spec):
        Zs = operators(spec)[2]
        res = 0.0
        for a in range(Zs.shape[0]):
            tot = sum(L[a] for L in self.ops)
            res = max(res, float(np.max(np.abs(tot - Zs[a]))))
        return res


def _eigen(spec, s):
    H = _h_real(spec, s)
    return np.linalg.eigh(H)


def lindblad_ops_at(spec, t, omega_bin=OMEGA_BIN) -> LindbladSet:
    t = _check_t(spec, t)
    eps, V = _eigen(spec, t / spec.t_f)
    labels, rep = bohr_bins(eps, omega_bin)
    Zs = operators(spec)[2]
    Zf = np.einsum("ji,ajk,kl->ail", V, Zs, V)
    ops = []
    for k in range(rep.size):
        mask = labels == k
        ops.append([V @ np.where(mask, Zf[a], 0.0) @ V.T for a in range(Zs.shape[0])])
    return LindbladSet(rep, [[o.astype(complex) for o in L] for L in ops], eps, V)


def _dissipator_parts(eps, Zf, rate, shift, omega_bin=OMEGA_BIN):
    """Superoperator D and Lamb-shift Hamiltonian in the eigenframe.

    Zf[alpha] = V^dag sz_alpha V. Row-major vec, D[(a,c),(b,d)].
    K[(a,c),(b,d)] = sum_alpha gamma(w_ab) Z_ab Z*_cd [w_ab ~ w_cd]
    A_bd = sum_{alpha,a} gamma(w_ab) Z*_ab Z_ad [w_ab ~ w_ad]
    """
    d = eps.size
    labels, rep = bohr_bins(eps, omega_bin)
    same = labels.reshape(-1)[:, None] == labels.reshape(-1)[None, :]
    g = rate(rep)[labels]
    ZZ = np.einsum("xab,xcd->abcd", Zf, Zf.conj()) * same.reshape(d, d, d, d)
    K4 = g[:, :, None, None] * ZZ
    Kd = K4.transpose(0, 2, 1, 3).reshape(d * d, d * d)
    A = np.einsum("abad->bd", K4).conj()
    I = np.eye(d)
    D = Kd - 0.5 * (np.kron(A, I) + np.kron(I, A.T))
    HLS = None
    if shift is not None:
        sv = shift(rep)[labels]
        HLS = np.einsum("abad->bd", sv[:, :, None, None] * ZZ).conj()
        HLS = 0.5 * (HLS + HLS.conj().T)
    return D, HLS


def _rate_fn(spec):
    return lambda w: ohmic_rate(w, spec.beta, spec.omega_c, spec.kappa)


def _shift_fn(spec):
    if not spec.lamb_shift or spec.kappa == 0:
        return None
    S = lamb_shift_function(spec.beta, spec.omega_c, spectral_width(spec))
    return lambda w: spec.kappa * S(w)


def lamb_shift_at(spec, t) -> np.ndarray:
    """H_LS = sum_{w,alpha} S(w) L^dag L in the lab frame."""
    t = _check_t(spec, t)
    d = spec.dim
    if spec.kappa == 0:
        return np.zeros((d, d), complex)
    eps, V = _eigen(spec, t / spec.t_f)
    Zf = np.einsum("ji,ajk,kl->ail", V, operators(spec)[2], V)
    S = lamb_shift_function(spec.beta, spec.omega_c, spectral_width(spec))
    _, HLS = _dissipator_parts(eps, Zf, lambda w: np.zeros_like(w), lambda w: spec.kappa * S(w))
    out = V @ HLS @ V.T
    return 0.5 * (out + dag(out))


def dissipator_at(spec, t) -> np.ndarray:
    """Lab-frame dissipator superoperator (row-major vec)."""
    t = _check_t(spec, t)
    eps, V = _eigen(spec, t / spec.t_f)
    Zf = np.einsum("ji,ajk,kl->ail", V, operators(spec)[2], V)
    D, _ = _dissipator_parts(eps, Zf, _rate_fn(spec), None)
    U = np.kron(V, V)
    return U @ D @ U.T


def non_unitality_witness(spec, t) -> np.ndarray:
    """sum_w gamma(w) [L_w, L_w^dag] = D(1), the dissipator applied to the identity.

    Pairing w with -w (L_{-w} = L_w^dag) leaves sum_{w>0} (gamma(w) - gamma(-w)) [L_w, L_w^dag],
    which is how it is evaluated; it is finite for every beta >= 0.
    """
    t = _check_t(spec, t)
    d = spec.dim
    if spec.kappa == 0:
        return np.zeros((d, d), complex)
    ls = lindblad_ops_at(spec, t)
    out = np.zeros((d, d), complex)
    for w, Ls in zip(ls.omegas, ls.ops):
        if w <= OMEGA_BIN:
            continue
        c = rate_asymmetry(w, spec.omega_c, spec.kappa)
        for L in Ls:
            out += c * (L @ dag(L) - dag(L) @ L)
    return out


# eigenframe propagator

@dataclass
class SolverOptions:
    ode_tol: float = None
    h_max_frac: float = 0.01  # h <= h_max_frac * T
    max_steps: int = 200000
    h_min: float = 1e-10  # ns
    slow: float = 1.0  # |Omega| h below this counts as slowly varying
    omega_bin: float = OMEGA_BIN
    cluster_tol: float = 1e-5  # relative level spacing treated as degenerate
    magnus_limit: float = 1.0  # bound on the row-sum norm of the first Magnus term
    record: bool = False

    def __post_init__(self):
        if self.ode_tol is None:
            self.ode_tol = TOL.ode


class StepSizeUnderflow(DomainError):
    pass


@dataclass
class Frame:
    s: float
    eps: np.ndarray  # diagonal of V^T H V
    V: np.ndarray


@dataclass
class _EigPoint:
    s: float
    w: np.ndarray
    V: np.ndarray  # eigenvectors, columns matched to the reference frame


def _eig_point(spec, s, Vref):
    w, V = np.linalg.eigh(_h_real(spec, s))
    if Vref is not None:
        ov = (Vref.T @ V) ** 2
        r, c = linear_sum_assignment(-ov)
        perm = c[np.argsort(r)]
        V, w = V[:, perm], w[perm]
    return _EigPoint(s, w, V)


def _clusters(points, tol):
    """Group reference columns whose levels come within tol at any of the points."""
    d = points[0].w.size
    parent = list(range(d))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for p in points:
        scale = max(1.0, float(np.max(np.abs(p.w))))
        order = np.argsort(p.w)
        close = np.diff(p.w[order]) < tol * scale
        for k in np.nonzero(close)[0]:
            ri, rj = find(order[k]), find(order[k + 1])
            if ri != rj:
                parent[ri] = rj
    groups = {}
    for i in range(d):
        groups.setdefault(find(i), []).append(i)
    return [np.array(g) for g in groups.values()]


def _frame_from(p: _EigPoint, clusters, Vref):
    """Frame whose cluster blocks are the closest rotation of the eigenvectors to Vref.

    Returns (frame matrix, R = V_frame^T V_eig), R block diagonal over clusters.
    """
    V = p.V.copy()
    if Vref is not None:
        for C in clusters:
            Vc = p.V[:, C]
            M = Vc.T @ Vref[:, C]
            U, _, Wt = np.linalg.svd(M)
            V[:, C] = Vc @ (U @ Wt)
    return V, V.T @ p.V


class _Gen:
    """Frame generator pieces at one evaluation point."""

    def __init__(self, spec, p, clusters, Vf, R, opts, rate, shift, side=1):
        Zs = operators(spec)[2]
        d = p.w.size
        same = np.zeros((d, d), bool)
        for C in clusters:
            same[np.ix_(C, C)] = True
        w = p.w
        Hd = p.V.T @ _hdot_real(spec, p.s, side) @ p.V
        gap = w[None, :] - w[:, None]
        safe = np.where(same, 1.0, gap)
        K = np.where(same, 0.0, Hd / safe)  # <a|d_t b> between clusters
        Hf = (R * w) @ R.T
        Heff = Hf - 1j * (R @ K @ R.T)
        D = np.zeros((d * d, d * d))
        if rate is not None:
            Zf = np.einsum("ji,ajk,kl->ail", p.V, Zs, p.V)
            De, HLS = _dissipator_parts(w, Zf, rate, shift, opts.omega_bin)
            Rk = np.kron(R, R)
            D = Rk @ De @ Rk.T
            if HLS is not None:
                Heff = Heff + R @ HLS @ R.T
        self.E = np.diag(Heff).real.copy()
        self.Heff = Heff - np.diag(np.diag(Heff))
        self.D = D
        self.adiabaticity = float(np.max(np.abs(np.where(same, 0.0, Hd / safe ** 2)))) if d > 1 else 0.0


def _ad(H):
    d = H.shape[0]
    I = np.eye(d)
    return np.kron(H, I) - np.kron(I, H.T)


def _filon_weights(x, h):
    """I0 = int_0^h e^{ixs} ds and I1 = int_0^h (s - h/2) e^{ixs} ds."""
    z = 1j * x * h
    small = np.abs(z) < 1e-2
    zs = np.where(small, 1.0, z)
    e = np.exp(zs)
    p1 = np.where(small, 1 + z / 2 + z ** 2 / 6 + z ** 3 / 24 + z ** 4 / 120, (e - 1) / zs)
    # int_0^1 t e^{zt} dt
    tw = np.where(small, 0.5 + z / 3 + z ** 2 / 8 + z ** 3 / 30 + z ** 4 / 144,
                  (e * (zs - 1) + 1) / zs ** 2)
    return h * p1, h * h * (tw - 0.5 * p1)


def _sph_jn(x):
    """Spherical Bessel j_0..j_3 at real x, rows of the result."""
    x = np.asarray(x, float)
    out = np.empty((4,) + x.shape)
    small = np.abs(x) < 2.0
    xs = x[small]
    y = -0.5 * xs * xs
    for n in range(4):
        # x^n sum_k y^k / (k! (2n + 2k + 1)!!)
        term = np.full_like(xs, 1.0 / float(np.prod(np.arange(1, 2 * n + 2, 2))))
        acc = term.copy()
        for k in range(1, 20):
            term = term * y / (k * (2 * n + 2 * k + 1))
            acc = acc + term
        out[n][small] = xs ** n * acc
    xb = x[~small]
    sn, cs = np.sin(xb), np.cos(xb)
    out[0][~small] = sn / xb
    out[1][~small] = sn / xb ** 2 - cs / xb
    out[2][~small] = (3 / xb ** 2 - 1) * sn / xb - 3 * cs / xb ** 2
    out[3][~small] = (15 / xb ** 3 - 6 / xb) * sn / xb - (15 / xb ** 2 - 1) * cs / xb
    return out


# cubic fit of G through s = 0, the two Gauss points and s = h, in Legendre polynomials of 2s/h - 1
_LEG_V = np.array([-1.0, -1 / np.sqrt(3), 1 / np.sqrt(3), 1.0])
_LEG_FIT = np.linalg.inv(np.polynomial.legendre.legvander(_LEG_V, 3))


def _filon_cubic(Gs, Om, h):
    """int_0^h G(s) e^{i Om s} ds for the cubic through the four samples Gs."""
    c = np.einsum("nk,kij->nij", _LEG_FIT, np.asarray(Gs))
    x = 0.5 * Om * h
    j = _sph_jn(x)
    ph = 0.5 * h * np.exp(1j * x)
    return ph * sum(c[n] * (2 * 1j ** n) * j[n] for n in range(4))


def _phi1(z):
    """(e^z - 1) / z, with a series for |z| < 1/2."""
    z = np.asarray(z, complex)
    out = np.empty_like(z)
    small = np.abs(z) < 0.5
    big = ~small
    zb = z[big]
    out[big] = (np.exp(zb) - 1) / zb
    zs = z[small]
    acc = np.ones_like(zs)
    for k in range(17, 1, -1):
        acc = 1 + zs * acc / k
    out[small] = acc
    return out


def _dd2(u, v):
    """Divided difference e[u, v] of exp."""
    return np.exp(u) * _phi1(v - u)


def _taylor_dd(nodes, e0=None, nterms=22):
    """Divided difference of exp at close nodes (rows of `nodes`) by a series about the first node.

    e0 is exp of the first row when already known.
    """
    y = nodes - nodes[0]
    n = nodes.shape[0]
    # complete homogeneous polynomials h_k of y[1:], built up one variable at a time
    hk = [np.ones_like(y[0])]
    for _ in range(1, nterms):
        hk.append(hk[-1] * y[1])
    for var in range(2, n):
        prev = hk[0]
        new = [prev]
        for k in range(1, nterms):
            prev = hk[k] + y[var] * prev
            new.append(prev)
        hk = new
    tot = np.zeros_like(y[0])
    fact = float(np.prod(np.arange(1, n)))  # (n - 1)!
    for k in range(nterms):
        tot = tot + hk[k] / fact
        fact *= k + n
    return (np.exp(nodes[0]) if e0 is None else e0) * tot


_NEAR = 1.5
_PAIRS3 = np.array([(0, 1, 2), (0, 2, 1), (1, 2, 0)])  # endpoints p, q and the middle node
_PAIRS4 = np.array([(0, 1, 2, 3), (0, 2, 1, 3), (0, 3, 1, 2), (1, 2, 0, 3), (1, 3, 0, 2), (2, 3, 0, 1)])


def _dd(nodes, ex=None):
    """Divided difference of exp over the rows of `nodes` (1 to 4 nodes), vectorized.

    ex holds exp(nodes) when known. Close node sets use a series; otherwise
    the two most distant nodes p, q give e[p, mid, q] = (e[mid, q] - e[p, mid]) / (q - p).
    """
    nodes = np.asarray(nodes, complex)
    if ex is None:
        ex = np.exp(nodes)
    n = nodes.shape[0]
    if n == 1:
        return ex[0]
    shape = nodes.shape[1:]
    nodes = nodes.reshape(n, -1)
    ex = ex.reshape(n, -1)
    if n == 2:
        dz = nodes[1] - nodes[0]
        out = np.empty_like(dz)
        near = np.abs(dz) < 0.5
        far = ~near
        out[far] = (ex[1, far] - ex[0, far]) / dz[far]
        out[near] = ex[0, near] * _phi1(dz[near])
        return out.reshape(shape)
    pairs = _PAIRS3 if n == 3 else _PAIRS4
    dist = np.abs(nodes[pairs[:, 0]] - nodes[pairs[:, 1]])
    pick = np.argmax(dist, axis=0)
    near = dist[pick, np.arange(pick.size)] < _NEAR
    out = np.empty(nodes.shape[1], complex)
    if near.any():
        out[near] = _taylor_dd(nodes[:, near], ex[0, near])
    far = ~near
    if far.any():
        sel = pairs[pick[far]].T
        nd = np.take_along_axis(nodes[:, far], sel, axis=0)
        xd = np.take_along_axis(ex[:, far], sel, axis=0)
        p, q = nd[0], nd[1]
        right = _dd(np.concatenate([nd[2:], nd[1:2]]), np.concatenate([xd[2:], xd[1:2]]))
        left = _dd(np.concatenate([nd[0:1], nd[2:]]), np.concatenate([xd[0:1], xd[2:]]))
        out[far] = (right - left) / (q - p)
    return out.reshape(shape)


def _dd3(x, y):
    """e[0, x, y]."""
    x = np.asarray(x, complex)
    return _dd(np.stack([np.zeros_like(x), x, np.asarray(y, complex) + 0 * x]))


GAUSS = (0.5 - np.sqrt(3) / 6, 0.5 + np.sqrt(3) / 6)


def _simplex_integrals(x, y, h, ex=None, ey=None):
    """Integrals over 0 <= s2 <= s1 <= h of e^{i x s1 + i y s2} times 1, (s1 - h/2), (s2 - h/2).

    ex = e^{i x h} and exy = e^{i (x + y) h} may be supplied.
    """
    al = 1j * np.asarray(x, float) * h
    ab = 1j * (np.asarray(x, float) + y) * h
    ea = np.exp(al) if ex is None else ex
    eb = np.exp(ab) if ey is None else ey
    z = np.zeros_like(al)
    one = np.ones_like(ea)
    e3 = _dd(np.stack([z, al, ab]), np.stack([one, ea, eb]))
    e_aa = _dd(np.stack([z, al, al, ab]), np.stack([one, ea, ea, eb]))
    e_bb = _dd(np.stack([z, al, ab, ab]), np.stack([one, ea, eb, eb]))
    J00 = h * h * e3
    J10 = h ** 3 * (e_aa + e_bb - 0.5 * e3)
    J01 = h ** 3 * (e_bb - 0.5 * e3)
    return J00, J10, J01


def _fast_magnus2(g0, g1, Om, slow, h, rel=1e-15):
    """Second Magnus term for products that involve a rapidly rotating entry.

    With G(s) = g0 + g1 (s - h/2) and phases e^{i Om s}, the (i, k) entry is
    1/2 sum_j over the ordered double integral of
    G_ij(s1) G_jk(s2) e^{i(a s1 + b s2)} - G_ij(s2) G_jk(s1) e^{i(a s2 + b s1)},
    a = Om_ij, b = Om_jk, kept to first order in g1. Entries below rel times
    the largest are dropped.
    """
    mag = np.abs(g0) + np.abs(g1) * h
    nz = mag > rel * max(float(mag.max()), 1e-300)
    keep = nz[:, :, None] & nz[None, :, :] & ~(slow[:, :, None] & slow[None, :, :])
    I, Jm, K = np.nonzero(keep)
    out = np.zeros_like(g0)
    if I.size == 0:
        return out
    a = Om[I, Jm]
    b = Om[Jm, K]
    ph = np.exp(1j * Om * h)
    A00, A10, A01 = _simplex_integrals(a, b, h, ph[I, Jm], ph[I, K])
    B00, B10, B01 = _simplex_integrals(b, a, h, ph[Jm, K], ph[I, K])
    val = (g0[I, Jm] * g0[Jm, K] * (A00 - B00)
           + g1[I, Jm] * g0[Jm, K] * (A10 - B01)
           + g0[I, Jm] * g1[Jm, K] * (A01 - B10))
    np.add.at(out, (I, K), 0.5 * val)
    return out


@dataclass
class AnnealResult:
    spec: AnnealSpec
    Pi: np.ndarray  # frame transfer superoperator
    frame0: Frame
    frame1: Frame
    n_steps: int
    n_rejected: int
    max_adiabaticity: float
    trace_residual: float
    history: list = field(default_factory=list)

    def superoperator(self) -> np.ndarray:
        """Lab-frame superoperator of the anneal, row-major vec."""
        V0, V1 = self.frame0.V, self.frame1.V
        return np.kron(V1, V1) @ self.Pi @ np.kron(V0.T, V0.T)

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, complex)
        d = X.shape[0]
        return (self.superoperator() @ X.reshape(-1)).reshape(d, d)

    def apply_dual(self, Y) -> np.ndarray:
        Y = np.asarray(Y, complex)
        d = Y.shape[0]
        S = self.superoperator()
        return (S.conj().T @ Y.reshape(-1)).reshape(d, d)

    def channel(self) -> chn.CPMap:
        return chn.from_superoperator(self.superoperator())


def _superop_norm(M):
    return float(np.max(np.abs(M))) if M.size else 0.0


@dataclass
class _Step:
    M: np.ndarray  # coefficients in the incoming frame -> coefficients in V_out
    V_out: np.ndarray
    pt_out: _EigPoint
    size: float  # row-sum norm of the first Magnus term
    adiabaticity: float


def _step(spec, opts, rate, shift, t, h, V_in, pt_in) -> _Step:
    """One Magnus-Filon step over [t, t + h] in the frame carried from V_in."""
    d = spec.dim
    T = spec.T
    s1 = 1.0 if t + h >= T * (1 - 1e-14) else (t + h) / T
    pts = [pt_in] + [_eig_point(spec, (t + c * h) / T, V_in) for c in GAUSS] + [_eig_point(spec, s1, V_in)]
    clusters = _clusters(pts, opts.cluster_tol)
    frames = [_frame_from(p, clusters, V_in) for p in pts]
    gens = [_Gen(spec, p, clusters, Vf, R, opts, rate, shift, side)
            for p, (Vf, R), side in zip(pts, frames, (1, 1, 1, -1))]
    Ebar = 0.5 * (gens[1].E + gens[2].E)
    om = (Ebar[:, None] - Ebar[None, :]).reshape(-1)
    Om = om[:, None] - om[None, :]
    G = [-1j * _ad(np.diag(g.E - Ebar) + g.Heff) + g.D for g in gens]
    tau = np.array(GAUSS) * h
    W1 = _filon_cubic(G, Om, h)
    slow = np.abs(Om) * h < opts.slow
    Gs = [np.where(slow, Gk * np.exp(1j * Om * tk), 0.0) for Gk, tk in zip(G[1:3], tau)]
    W2 = (np.sqrt(3) * h * h / 12) * (Gs[1] @ Gs[0] - Gs[0] @ Gs[1])
    if not np.all(slow):
        gm0 = 0.5 * (G[1] + G[2])
        gm1 = (G[2] - G[1]) / (tau[1] - tau[0])
        W2 = W2 + _fast_magnus2(gm0, gm1, Om, slow, h)
    M = np.exp(-1j * om * h)[:, None] * linalg.expm(W1 + W2)
    # change of coordinates at t when the cluster structure moved the start frame
    R0 = frames[0][0].T @ V_in
    if np.max(np.abs(R0 - np.eye(d))) > 1e-14:
        M = M @ np.kron(R0, R0)
    size = float(np.max(np.sum(np.abs(W1), axis=1)))
    return _Step(M, frames[3][0], pts[3], size, max(gens[1].adiabaticity, gens[2].adiabaticity))


def anneal(spec: AnnealSpec, options: SolverOptions | None = None) -> AnnealResult:
    """Transfer map of the master equation over [0, t_f] in the adiabatic frame.

    The state is carried in the instantaneous eigenbasis, with nearly
    degenerate levels kept together as clusters. Each step works in the
    interaction picture of the mean level energies: a cubic fit of the
    generator is integrated against the exact phase factors (first Magnus
    term) and the second Magnus term is added. The local error is taken from
    step doubling and the two half steps are kept; its max-abs size in the
    superoperator is held below ode_tol on every step.
    """
    opts = options or SolverOptions()
    d = spec.dim
    T = spec.T
    rate = _rate_fn(spec) if spec.kappa > 0 else None
    if rate is not None and not spec.beta > 0:
        raise DomainError("the master equation needs beta > 0 when kappa > 0")
    shift = _shift_fn(spec) if rate is not None else None
    nodes = spec.schedule.s
    tol = opts.ode_tol
    h_max = opts.h_max_frac * T
    p0 = _eig_point(spec, 0.0, None)
    V_prev, _ = _frame_from(p0, _clusters([p0], opts.cluster_tol), None)
    frame0 = Frame(0.0, np.einsum("ij,ik,kj->j", V_prev, _h_real(spec, 0.0), V_prev), V_prev)
    Pi = np.eye(d * d, dtype=complex)
    t = 0.0
    h = min(h_max, T)
    n_steps = n_rej = 0
    max_ad = 0.0
    hist = []
    pt0 = _eig_point(spec, 0.0, V_prev)
    args = (spec, opts, rate, shift)
    just_rejected = False
    while t < T * (1 - 1e-14):
        if n_steps + n_rej > opts.max_steps:
            raise StepSizeUnderflow(f"step budget exhausted at t = {t / NS_PER_US:.6g} us")
        # stay inside one linear piece of the schedule
        k = np.searchsorted(nodes, t / T, side="right")
        t_node = nodes[min(k, nodes.size - 1)] * T
        h = min(h, h_max, t_node - t if t_node > t + 1e-12 * T else T - t)
        if T - t - h < 1e-12 * T:
            h = T - t
        if h < opts.h_min:
            raise StepSizeUnderflow(f"step size underflow (h = {h:.3e} ns) at t = {t / NS_PER_US:.6g} us")
        full = _step(*args, t, h, V_prev, pt0)
        can_shrink = h > opts.h_min * 1.0001
        if full.size > opts.magnus_limit and can_shrink:
            h = max(h * max(0.9 * opts.magnus_limit / full.size, 0.1), opts.h_min)
            n_rej += 1
            continue
        a = _step(*args, t, 0.5 * h, V_prev, pt0)
        b = _step(*args, t + 0.5 * h, 0.5 * h, a.V_out, a.pt_out)
        Mh = b.M @ a.M
        Rb = full.V_out.T @ b.V_out
        err = _superop_norm(np.kron(Rb, Rb) @ Mh - full.M)
        ratio = tol / max(err, 1e-300)
        if err > tol and can_shrink:
            h = max(h * min(max(0.9 * ratio ** (1 / 3), 0.1), 0.7), opts.h_min)
            n_rej += 1
            just_rejected = True
            continue
        Pi = Mh @ Pi
        V_prev, pt0 = b.V_out, b.pt_out
        s1 = b.pt_out.s
        t = T if s1 == 1.0 else t + h
        n_steps += 1
        max_ad = max(max_ad, a.adiabaticity, b.adiabaticity)
        if opts.record:
            fr = Frame(s1, np.einsum("ij,ik,kj->j", V_prev, _h_real(spec, s1), V_prev), V_prev)
            hist.append((t / NS_PER_US, Pi.copy(), fr))
        # the local error goes like h^3 to h^5 depending on which terms dominate;
        # grow cautiously and not at all right after a rejection
        grow = min(0.9 * ratio ** (1 / 5), 0.9 * opts.magnus_limit / max(full.size, 1e-300))
        if not just_rejected:
            h = h * min(3.0, max(1.0, grow))
        just_rejected = False
    fr = Frame(1.0, np.einsum("ij,ik,kj->j", V_prev, _h_real(spec, 1.0), V_prev), V_prev)
    tr = np.eye(d).reshape(-1)
    trace_res = float(np.max(np.abs(tr @ Pi - tr)))
    log.debug("anneal: %d steps, %d rejected, trace residual %.2e", n_steps, n_rej, trace_res)
    return AnnealResult(spec, Pi, frame0, fr, n_steps, n_rej, max_ad, trace_res, hist)


def propagate(spec, X0, options=None, result=None) -> np.ndarray:
    """Evolve an arbitrary operator (state or identity) from 0 to t_f."""
    res = anneal(spec, options) if result is None else result
    X0 = np.asarray(X0, complex)
    if X0.shape != (spec.dim, spec.dim):
        raise ValidationError(f"operator shape {X0.shape} does not match dimension {spec.dim}")
    return res.apply(X0)


def final_basis(spec):
    """Readout basis at t_f: the computational basis ordered by energy when H(t_f) is diagonal."""
    H = _h_real(spec, 1.0)
    if np.max(np.abs(H - np.diag(np.diag(H)))) == 0:
        order = np.argsort(np.diag(H), kind="stable")
        V = np.eye(spec.dim)[:, order]
        return np.diag(H)[order], V
    return np.linalg.eigh(H)


def basis_labels(spec, V):
    """Bit-string labels for computational basis columns, indices otherwise."""
    n = spec.n_qubits
    out = []
    for k in range(V.shape[1]):
        col = np.abs(V[:, k])
        j = int(np.argmax(col))
        out.append(format(j, f"0{n}b") if abs(col[j] - 1) < 1e-12 else f"e{k}")
    return out


@dataclass
class TransitionStats:
    M: np.ndarray  # M[b, a] = p_{b|a}
    eps0: np.ndarray
    eps1: np.ndarray
    V0: np.ndarray
    V1: np.ndarray
    labels: list
    result: AnnealResult

    def marginal(self, p):
        return self.M @ p


def induced_channel_statistics(spec, options=None, result=None) -> TransitionStats:
    """p_{b|a}: start in each eigenstate of H(0), read populations in the final basis."""
    res = anneal(spec, options) if result is None else result
    V0 = res.frame0.V
    order = np.argsort(res.frame0.eps, kind="stable")
    V0 = V0[:, order]
    eps0 = res.frame0.eps[order]
    eps1, V1 = final_basis(spec)
    S = res.superoperator()
    d = spec.dim
    M = np.empty((d, d))
    for a in range(d):
        P = np.outer(V0[:, a], V0[:, a]).astype(complex)
        out = (S @ P.reshape(-1)).reshape(d, d)
        M[:, a] = np.einsum("ib,ij,jb->b", V1, out, V1).real
    return TransitionStats(M, eps0, eps1, V0, V1, basis_labels(spec, V1), res)


def time_series(result: AnnealResult, X0):
    """Rows (t_us, populations in the instantaneous frame..., trace residual)."""
    X0 = np.asarray(X0, complex)
    d = X0.shape[0]
    x0 = (result.frame0.V.T @ X0 @ result.frame0.V).reshape(-1)
    rows = []
    tr0 = np.trace(X0)
    for t, Pi, fr in result.history:
        y = (Pi @ x0).reshape(d, d)
        pops = np.diag(y).real
        rows.append([t, *pops, abs(np.trace(y) - tr0)])
    return rows


# independent reference in the lab frame

def lab_generator(spec, s):
    """Full lab-frame generator superoperator at s = t/t_f."""
    H = _h_real(spec, s).astype(complex)
    d = spec.dim
    eps, V = np.linalg.eigh(_h_real(spec, s))
    L = -1j * _ad(H)
    if spec.kappa > 0:
        Zf = np.einsum("ji,ajk,kl->ail", V, operators(spec)[2], V)
        D, HLS = _dissipator_parts(eps, Zf, _rate_fn(spec), _shift_fn(spec))
        U = np.kron(V, V)
        L = L + U @ D @ U.T
        if HLS is not None:
            L = L - 1j * _ad(V @ HLS @ V.T)
    return L


def reference_propagate(spec, X0, rtol=1e-10, atol=1e-12):
    """Direct DOP853 integration of the lab-frame equation; practical for short t_f only."""
    X0 = np.asarray(X0, complex)
    d = spec.dim
    T = spec.T

    def rhs(t, y):
        return lab_generator(spec, t / T) @ y

    sol = integrate.solve_ivp(rhs, (0.0, T), X0.reshape(-1), method="DOP853", rtol=rtol, atol=atol)
    if not sol.success:
        raise DomainError(f"reference integration failed: {sol.message}")
    return sol.y[:, -1].reshape(d, d)


def gibbs_at(spec, s):
    return gibbs_state(_h_real(spec, s), spec.beta)

"""Quadratic counterexample for FedAvg with several local steps, and client sampling schemes.

Device ``k`` minimises ``F_k(w) = 0.5 w'A_k w - b_k'w + 0.5 mu |w|^2`` where
the ``A_k`` are chain-Laplacian blocks summing to the tridiagonal ``A``.
FedAvg with exact gradients converges to ``A^{-1} b`` when ``E = 1`` and to a
different fixed point when ``E > 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, InvalidParameterError


@dataclass(frozen=True)
class QuadraticExample:
    N: int
    p: int
    mu_reg: float
    A: np.ndarray
    A_k: np.ndarray  # (N, d, d)
    B_k: np.ndarray  # (N, d, d)
    b: np.ndarray
    b_k: np.ndarray  # (N, d)

    @property
    def dim(self) -> int:
        return self.N * self.p + 1

    def M_k(self) -> np.ndarray:
        return self.A_k + self.mu_reg * np.eye(self.dim)[None]


def _unit(d: int, i: int) -> np.ndarray:
    e = np.zeros((d, d), dtype=np.int64)
    e[i, i] = 1
    return e


def build_quadratic_example(N: int, p: int, mu_reg: float = 0.0) -> QuadraticExample:
    if N < 2:
        raise InvalidParameterError("need N > 1 devices")
    if p < 1:
        raise InvalidParameterError("block size p must be >= 1")
    if mu_reg < 0:
        raise InvalidParameterError("mu_reg must be >= 0")
    d = N * p + 1
    A = 2 * np.eye(d, dtype=np.int64) - np.eye(d, k=1, dtype=np.int64) - np.eye(d, k=-1, dtype=np.int64)
    B = np.zeros((N, d, d), dtype=np.int64)
    for k in range(N):
        for i in range(k * p, (k + 1) * p):
            B[k, i, i] += 1
            B[k, i + 1, i + 1] += 1
            B[k, i, i + 1] -= 1
            B[k, i + 1, i] -= 1
    Ak = B.copy()
    Ak[0] += _unit(d, 0)
    Ak[N - 1] += _unit(d, d - 1)
    if not np.array_equal(Ak.sum(axis=0), A):
        raise InvalidParameterError("device matrices do not sum to A")
    b = np.zeros(d)
    b[0] = 1.0
    bk = np.zeros((N, d))
    bk[0] = b
    return QuadraticExample(N, p, float(mu_reg), A.astype(np.float64), Ak.astype(np.float64),
                            B.astype(np.float64), b, bk)


def optimal_point(ex: QuadraticExample) -> np.ndarray:
    d = ex.dim
    if ex.mu_reg == 0.0:
        i = np.arange(1, d + 1)
        return 1.0 - i / (ex.N * ex.p + 2)
    return np.linalg.solve(ex.A / ex.N + ex.mu_reg * np.eye(d), ex.b / ex.N)


def round_map(ex: QuadraticExample, E: int, eta: float) -> tuple[np.ndarray, np.ndarray]:
    """``(R, c)`` with one FedAvg round equal to ``w -> R w + c``."""
    d = ex.dim
    I = np.eye(d)
    R = np.zeros((d, d))
    c = np.zeros(d)
    for k in range(ex.N):
        S = I - eta * (ex.A_k[k] + ex.mu_reg * I)
        Sp = np.linalg.matrix_power(S, E)
        R += Sp
        acc = np.zeros(d)
        term = ex.b_k[k].copy()
        for _ in range(E):
            acc += term
            term = S @ term
        c += eta * acc
    return R / ex.N, c / ex.N


def contraction_factor(ex: QuadraticExample, E: int, eta: float) -> float:
    R, _ = round_map(ex, E, eta)
    return float(np.linalg.norm(R, 2))


@dataclass(frozen=True)
class FedAvgTrace:
    w: np.ndarray
    increments: np.ndarray
    rounds: int
    rho: float
    error_bound: float  # Cauchy tail bound on |w - limit|


def fedavg_deterministic(ex: QuadraticExample, E: int, eta: float, T: int, w0=None,
                         tol: float | None = None) -> FedAvgTrace:
    """Run FedAvg with exact local gradients for up to ``T`` rounds.

    Each round applies the averaged ``E``-step local map (see
    :func:`round_map` and :func:`local_steps_round`).  With ``tol`` set the loop stops once the tail
    bound ``rho/(1-rho) |w_{t+1} - w_t|`` drops below it.
    """
    if E < 1:
        raise InvalidParameterError("E must be >= 1")
    if not eta > 0:
        raise InvalidParameterError("eta must be positive")
    rho = contraction_factor(ex, E, eta)
    if rho >= 1.0:
        raise DivergenceError(f"round map is not a contraction: spectral norm {rho:.6g} >= 1")
    R, c = round_map(ex, E, eta)
    w = np.zeros(ex.dim) if w0 is None else np.asarray(w0, dtype=np.float64).copy()
    incs = []
    bound = math.inf
    for t in range(T):
        w_new = R @ w + c
        inc = float(np.linalg.norm(w_new - w))
        if incs and inc > incs[-1] * (1 + 1e-9) + 1e-13:
            raise DivergenceError(f"increment grew at round {t + 1}: spectral norm {rho:.6g}")
        incs.append(inc)
        w = w_new
        bound = rho / (1 - rho) * inc
        if tol is not None and bound < tol:
            break
    return FedAvgTrace(w, np.array(incs), len(incs), rho, bound)


def local_steps_round(ex: QuadraticExample, E: int, eta: float, w: np.ndarray) -> np.ndarray:
    """One round computed literally: ``E`` exact gradient steps per device, then the mean."""
    M = ex.M_k()
    local = np.broadcast_to(w, ex.b_k.shape).copy()
    for _ in range(E):
        local -= eta * (np.einsum("kij,kj->ki", M, local) - ex.b_k)
    return local.mean(axis=0)


def iterate_limit(ex: QuadraticExample, E: int, eta: float, max_doublings: int = 80) -> np.ndarray:
    """Limit of the round map, iterating ``2**k - 1`` rounds by repeated squaring."""
    R, c = round_map(ex, E, eta)
    w = np.zeros(ex.dim)
    for _ in range(max_doublings):
        if np.linalg.norm(R, 2) < 1e-18:
            break
        w = R @ w + c
        # compose the map with itself: w -> R(Rw + c) + c
        c = R @ c + c
        R = R @ R
    return w


def fixed_point(ex: QuadraticExample, E: int, eta: float) -> np.ndarray:
    R, c = round_map(ex, E, eta)
    return np.linalg.solve(np.eye(ex.dim) - R, c)


def gap_lower_bound(ex: QuadraticExample, E: int, eta: float) -> float:
    ws = optimal_point(ex)
    return (E - 1) * eta / 16.0 * float(np.linalg.norm(ex.A_k[0] @ ex.A_k[1] @ ws))


# --- client sampling -----------------------------------------------------

SCHEMES = ("I", "II")


@dataclass(frozen=True)
class SamplingSpec:
    scheme: str
    N: int
    K: int
    weights: np.ndarray | None = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise InvalidParameterError(f"scheme must be 'I' or 'II', got {self.scheme!r}")
        if self.K < 1 or self.N < 1:
            raise InvalidParameterError("N and K must be >= 1")
        if self.scheme == "II" and self.K > self.N:
            raise InvalidParameterError("scheme II needs K <= N")
        w = self.p
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12 or w.shape != (self.N,):
            raise InvalidParameterError("weights must be N non-negative numbers summing to 1")
        if self.scheme == "II" and not np.allclose(w, 1.0 / self.N, rtol=0, atol=1e-15):
            raise InvalidParameterError("scheme II requires uniform weights")

    @property
    def p(self) -> np.ndarray:
        if self.weights is None:
            return np.full(self.N, 1.0 / self.N)
        return np.asarray(self.weights, dtype=np.float64)


def sample_many(spec: SamplingSpec, rng: np.random.Generator, draws: int) -> np.ndarray:
    """``(draws, K)`` device indices; each row is one sampled multiset."""
    if spec.scheme == "I":
        cdf = np.cumsum(spec.p)
        cdf[-1] = 1.0
        return np.searchsorted(cdf, rng.random((draws, spec.K)), side="right")
    perm = np.broadcast_to(np.arange(spec.N), (draws, spec.N)).copy()
    rows = np.arange(draws)
    for i in range(spec.K):
        j = i + np.floor(rng.random(draws) * (spec.N - i)).astype(np.int64)
        a = perm[rows, i].copy()
        perm[rows, i] = perm[rows, j]
        perm[rows, j] = a
    return perm[:, :spec.K]


def sample_scheme(spec: SamplingSpec, rng: np.random.Generator) -> np.ndarray:
    return sample_many(spec, rng, 1)[0]


def scheme_aggregate(spec: SamplingSpec, v: np.ndarray, S) -> np.ndarray:
    """Aggregate local vectors ``v`` (N x d) over sampled indices ``S``.

    Accepts a single sample (length K) or a stack of samples (draws x K).
    """
    S = np.asarray(S)
    if S.shape[-1] != spec.K:
        raise InvalidParameterError(f"sample has {S.shape[-1]} entries, expected {spec.K}")
    # the sample is a multiset; a canonical order makes equal multisets sum identically
    S = np.sort(S, axis=-1)
    if spec.scheme == "I":
        return v[S].mean(axis=-2)
    scale = spec.p[S] * (spec.N / spec.K)
    return (scale[..., None] * v[S]).sum(axis=-2)


def clip(g: np.ndarray, G: float) -> np.ndarray:
    """Rescale rows of ``g`` to norm at most ``G``."""
    n = np.linalg.norm(g, axis=-1, keepdims=True)
    return g * np.minimum(1.0, G / np.maximum(n, 1e-300))


def clipped_local_iterates(w0: np.ndarray, N: int, E: int, eta: float, G: float,
                           rng: np.random.Generator, spread: float = 3.0) -> tuple[np.ndarray, np.ndarray]:
    """Run ``E`` clipped SGD steps per device on heterogeneous quadratics.

    Returns ``(v, trajectory)`` with ``v`` the final local models (N x d) and
    ``trajectory`` of shape (E+1, N, d).
    """
    d = w0.size
    centres = spread * rng.standard_normal((N, d))
    curv = rng.uniform(0.5, 2.0, (N, d))
    w = np.broadcast_to(w0, (N, d)).copy()
    traj = [w.copy()]
    for _ in range(E):
        g = curv * (w - centres) + rng.standard_normal((N, d))
        w = w - eta * clip(g, G)
        traj.append(w.copy())
    return w, np.stack(traj)


def scheme_variance_bound(spec: SamplingSpec, E: int, eta: float, G: float) -> float:
    base = 4.0 / spec.K * eta**2 * E**2 * G**2
    if spec.scheme == "II":
        return base * (spec.N - spec.K) / (spec.N - 1) if spec.N > 1 else 0.0
    return base

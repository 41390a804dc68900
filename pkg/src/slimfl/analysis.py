"""Convergence bounds, non-IIDness estimates, cost reports and a convergence detector."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import slimnet as sn
from .errors import DegenerateLinkError, InvalidParameterError
from .metrics import MetricsSeries
from .rng import stream

# --- non-IIDness ---------------------------------------------------------


def sample_variance(grad_fn: Callable[[np.ndarray], np.ndarray], n: int, batch_size: int,
                    trials: int, rng: np.random.Generator) -> float:
    """Mean of ``|grad_fn(batch) - grad_fn(all)|^2`` over uniformly drawn batches.

    Batches are drawn without replacement from ``range(n)``.
    """
    if n < 1:
        raise InvalidParameterError("shard must be nonempty")
    if not 1 <= batch_size:
        raise InvalidParameterError("batch_size must be >= 1")
    everything = np.arange(n)
    full = grad_fn(everything)
    if batch_size >= n:
        return 0.0
    total = 0.0
    for _ in range(trials):
        b = rng.choice(n, size=batch_size, replace=False)
        total += float(np.sum((grad_fn(b) - full) ** 2))
    return total / trials


def estimate_local_variance(model: sn.SlimmableModel, images: np.ndarray, labels: np.ndarray,
                            batch_size: int, trials: int = 64, seed: int = 0, device: int = 0,
                            width: int = 2) -> float:
    """Local gradient variance ``sigma_k^2`` of one device's shard."""

    def g(idx):
        return sn.grad(model, width, images[idx], labels[idx])[1]

    return sample_variance(g, len(labels), batch_size, trials, stream(seed, "variance", device))


def non_iidness(variances: Sequence[float]) -> float:
    """``delta``: mean of the per-device variances."""
    return float(np.mean(variances))


# --- bounds --------------------------------------------------------------


def gradient_variance_bound(delta: float, p1: float, p2: float, w: Sequence[float]) -> float:
    if p1 <= 0 or p2 <= 0:
        raise DegenerateLinkError("decoding probabilities must be positive")
    if delta < 0:
        raise InvalidParameterError("delta must be non-negative")
    return 4.0 * delta * (1.0 / p1 + 1.0 / p2) * float(np.sum(np.square(w)))


@dataclass(frozen=True)
class BoundParams:
    L: float
    mu: float
    delta: float
    p1: float
    p2: float
    w: tuple[float, float] = (0.5, 0.5)
    Delta1: float = 1.0

    def __post_init__(self):
        if not self.L >= self.mu > 0:
            raise InvalidParameterError("need L >= mu > 0")
        if self.delta < 0 or self.Delta1 < 0:
            raise InvalidParameterError("delta and Delta1 must be non-negative")
        if not 0 < self.p2 <= self.p1 <= 1:
            raise InvalidParameterError("need 0 < p2 <= p1 <= 1")
        if abs(sum(self.w) - 1.0) > 1e-12:
            raise InvalidParameterError("weights must sum to 1")

    @property
    def kappa(self) -> float:
        return self.L / self.mu

    @property
    def B(self) -> float:
        return gradient_variance_bound(self.delta, self.p1, self.p2, self.w)


def step_size(t, L: float, mu: float):
    """Schedule ``eta_t = 2 / (mu t + 2L - mu)``; ``eta_1 = 1/L``."""
    return 2.0 / (mu * np.asarray(t, dtype=np.float64) + 2.0 * L - mu)


def convergence_bound(t, params: BoundParams):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 1):
        raise InvalidParameterError("t must be >= 1")
    L, mu = params.L, params.mu
    return params.kappa * (mu * L * params.Delta1 + 2.0 * params.B) / (mu * t + 2.0 * L - mu)


def check_step_size(eta: float, L: float) -> None:
    """Step-size cap of the one-round progress lemma (``eta <= 1/L``)."""
    if eta > 1.0 / L * (1 + 1e-12):
        raise InvalidParameterError(f"step {eta} exceeds 1/L = {1.0 / L}")


def st_weight_grid(points: int = 101) -> np.ndarray:
    """``(points, 2)`` grid of weight pairs over the closed simplex edge."""
    w1 = np.linspace(0.0, 1.0, points)
    return np.column_stack([w1, 1.0 - w1])


# --- masked quadratic verification fleet ---------------------------------


@dataclass(frozen=True)
class MaskedQuadraticFleet:
    """Strongly convex two-width quadratic fleet with exactly known constants.

    Every device shares ``F(theta) = 0.5 (theta - theta*)' H (theta - theta*)``
    with diagonal ``H``; the first ``lh`` coordinates form the half width.  The
    superposed objective ``w1 F(theta . Xi_1) + w2 F(theta)`` has diagonal
    Hessian ``w1 D1 H D1 + w2 H`` and minimiser ``theta*``.  Device ``k`` adds
    zero-mean Gaussian noise of total variance ``sigma2[k]`` to each width's
    gradient.
    """

    h: np.ndarray
    lh: int
    theta_star: np.ndarray
    sigma2: np.ndarray
    w: tuple[float, float] = (0.5, 0.5)
    p1: float = 0.9
    p2: float = 0.7

    @property
    def dim(self) -> int:
        return self.h.size

    @property
    def xi1(self) -> np.ndarray:
        m = np.zeros(self.dim, dtype=bool)
        m[:self.lh] = True
        return m

    @property
    def K(self) -> int:
        return self.sigma2.size

    @property
    def composite_hessian(self) -> np.ndarray:
        w1, w2 = self.w
        return (w1 * self.xi1 + w2) * self.h

    @property
    def L(self) -> float:
        return float(self.composite_hessian.max())

    @property
    def mu(self) -> float:
        return float(self.composite_hessian.min())

    @property
    def delta(self) -> float:
        return float(self.sigma2.mean())

    def gap(self, theta: np.ndarray) -> np.ndarray:
        d = theta - self.theta_star
        return 0.5 * np.sum(self.composite_hessian * d * d, axis=-1)

    def bound_params(self, theta1: np.ndarray) -> BoundParams:
        return BoundParams(self.L, self.mu, self.delta, self.p1, self.p2, tuple(self.w),
                           float(np.sum((theta1 - self.theta_star) ** 2)))

    def aggregated_gradient(self, theta: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Decoding-weighted gradient mixture for a batch of trial states ``(n, d)``."""
        n, d, K = theta.shape[0], self.dim, self.K
        w1, w2 = self.w
        xi1 = self.xi1
        sd = np.sqrt(self.sigma2 / d)[None, :, None]
        res = theta - self.theta_star
        g_half = xi1 * (self.h * (xi1 * theta - self.theta_star))
        g_full = self.h * res
        noise1 = sd * rng.standard_normal((n, K, d))
        noise2 = sd * rng.standard_normal((n, K, d))
        g = w1 * xi1 * (g_half[:, None, :] + noise1) + w2 * (g_full[:, None, :] + noise2)
        u = rng.random((n, K))
        lh_ok = u < self.p1
        rh_ok = u < self.p2
        f_lh = (lh_ok[..., None] * g).sum(axis=1) / (K * self.p1)
        f_rh = (rh_ok[..., None] * g).sum(axis=1) / (K * self.p2)
        return np.where(xi1, f_lh, f_rh)


@dataclass(frozen=True)
class TheoremCheck:
    pass_fraction: float
    worst_ratio: np.ndarray  # per trial, max over t of gap / bound
    bound: np.ndarray
    mean_gap: np.ndarray


def default_fleet(seed: int = 0, K: int = 10, dim: int = 8, p1: float = 0.9, p2: float = 0.7) -> MaskedQuadraticFleet:
    rng = stream(seed, "quadratic-fleet")
    h = rng.uniform(1.0, 4.0, dim)
    h[0], h[-1] = 4.0, 1.0
    return MaskedQuadraticFleet(
        h=h, lh=dim // 2, theta_star=rng.standard_normal(dim),
        sigma2=rng.uniform(0.5, 1.5, K), p1=p1, p2=p2,
    )


def run_theorem_trials(fleet: MaskedQuadraticFleet, trials: int = 200, T: int = 10_000,
                       seed: int = 0, theta1: np.ndarray | None = None) -> TheoremCheck:
    """Run SGD with the bound's step schedule and compare every gap to the bound."""
    if theta1 is None:
        theta1 = fleet.theta_star + 1.0 / math.sqrt(fleet.dim)
    params = fleet.bound_params(theta1)
    t = np.arange(1, T + 1)
    bound = convergence_bound(t, params)
    eta = step_size(t, fleet.L, fleet.mu)
    theta = np.broadcast_to(theta1, (trials, fleet.dim)).copy()
    worst = np.zeros(trials)
    mean_gap = np.empty(T)
    for i in range(T):
        gap = fleet.gap(theta)
        mean_gap[i] = gap.mean()
        worst = np.maximum(worst, gap / bound[i])
        if i + 1 < T:
            theta = theta - eta[i] * fleet.aggregated_gradient(theta, stream(seed, "theorem", i))
    return TheoremCheck(float(np.mean(worst <= 1.0)), worst, bound, mean_gap)


# --- cost reports --------------------------------------------------------


def comm_power(algorithm: str, P: float) -> float:
    """Uplink transmit power per device per round in mW."""
    if algorithm in ("slimfl", "vanilla_0.5x", "vanilla_1.0x"):
        return P
    if algorithm == "vanilla_1.5x":
        return 2.0 * P
    raise InvalidParameterError(f"unknown algorithm {algorithm!r}")


@dataclass(frozen=True)
class EnergyEntry:
    comm_mW_per_round: float
    flops_per_epoch: int
    rounds_to_convergence: int | None
    total_comm_mW: float | None
    total_flops: int | None


def energy_entry(series: MetricsSeries, rounds: int | None) -> EnergyEntry:
    if len(series) == 0:
        return EnergyEntry(math.nan, 0, rounds, None, None)
    comm = float(series[0].comm_mW)
    flops = int(series[0].flops)
    if rounds is None:
        return EnergyEntry(comm, flops, None, None, None)
    return EnergyEntry(comm, flops, rounds, comm * rounds, flops * rounds)


def energy_report(runs: Mapping[str, MetricsSeries], width: int = 2, **detector) -> dict[str, EnergyEntry]:
    """Per-algorithm cost per round and totals up to the detected convergence round."""
    out = {}
    for name, series in runs.items():
        acc = [r.top1(width) for r in series]
        out[name] = energy_entry(series, detect_convergence(acc, **detector))
    return out


def bits_report(series: MetricsSeries) -> dict[str, float]:
    half = sum(r.decoded_bits_half for r in series)
    full = sum(r.decoded_bits_full for r in series)
    dropped = sum(r.dropped_bits for r in series)
    scale = 8e6
    return {
        "decoded_half_MB": half / scale,
        "decoded_full_MB": full / scale,
        "dropped_MB": dropped / scale,
        "attempted_MB": (half + full + dropped) / scale,
    }


# --- convergence detector ------------------------------------------------


def detect_convergence(accuracy: Sequence[float], mu_ref: float = 0.8, sigma_ref: float = 0.072,
                       window: int = 100) -> int | None:
    """First round whose trailing window has mean above ``mu_ref`` and std below ``sigma_ref``.

    Accuracies are fractions; rounds are numbered from 1.  The standard
    deviation is the population one.
    """
    if window < 1:
        raise InvalidParameterError("window must be >= 1")
    a = np.asarray(accuracy, dtype=np.float64)
    if a.size < window:
        return None
    win = np.lib.stride_tricks.sliding_window_view(a, window)
    ok = (win.mean(axis=1) > mu_ref) & (win.std(axis=1) < sigma_ref)
    hits = np.flatnonzero(ok)
    return int(hits[0]) + window if hits.size else None

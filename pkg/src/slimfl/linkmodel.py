"""Superposition-coded uplink: decoding thresholds, probabilities, power split.

A device transmits its left-half (LH) segment with power ``P1`` and its
right-half (RH) segment with ``P2 < P1`` superposed in one slot.  The server
decodes LH first treating RH as interference, cancels it, then decodes RH.
Under unit-mean exponential fading ``g`` the two success events reduce to
``g >= tau1`` and ``g >= tau2``.

All powers are milliwatts; dBm and dB/Hz inputs are converted at the edge.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .errors import (
    DegenerateLinkError,
    DomainError,
    InvalidParameterError,
    UndecodableConfigError,
)

# Reverse-engineered code-rate calibration; see README ("Calibration").
DEFAULT_U_PRIME = 0.5841


def dbm_to_milliwatts(x: float) -> float:
    return 10.0 ** (x / 10.0)


def milliwatts_to_dbm(p: float) -> float:
    return 10.0 * math.log10(p)


def noise_power_from_density(n0_db_hz: float, bandwidth: float) -> float:
    """Noise power in mW for spectral density ``n0_db_hz`` (dBm/Hz) over ``bandwidth`` Hz."""
    if bandwidth <= 0:
        raise InvalidParameterError("bandwidth must be positive")
    return dbm_to_milliwatts(n0_db_hz) * bandwidth


def effective_code_rate(u: float, W: float) -> float:
    """Threshold SINR ``2**(u/W) - 1`` for code rate ``u`` over bandwidth ``W``."""
    if W <= 0:
        raise InvalidParameterError(f"bandwidth W must be positive, got {W}")
    if u < 0:
        raise InvalidParameterError(f"code rate u must be non-negative, got {u}")
    return 2.0 ** (u / W) - 1.0


def code_rate_for(u_prime: float, W: float) -> float:
    """Inverse of :func:`effective_code_rate`."""
    return W * math.log2(1.0 + u_prime)


def link_constant(sigma2: float, d: float, beta: float) -> float:
    if sigma2 < 0:
        raise InvalidParameterError("noise power must be non-negative")
    if d <= 0:
        raise InvalidParameterError("distance must be positive")
    if beta < 2:
        raise InvalidParameterError("path-loss exponent must be >= 2")
    return sigma2 * d**beta


@dataclass(frozen=True)
class ChannelParams:
    distance_d: float
    pathloss_beta: float
    bandwidth_W: float
    code_rate_u: float
    noise_sigma2: float
    total_power_P: float
    carrier_fc: float = 5.9e9

    def __post_init__(self):
        if self.pathloss_beta < 2:
            raise InvalidParameterError("pathloss_beta must be >= 2")
        if self.bandwidth_W <= 0:
            raise InvalidParameterError("bandwidth_W must be positive")
        if self.total_power_P <= 0 or self.noise_sigma2 <= 0:
            raise InvalidParameterError("powers must be positive")
        if self.distance_d <= 0:
            raise InvalidParameterError("distance_d must be positive")
        if self.code_rate_u < 0:
            raise InvalidParameterError("code_rate_u must be non-negative")

    @classmethod
    def from_db(
        cls,
        *,
        power_dbm: float = 23.0,
        sigma2_dbm: float | None = None,
        n0_db_hz: float | None = None,
        distance: float = 100.0,
        beta: float = 2.5,
        bandwidth: float = 75e6,
        code_rate: float | None = None,
        carrier: float = 5.9e9,
    ) -> "ChannelParams":
        """Build from dB-domain inputs; exactly one noise source must be given."""
        if (sigma2_dbm is None) == (n0_db_hz is None):
            raise InvalidParameterError("give exactly one of sigma2_dbm and n0_db_hz")
        if sigma2_dbm is not None:
            sigma2 = dbm_to_milliwatts(sigma2_dbm)
        else:
            sigma2 = noise_power_from_density(n0_db_hz, bandwidth)
        if code_rate is None:
            code_rate = code_rate_for(DEFAULT_U_PRIME, bandwidth)
        return cls(
            distance_d=distance,
            pathloss_beta=beta,
            bandwidth_W=bandwidth,
            code_rate_u=code_rate,
            noise_sigma2=sigma2,
            total_power_P=dbm_to_milliwatts(power_dbm),
            carrier_fc=carrier,
        )

    @property
    def u_prime(self) -> float:
        return effective_code_rate(self.code_rate_u, self.bandwidth_W)

    @property
    def c(self) -> float:
        return link_constant(self.noise_sigma2, self.distance_d, self.pathloss_beta)


@dataclass(frozen=True)
class PowerSplit:
    lam: float
    P1: float
    P2: float

    @property
    def total(self) -> float:
        return self.P1 + self.P2


def split_power(P: float, lam: float) -> PowerSplit:
    if not 0.5 < lam <= 1.0:
        raise DomainError(f"lambda must lie in (0.5, 1], got {lam}")
    if P <= 0:
        raise InvalidParameterError("total power must be positive")
    return PowerSplit(lam=lam, P1=lam * P, P2=(1.0 - lam) * P)


@dataclass(frozen=True)
class DecodeProfile:
    u_prime: float
    c: float
    tau1: float
    tau2: float
    p1: float
    p2: float


def decode_profile(split: PowerSplit, u_prime: float, c: float) -> DecodeProfile:
    P1, P2 = split.P1, split.P2
    if u_prime == 0.0:
        # zero-rate code: anything decodes
        return DecodeProfile(u_prime, c, 0.0, 0.0, 1.0, 1.0)
    margin = P1 / u_prime - P2
    if margin <= 0:
        raise UndecodableConfigError("LH message undecodable at any fading gain", margin)
    tau1 = c / margin
    if P2 == 0.0:
        tau2, p2 = math.inf, 0.0
    else:
        tau2 = max(tau1, c * u_prime / P2)
        p2 = math.exp(-tau2)
    return DecodeProfile(u_prime, c, tau1, tau2, math.exp(-tau1), p2)


def single_message_profile(P: float, u_prime: float, c: float) -> DecodeProfile:
    """One message at full power; no interference, so ``tau = c u'/P``."""
    tau = c * u_prime / P
    p = math.exp(-tau)
    return DecodeProfile(u_prime, c, tau, tau, p, p)


class DecodeOutcome(enum.IntEnum):
    DROP = 0
    HALF_ONLY = 1
    FULL = 2


def sample_outcome(profile: DecodeProfile, g: float) -> DecodeOutcome:
    if g < 0:
        raise InvalidParameterError(f"fading gain must be non-negative, got {g}")
    if g < profile.tau1:
        return DecodeOutcome.DROP
    if g < profile.tau2:
        return DecodeOutcome.HALF_ONLY
    return DecodeOutcome.FULL


def classify_gains(profile: DecodeProfile, g) -> np.ndarray:
    """Vectorised :func:`sample_outcome`; returns integer outcome codes."""
    g = np.asarray(g, dtype=np.float64)
    if np.any(g < 0):
        raise InvalidParameterError("fading gains must be non-negative")
    out = np.zeros(g.shape, dtype=np.int8)
    out[g >= profile.tau1] = DecodeOutcome.HALF_ONLY
    out[g >= profile.tau2] = DecodeOutcome.FULL
    return out


def diversity_cost(profile: DecodeProfile) -> float:
    if profile.p1 <= 0:
        raise DegenerateLinkError("p1 = 0: the LH segment never decodes")
    if profile.p2 <= 0:
        return math.inf
    return 1.0 / profile.p1 + 1.0 / profile.p2


# --- power-allocation optimisation -------------------------------------

def feasible_interval(u_prime: float) -> tuple[float, float]:
    """Open interval of ratios with ``P1/u' > P2`` intersected with (0.5, 1)."""
    lo = max(0.5, u_prime / (1.0 + u_prime))
    if lo >= 1.0:
        raise UndecodableConfigError("no feasible power split", 0.0)
    return lo, 1.0


def _tau1(lam, P, u_prime, c):
    return c / (lam * P / u_prime - (1.0 - lam) * P)


def exact_diversity(lam, P: float, u_prime: float, c: float):
    """``1/p1 + 1/p2`` as a function of the split ratio (vectorised)."""
    lam = np.asarray(lam, dtype=np.float64)
    t1 = _tau1(lam, P, u_prime, c)
    with np.errstate(divide="ignore", over="ignore"):
        t2 = np.maximum(t1, c * u_prime / ((1.0 - lam) * P))
        return np.exp(t1) + np.exp(t2)


def taylor_diversity(lam, P: float, u_prime: float, c: float):
    """First-order expansion ``2 + tau1 + c u'/P2`` of :func:`exact_diversity`."""
    lam = np.asarray(lam, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return 2.0 + _tau1(lam, P, u_prime, c) + c * u_prime / ((1.0 - lam) * P)


def _taylor_slope(lam, P, u_prime):
    # c factors out of the stationarity condition
    denom = lam * P / u_prime - (1.0 - lam) * P
    return -(P / u_prime + P) / denom**2 + u_prime / ((1.0 - lam) ** 2 * P)


def golden_section(f, a: float, b: float, tol: float = 1e-10, max_iter: int = 500) -> float:
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    x1 = b - invphi * (b - a)
    x2 = a + invphi * (b - a)
    f1, f2 = f(x1), f(x2)
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - invphi * (b - a)
            f1 = f(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + invphi * (b - a)
            f2 = f(x2)
    return 0.5 * (a + b)


def optimize_lambda(
    params: ChannelParams | None = None,
    method: str = "golden",
    *,
    P: float | None = None,
    u_prime: float | None = None,
    c: float | None = None,
    grid_step: float = 1e-4,
) -> float:
    """Power split ratio minimising ``D = 1/p1 + 1/p2``.

    ``grid`` and ``golden`` minimise the exact cost over the feasible part of
    (0.5, 1); ``taylor`` returns the stationary point of the first-order
    expansion.  Pass either ``params`` or explicit ``P``, ``u_prime``, ``c``.
    """
    if params is not None:
        P, u_prime, c = params.total_power_P, params.u_prime, params.c
    if P is None or u_prime is None or c is None:
        raise InvalidParameterError("need ChannelParams or explicit P, u_prime, c")
    if u_prime <= 0:
        raise InvalidParameterError("u_prime must be positive for the split to matter")
    lo, hi = feasible_interval(u_prime)
    eps = 1e-12

    if method == "grid":
        n = int(math.floor((hi - lo) / grid_step))
        lam = lo + grid_step * np.arange(1, n)
        lam = lam[lam < hi]
        D = exact_diversity(lam, P, u_prime, c)
        return float(lam[int(np.argmin(D))])
    if method == "golden":
        return golden_section(lambda x: float(exact_diversity(x, P, u_prime, c)), lo + eps, hi - eps)
    if method == "taylor":
        return float(brentq(_taylor_slope, lo + 1e-9, hi - 1e-9, args=(P, u_prime), xtol=1e-13))
    raise InvalidParameterError(f"unknown method {method!r}")


def taylor_lambda_closed_form(u_prime: float) -> float:
    """Root of ``(1-lam)^2 (1+u') = (lam (1+u') - u')^2`` inside (0, 1)."""
    s = math.sqrt(1.0 + u_prime)
    return (u_prime + s) / (1.0 + u_prime + s)


def printed_lambda_formula(u_prime: float) -> float:
    """``(u' + sqrt(1+u') - 1)/u'`` as printed; exceeds 1 for every u' > 0."""
    return (u_prime + math.sqrt(1.0 + u_prime) - 1.0) / u_prime


def calibrate_u_prime(target_lambda: float, P: float, c: float, bracket=(0.05, 5.0)) -> float:
    """Effective code rate for which the exact optimum equals ``target_lambda``."""

    def gap(up):
        return optimize_lambda(method="golden", P=P, u_prime=up, c=c) - target_lambda

    return float(brentq(gap, *bracket, xtol=1e-12))

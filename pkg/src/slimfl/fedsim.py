"""Federated rounds with superposition-coded uplinks, plus vanilla FedAvg baselines.

A SlimFL round trains every device locally, draws one block-fading gain per
device, classifies the gain into drop / LH-only / full decode and aggregates
the LH and RH segments separately.  The downlink always succeeds, so every
device starts the next round from the new global model.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import linkmodel as lm
from . import slimnet as sn
from .datakit import Dataset, batch_indices, dirichlet_partition, holdout_split
from .errors import InvalidParameterError, SimulationError
from .metrics import MetricsSeries, RoundRecord
from .rng import exponential_gains, stream

FULL_BITS = sn.PAYLOAD_BITS[2]
HALF_BITS = sn.PAYLOAD_BITS[1]


@dataclass(frozen=True)
class SimConfig:
    seed: int
    rounds: int = 300
    devices: int = 10
    alpha: float = 1.0
    channel: lm.ChannelParams = field(default_factory=lambda: lm.ChannelParams.from_db(n0_db_hz=-169.0))
    lam: float | None = None  # None selects the optimiser's split
    trainer: sn.TrainerConfig = field(default_factory=sn.TrainerConfig)
    batch_size: int = 32
    local_steps: int | None = None  # None means one full epoch per round
    mode: str = "simulation"
    holdout_fraction: float = 0.1
    threads: int | None = None

    def __post_init__(self):
        if self.rounds < 0:
            raise InvalidParameterError("rounds must be >= 0")
        if self.devices < 1:
            raise InvalidParameterError("devices must be >= 1")
        if self.batch_size < 1:
            raise InvalidParameterError("batch_size must be >= 1")
        if self.local_steps is not None and self.local_steps < 0:
            raise InvalidParameterError("local_steps must be >= 0")
        if self.mode not in ("simulation", "theory"):
            raise InvalidParameterError(f"unknown mode {self.mode!r}")
        if self.lam is not None and not 0.5 < self.lam <= 1.0:
            raise InvalidParameterError("lambda must lie in (0.5, 1]")

    def effective_trainer(self) -> sn.TrainerConfig:
        if self.mode == "theory":
            return replace(self.trainer, optimizer="sgd", distill_mode="hard_target")
        return self.trainer

    def effective_local_steps(self) -> int | None:
        return 1 if self.mode == "theory" else self.local_steps

    def resolved_lambda(self) -> float:
        if self.lam is not None:
            return self.lam
        return lm.optimize_lambda(self.channel, method="golden")

    def worker_count(self) -> int:
        if self.threads is not None:
            return max(1, int(self.threads))
        env = os.environ.get("SLIMFL_THREADS")
        return max(1, int(env)) if env else 1


@dataclass
class DeviceState:
    index: int
    shard: np.ndarray
    optimizer: sn.SGD


@dataclass
class FleetState:
    devices: list[DeviceState]
    global_model: sn.SlimmableModel
    round: int = 0


@dataclass(frozen=True)
class RoundOutcome:
    gains: np.ndarray
    outcomes: np.ndarray
    H: tuple[int, ...]
    F: tuple[int, ...]
    decoded_bits_half: int
    decoded_bits_full: int
    dropped_bits: int

    @property
    def n_L(self) -> int:
        return len(self.H) + len(self.F)

    @property
    def n_R(self) -> int:
        return len(self.F)

    @property
    def case(self) -> int:
        if self.n_L > 0 and self.n_R > 0:
            return 1
        return 2 if self.n_L > 0 else 3


def outcome_from_codes(codes: np.ndarray, gains: np.ndarray | None = None) -> RoundOutcome:
    codes = np.asarray(codes, dtype=np.int8)
    H = tuple(int(k) for k in np.flatnonzero(codes == lm.DecodeOutcome.HALF_ONLY))
    F = tuple(int(k) for k in np.flatnonzero(codes == lm.DecodeOutcome.FULL))
    drops = codes.size - len(H) - len(F)
    return RoundOutcome(
        gains=np.full(codes.shape, np.nan) if gains is None else gains,
        outcomes=codes,
        H=H,
        F=F,
        decoded_bits_half=HALF_BITS * len(H),
        decoded_bits_full=FULL_BITS * len(F),
        # an LH-only decode still loses the RH segment
        dropped_bits=FULL_BITS * drops + (FULL_BITS - HALF_BITS) * len(H),
    )


def round_gains(seed: int, t: int, K: int) -> np.ndarray:
    """One block-fading gain per device, keyed by (round, device)."""
    return np.array([exponential_gains(stream(seed, "fading", t, k)) for k in range(K)])


def uplink(profile: lm.DecodeProfile, K: int, seed: int, t: int) -> RoundOutcome:
    gains = round_gains(seed, t, K)
    return outcome_from_codes(lm.classify_gains(profile, gains), gains)


def aggregate_vectors(prev: np.ndarray, thetas: np.ndarray, H: Sequence[int], F: Sequence[int],
                      xi1: np.ndarray) -> np.ndarray:
    """Case-split aggregation on flat vectors; ``xi1`` marks the LH coordinates."""
    decoded = sorted(set(H) | set(F))
    if not decoded:
        return prev.copy()
    out = prev.copy()
    lh = thetas[decoded].mean(axis=0)
    out[xi1] = lh[xi1]
    if F:
        rh = thetas[list(F)].mean(axis=0)
        out[~xi1] = rh[~xi1]
    return out


def aggregate(prev_global: sn.SlimmableModel, device_models: Sequence[sn.SlimmableModel],
              outcome: RoundOutcome) -> sn.SlimmableModel:
    if outcome.n_L == 0:
        return prev_global
    thetas = np.stack([m.theta for m in device_models])
    xi1 = prev_global.masks[0].vector
    return prev_global.with_theta(aggregate_vectors(prev_global.theta, thetas, outcome.H, outcome.F, xi1))


def aggregate_idealized(thetas: np.ndarray, lh_decoded: np.ndarray, rh_decoded: np.ndarray,
                        p1: float, p2: float, xi1: np.ndarray) -> np.ndarray:
    """``sum_L theta_k.Xi / (K p1) + sum_F theta_k.Xi^-1 / (K p2)`` (large-K weighting)."""
    K = thetas.shape[0]
    lh = (lh_decoded[:, None] * thetas).sum(axis=0) / (K * p1)
    rh = (rh_decoded[:, None] * thetas).sum(axis=0) / (K * p2)
    return np.where(xi1, lh, rh)


# --- local training ------------------------------------------------------

def round_batches(shard: np.ndarray, batch_size: int, seed: int, device: int, t: int,
                  local_steps: int | None) -> list[np.ndarray]:
    if local_steps is None:
        return batch_indices(shard, batch_size, seed, device, t)
    out: list[np.ndarray] = []
    if shard.size == 0 or local_steps == 0:
        return out
    epoch = 0
    while len(out) < local_steps:
        out.extend(batch_indices(shard, batch_size, seed, device, (t << 20) + epoch))
        epoch += 1
    return out[:local_steps]


def local_round(model: sn.SlimmableModel, device: DeviceState, data: Dataset, cfg: sn.TrainerConfig,
                batches: list[np.ndarray], width: int | None = None) -> sn.SlimmableModel:
    """Train a copy of ``model`` on ``batches``; ``width`` selects single-width task training."""
    for b in batches:
        x, y = data.images[b], data.labels[b]
        if width is None:
            model = sn.train_step(model, x, y, cfg, device.optimizer)
        else:
            model = sn.task_only_step(model, x, y, width, cfg, device.optimizer)
    return model


def _train_all(fleet: FleetState, data: Dataset, cfg: SimConfig, t: int, width: int | None):
    trainer = cfg.effective_trainer()
    steps = cfg.effective_local_steps()

    def work(dev: DeviceState) -> tuple[sn.SlimmableModel, bool]:
        batches = round_batches(dev.shard, cfg.batch_size, cfg.seed, dev.index, t, steps)
        return local_round(fleet.global_model, dev, data, trainer, batches, width), bool(batches)

    workers = cfg.worker_count()
    if workers == 1:
        results = [work(d) for d in fleet.devices]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, fleet.devices))
    return [m for m, _ in results], sum(1 for _, ran in results if not ran)


def _build_fleet(cfg: SimConfig, train: Dataset, plan: sn.LayerPlan) -> FleetState:
    part = dirichlet_partition(train.labels, cfg.devices, cfg.alpha, cfg.seed)
    trainer = cfg.effective_trainer()
    devices = [DeviceState(k, part.shards[k], trainer.make_optimizer()) for k in range(cfg.devices)]
    return FleetState(devices, sn.build_model(plan, cfg.seed))


@dataclass
class RunResult:
    series: MetricsSeries
    model: sn.SlimmableModel
    lam: float | None = None
    profile: lm.DecodeProfile | None = None
    skipped_devices: list[int] = field(default_factory=list)


def _evaluate(model, test: Dataset, widths) -> dict[int, tuple[float, float]]:
    out = {}
    for w in (1, 2):
        if w in widths:
            loss, acc = sn.evaluate(model, w, test.images, test.labels)
            if not math.isfinite(loss):
                raise SimulationError(f"non-finite held-out loss at width {w}")
            out[w] = (loss, acc)
        else:
            out[w] = (math.nan, math.nan)
    return out


def slimfl_run(cfg: SimConfig, data: Dataset, plan: sn.LayerPlan = sn.UL_MOBILENET) -> RunResult:
    train, test = holdout_split(data, cfg.holdout_fraction, cfg.seed)
    fleet = _build_fleet(cfg, train, plan)
    lam = cfg.resolved_lambda()
    ch = cfg.channel
    profile = lm.decode_profile(lm.split_power(ch.total_power_P, lam), ch.u_prime, ch.c)
    image_size = data.images.shape[1]
    flops = sn.count_flops(plan, 1, image_size) + sn.count_flops(plan, 2, image_size)
    series, skipped = MetricsSeries(), []
    for t in range(1, cfg.rounds + 1):
        try:
            models, n_skip = _train_all(fleet, train, cfg, t, None)
        except FloatingPointError as exc:
            raise SimulationError(f"round {t}: {exc}") from exc
        outcome = uplink(profile, cfg.devices, cfg.seed, t)
        fleet.global_model = aggregate(fleet.global_model, models, outcome)
        fleet.round = t
        try:
            ev = _evaluate(fleet.global_model, test, (1, 2))
        except SimulationError as exc:
            raise SimulationError(f"round {t}: {exc}") from exc
        skipped.append(n_skip)
        series.append(RoundRecord(
            t, ev[1][0], ev[2][0], ev[1][1], ev[2][1], outcome.n_L, outcome.n_R,
            outcome.decoded_bits_half, outcome.decoded_bits_full, outcome.dropped_bits,
            ch.total_power_P, flops,
        ))
    return RunResult(series, fleet.global_model, lam, profile, skipped)


# --- vanilla FedAvg baselines ---------------------------------------------

def vanilla_code_rate(u: float, width: int) -> float:
    """Code rate scaled so a message of ``width``'s payload fits the same slot."""
    return u * sn.PAYLOAD_BITS[width] / HALF_BITS


def vanilla_profile(ch: lm.ChannelParams, width: int) -> lm.DecodeProfile:
    u_prime = lm.effective_code_rate(vanilla_code_rate(ch.code_rate_u, width), ch.bandwidth_W)
    return lm.single_message_profile(ch.total_power_P, u_prime, ch.c)


def vanilla_run(cfg: SimConfig, data: Dataset, width: int, plan: sn.LayerPlan = sn.UL_MOBILENET) -> RunResult:
    if width not in (1, 2):
        raise InvalidParameterError("vanilla width must be 1 (0.5x) or 2 (1.0x)")
    train, test = holdout_split(data, cfg.holdout_fraction, cfg.seed)
    fleet = _build_fleet(cfg, train, plan)
    ch = cfg.channel
    profile = vanilla_profile(ch, width)
    bits = sn.PAYLOAD_BITS[width]
    flops = sn.count_flops(plan, width, data.images.shape[1])
    series, skipped = MetricsSeries(), []
    for t in range(1, cfg.rounds + 1):
        models, n_skip = _train_all(fleet, train, cfg, t, width)
        ok = round_gains(cfg.seed, t, cfg.devices) >= profile.tau1
        decoded = np.flatnonzero(ok)
        if decoded.size:
            mean = np.stack([models[k].theta for k in decoded]).mean(axis=0)
            fleet.global_model = fleet.global_model.with_theta(mean)
        fleet.round = t
        ev = _evaluate(fleet.global_model, test, (width,))
        skipped.append(n_skip)
        n_dec = int(decoded.size)
        series.append(RoundRecord(
            t, ev[1][0], ev[2][0], ev[1][1], ev[2][1],
            n_dec, n_dec if width == 2 else 0,
            bits * n_dec if width == 1 else 0,
            bits * n_dec if width == 2 else 0,
            bits * (cfg.devices - n_dec),
            ch.total_power_P, flops,
        ))
    return RunResult(series, fleet.global_model, None, profile, skipped)


def merge_vanilla(half: MetricsSeries, full: MetricsSeries) -> MetricsSeries:
    """Vanilla FL-1.5x: both fixed-width runs side by side with summed resources."""
    if len(half) != len(full):
        raise InvalidParameterError("runs must have equal length")
    out = MetricsSeries()
    for a, b in zip(half, full):
        out.append(RoundRecord(
            a.round, a.loss_half, b.loss_full, a.top1_half, b.top1_full, a.n_L, b.n_R,
            a.decoded_bits_half, b.decoded_bits_full, a.dropped_bits + b.dropped_bits,
            a.comm_mW + b.comm_mW, a.flops + b.flops,
        ))
    return out


def run_algorithm(algorithm: str, cfg: SimConfig, data: Dataset, plan: sn.LayerPlan = sn.UL_MOBILENET) -> RunResult:
    if algorithm == "slimfl":
        return slimfl_run(cfg, data, plan)
    if algorithm == "vanilla_0.5x":
        return vanilla_run(cfg, data, 1, plan)
    if algorithm == "vanilla_1.0x":
        return vanilla_run(cfg, data, 2, plan)
    if algorithm == "vanilla_1.5x":
        half = vanilla_run(cfg, data, 1, plan)
        full = vanilla_run(cfg, data, 2, plan)
        return RunResult(merge_vanilla(half.series, full.series), full.model, None, full.profile,
                         [a + b for a, b in zip(half.skipped_devices, full.skipped_devices)])
    raise InvalidParameterError(f"unknown algorithm {algorithm!r}")

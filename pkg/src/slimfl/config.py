"""Flat ``key = value`` experiment configuration.

One assignment per line; ``#`` starts a comment; sections are dotted key
prefixes (``channel.power_dbm = 23``).  Lists are comma-separated.  Unknown
keys and malformed lines are errors that carry the line number.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from . import linkmodel as lm
from . import slimnet as sn
from .datakit import Dataset, load_idx, synthetic_classification
from .errors import ConfigError, SlimFLError
from .fedsim import SimConfig

ALGORITHMS = ("slimfl", "vanilla_0.5x", "vanilla_1.0x", "vanilla_1.5x")


def _float(v: str) -> float:
    return float(v)


def _int(v: str) -> int:
    f = float(v)
    if not f.is_integer():
        raise ValueError(f"{v!r} is not an integer")
    return int(f)


def _str(v: str) -> str:
    return v


def _floats(v: str) -> tuple[float, ...]:
    return tuple(float(x) for x in v.split(",") if x.strip())


def _ints(v: str) -> tuple[int, ...]:
    return tuple(_int(x) for x in v.split(",") if x.strip())


def _local_steps(v: str):
    return None if v == "epoch" else _int(v)


def _lambda(v: str):
    return "auto" if v == "auto" else float(v)


# key -> (parser, default); None default means "unset"
SCHEMA: dict[str, tuple[Any, Any]] = {
    "seed": (_int, None),
    "algorithm": (_str, "slimfl"),
    "rounds": (_int, 300),
    "devices": (_int, 10),
    "alpha": (_float, 1.0),
    "lambda": (_lambda, "auto"),
    "mode": (_str, "simulation"),
    "local_steps": (_local_steps, None),
    "batch_size": (_int, 32),
    "holdout_fraction": (_float, 0.1),
    "channel.power_dbm": (_float, 23.0),
    "channel.sigma2_dbm": (_float, None),
    "channel.n0_db_hz": (_float, None),
    "channel.distance": (_float, 100.0),
    "channel.beta": (_float, 2.5),
    "channel.bandwidth": (_float, 75e6),
    "channel.carrier": (_float, 5.9e9),
    "channel.u_prime": (_float, lm.DEFAULT_U_PRIME),
    "trainer.algorithm": (_str, "sustrain"),
    "trainer.weights": (_floats, (0.5, 0.5)),
    "trainer.optimizer": (_str, "adam"),
    "trainer.learning_rate": (_float, 1e-3),
    "trainer.distill_mode": (_str, "soft_ipkd"),
    "trainer.weight_decay": (_float, 0.0),
    "dataset.kind": (_str, "synthetic"),
    "dataset.n": (_int, 1000),
    "dataset.classes": (_int, 10),
    "dataset.image_size": (_int, 28),
    "dataset.noise": (_float, 0.25),
    "dataset.images": (_str, None),
    "dataset.labels": (_str, None),
    "sweep.lambdas": (_floats, (0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)),
    "bound.t_max": (_int, 10_000),
    "bound.points": (_int, 50),
    "counterexample.N": (_int, 5),
    "counterexample.p": (_int, 4),
    "counterexample.E": (_ints, (2, 4, 8)),
    "counterexample.eta": (_floats, (1e-2, 1e-3)),
}
DEFAULT_N0_DB_HZ = -169.0


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict[str, Any]
    base_dir: Path = field(default=Path("."), compare=False)

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    @property
    def algorithm(self) -> str:
        return self.values["algorithm"]

    def channel(self) -> lm.ChannelParams:
        v = self.values
        sigma2, n0 = v["channel.sigma2_dbm"], v["channel.n0_db_hz"]
        if sigma2 is None and n0 is None:
            n0 = DEFAULT_N0_DB_HZ
        return lm.ChannelParams.from_db(
            power_dbm=v["channel.power_dbm"], sigma2_dbm=sigma2, n0_db_hz=n0,
            distance=v["channel.distance"], beta=v["channel.beta"], bandwidth=v["channel.bandwidth"],
            code_rate=lm.code_rate_for(v["channel.u_prime"], v["channel.bandwidth"]),
            carrier=v["channel.carrier"],
        )

    def trainer(self) -> sn.TrainerConfig:
        v = self.values
        return sn.TrainerConfig(
            algorithm=v["trainer.algorithm"], weights=tuple(v["trainer.weights"]),
            optimizer=v["trainer.optimizer"], learning_rate=v["trainer.learning_rate"],
            distill_mode=v["trainer.distill_mode"], weight_decay=v["trainer.weight_decay"],
        )

    def sim_config(self, lam=None) -> SimConfig:
        v = self.values
        if lam is None:
            lam = None if v["lambda"] == "auto" else v["lambda"]
        return SimConfig(
            seed=v["seed"], rounds=v["rounds"], devices=v["devices"], alpha=v["alpha"],
            channel=self.channel(), lam=lam, trainer=self.trainer(), batch_size=v["batch_size"],
            local_steps=v["local_steps"], mode=v["mode"], holdout_fraction=v["holdout_fraction"],
        )

    def _path(self, key: str) -> Path:
        p = Path(self.values[key])
        return p if p.is_absolute() else self.base_dir / p

    def dataset(self) -> Dataset:
        v = self.values
        if v["dataset.kind"] == "idx":
            return load_idx(self._path("dataset.images"), self._path("dataset.labels"), v["dataset.classes"])
        return synthetic_classification(v["dataset.n"], v["dataset.classes"], v["seed"],
                                        image_size=v["dataset.image_size"], noise=v["dataset.noise"])

    def echo(self) -> dict[str, Any]:
        """Every key with its effective value; feeding it back reproduces the run."""
        out = {}
        for k, val in self.values.items():
            out[k] = list(val) if isinstance(val, tuple) else val
        return out

    def to_text(self) -> str:
        lines = []
        for k, val in self.values.items():
            if val is None:
                continue
            if isinstance(val, tuple):
                val = ", ".join(repr(x) for x in val)
            lines.append(f"{k} = {val}")
        return "\n".join(lines) + "\n"


def _parse_lines(text: str) -> dict[str, tuple[str, int]]:
    raw: dict[str, tuple[str, int]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError("expected 'key = value'", line=lineno)
        key, value = (s.strip() for s in body.split("=", 1))
        if not key:
            raise ConfigError("missing key", line=lineno)
        if key not in SCHEMA:
            raise ConfigError("unknown key", field=key, line=lineno)
        if key in raw:
            raise ConfigError(f"duplicate key (first set on line {raw[key][1]})", field=key, line=lineno)
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
            value = value[1:-1]
        raw[key] = (value, lineno)
    return raw


def parse_config_text(text: str, base_dir: Path | str = ".", overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    raw = _parse_lines(text)
    values: dict[str, Any] = {}
    for key, (parser, default) in SCHEMA.items():
        if key in raw:
            value, lineno = raw[key]
            try:
                values[key] = parser(value)
            except ValueError as exc:
                raise ConfigError(f"cannot parse {value!r}: {exc}", field=key, line=lineno) from None
        else:
            values[key] = default
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    cfg = ExperimentConfig(values, Path(base_dir))
    _validate(cfg, raw)
    return cfg


def parse_config(path: str | Path, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror or exc}") from None
    return parse_config_text(text, path.parent, overrides)


def _validate(cfg: ExperimentConfig, raw: dict[str, tuple[str, int]]) -> None:
    v = cfg.values

    def fail(key, message):
        line = raw[key][1] if key in raw else None
        raise ConfigError(message, field=key, line=line)

    if v["seed"] is None:
        fail("seed", "seed is required")
    if v["seed"] < 0:
        fail("seed", "seed must be non-negative")
    if v["algorithm"] not in ALGORITHMS:
        fail("algorithm", f"must be one of {', '.join(ALGORITHMS)}")
    if v["rounds"] < 0:
        fail("rounds", "must be >= 0")
    if v["devices"] < 1:
        fail("devices", "must be >= 1")
    if not v["alpha"] > 0:
        fail("alpha", "must be positive")
    lam = v["lambda"]
    if lam != "auto" and not (0.5 < lam <= 1.0):
        fail("lambda", "must lie in (0.5, 1] or be 'auto'")
    if v["mode"] not in ("simulation", "theory"):
        fail("mode", "must be 'simulation' or 'theory'")
    if v["local_steps"] is not None and v["local_steps"] < 0:
        fail("local_steps", "must be 'epoch' or a non-negative integer")
    if v["batch_size"] < 1:
        fail("batch_size", "must be >= 1")
    if not 0.0 <= v["holdout_fraction"] < 1.0:
        fail("holdout_fraction", "must lie in [0, 1)")
    if v["channel.sigma2_dbm"] is not None and v["channel.n0_db_hz"] is not None:
        fail("channel.n0_db_hz", "channel.sigma2_dbm and channel.n0_db_hz are mutually exclusive")
    if v["channel.u_prime"] < 0:
        fail("channel.u_prime", "must be non-negative")
    if len(v["trainer.weights"]) != 2:
        fail("trainer.weights", "needs exactly two values")
    if v["dataset.kind"] not in ("synthetic", "idx"):
        fail("dataset.kind", "must be 'synthetic' or 'idx'")
    if v["dataset.kind"] == "idx":
        for key in ("dataset.images", "dataset.labels"):
            if v[key] is None:
                fail(key, "required when dataset.kind = idx")
            if not cfg._path(key).is_file():
                fail(key, f"file not found: {cfg._path(key)}")
    elif v["dataset.n"] < v["dataset.classes"]:
        fail("dataset.n", "needs at least one sample per class")
    if v["dataset.image_size"] < 1:
        fail("dataset.image_size", "must be >= 1")
    # delegate remaining range checks to the module constructors
    for prefix, build in (("channel.", cfg.channel), ("trainer.", cfg.trainer), ("", cfg.sim_config)):
        try:
            build()
        except SlimFLError as exc:
            key = next((k for k in raw if k.startswith(prefix)), prefix.rstrip(".") or "config")
            fail(key, str(exc))

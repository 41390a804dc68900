"""Per-round metric records and their CSV form."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import astuple, dataclass, fields
from pathlib import Path

from .errors import InvalidParameterError

COLUMNS = (
    "round", "loss_0.5x", "loss_1.0x", "top1_0.5x", "top1_1.0x", "n_L", "n_R",
    "decoded_bits_half", "decoded_bits_full", "dropped_bits", "comm_mW", "flops",
)
_INT_COLUMNS = {"round", "n_L", "n_R", "decoded_bits_half", "decoded_bits_full", "dropped_bits", "flops"}


@dataclass(frozen=True)
class RoundRecord:
    round: int
    loss_half: float
    loss_full: float
    top1_half: float
    top1_full: float
    n_L: int
    n_R: int
    decoded_bits_half: int
    decoded_bits_full: int
    dropped_bits: int
    comm_mW: float
    flops: int

    def __post_init__(self):
        for name in ("n_L", "n_R", "decoded_bits_half", "decoded_bits_full", "dropped_bits", "flops"):
            if getattr(self, name) < 0:
                raise InvalidParameterError(f"{name} must be non-negative")

    def top1(self, width: int) -> float:
        return self.top1_half if width == 1 else self.top1_full


def format_value(column: str, value) -> str:
    if column in _INT_COLUMNS:
        return str(int(value))
    value = float(value)
    if math.isnan(value):
        return "nan"
    return "%.9g" % value


class MetricsSeries:
    """Ordered per-round records with rounds strictly increasing from 1."""

    def __init__(self, records=()):
        self.records: list[RoundRecord] = []
        for r in records:
            self.append(r)

    def append(self, record: RoundRecord) -> None:
        expected = len(self.records) + 1
        if record.round != expected:
            raise InvalidParameterError(f"round {record.round} appended where {expected} was expected")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i) -> RoundRecord:
        return self.records[i]

    def __eq__(self, other) -> bool:
        return isinstance(other, MetricsSeries) and self.to_csv() == other.to_csv()

    def column(self, name: str) -> list:
        attr = fields(RoundRecord)[COLUMNS.index(name)].name
        return [getattr(r, attr) for r in self.records]

    def to_csv(self) -> str:
        lines = [",".join(COLUMNS)]
        for r in self.records:
            lines.append(",".join(format_value(c, v) for c, v in zip(COLUMNS, astuple(r))))
        return "\n".join(lines) + "\n"

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", newline="\n", encoding="utf-8") as fh:
            fh.write(self.to_csv())
        return path

    @classmethod
    def from_csv(cls, text: str) -> "MetricsSeries":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if tuple(header) != COLUMNS:
            raise InvalidParameterError(f"unexpected metrics header {header}")
        out = cls()
        for row in reader:
            vals = [int(v) if c in _INT_COLUMNS else float(v) for c, v in zip(COLUMNS, row)]
            out.append(RoundRecord(*vals))
        return out

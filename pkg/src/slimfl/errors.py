"""Exception hierarchy shared by every module."""


class SlimFLError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(SlimFLError, ValueError):
    pass


class DomainError(InvalidParameterError):
    pass


class UndecodableConfigError(SlimFLError):
    """The LH message cannot be decoded at any fading gain.

    ``margin`` is ``P1/u' - P2``; decodability requires it to be positive.
    """

    def __init__(self, message: str, margin: float):
        super().__init__(f"{message} (margin P1/u' - P2 = {margin:.6g})")
        self.margin = margin


class DegenerateLinkError(SlimFLError):
    pass


class ShapeError(SlimFLError, ValueError):
    pass


class IdxFormatError(SlimFLError):
    pass


class BadMagicError(IdxFormatError):
    pass


class TruncatedPayloadError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


class ConfigError(SlimFLError):
    """Configuration problem; ``field`` and ``line`` locate it when known."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.field = field
        self.line = line


class SimulationError(SlimFLError):
    pass


class DivergenceError(SlimFLError):
    pass

"""Exception hierarchy shared by every caver module."""


class CaverError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(CaverError, ValueError):
    """Tensor extents do not agree with what an operation requires."""


class NonFiniteError(CaverError, ValueError):
    """A NaN or infinity crossed a public operation boundary."""


class PatchError(DimensionError):
    """Spatial extents are not divisible by the patch side."""

    def __init__(self, h: int, w: int, p: int, level: int | None = None):
        self.h, self.w, self.p, self.level = h, w, p, level
        where = f"level {level}: " if level is not None else ""
        super().__init__(
            f"{where}extents H={h}, W={w} are not divisible by patch side p={p}"
        )


class FormatError(CaverError, ValueError):
    """A CAVR file or weight manifest is malformed."""


class MissingWeightError(CaverError, KeyError):
    """A named tensor is absent from a weight directory."""

    def __init__(self, name: str):
        self.name = name
        super().__init__(f"missing weight tensor {name!r}")

    def __str__(self) -> str:
        return self.args[0]


class ConfigError(CaverError, ValueError):
    """A run or model configuration is invalid."""


class CostMismatchError(CaverError, AssertionError):
    """Instrumented multiply-add counts disagree with the closed form."""

"""Exception hierarchy shared by every somnoscore module."""


class SomnoError(Exception):
    """Base class for all library errors."""


# argument / shape problems
class ShapeError(SomnoError, ValueError):
    pass


class BadArg(SomnoError, ValueError):
    pass


class ConfigError(SomnoError, ValueError):
    pass


class BadSpec(SomnoError, ValueError):
    pass


# data problems
class DataError(SomnoError):
    """Anything wrong with input data or files on disk."""


class MissingChannel(DataError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class ExcludedEpoch(DataError, ValueError):
    pass


class BadIndex(DataError, IndexError):
    pass


class DuplicatePatient(DataError, ValueError):
    pass


class FormatError(DataError, ValueError):
    def __init__(self, message: str, file: str | None = None, field: str | None = None):
        self.file = file
        self.field = field
        where = ", ".join(p for p in (file and f"file={file}", field and f"field={field}") if p)
        super().__init__(f"{message} ({where})" if where else message)


class IntegrityError(DataError, ValueError):
    pass


class NoData(DataError, ValueError):
    pass


# runtime problems
class TapeConsumed(SomnoError, RuntimeError):
    pass


class NonFiniteGradient(SomnoError, ArithmeticError):
    def __init__(self, path: str):
        self.path = path
        super().__init__(f"non-finite gradient in {path}")


class Degenerate(SomnoError, ArithmeticError):
    def __init__(self, message: str, observed_agreement: float):
        self.observed_agreement = observed_agreement
        super().__init__(f"{message} (p0={observed_agreement:.6f})")

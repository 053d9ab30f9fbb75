"""Exception hierarchy shared across the package."""


class LoraCError(Exception):
    """Base class for every error raised by lorac."""


class InvalidArgumentError(LoraCError, ValueError):
    """Shapes, ranges or options that an operation cannot accept."""


class NonFiniteError(LoraCError, FloatingPointError):
    """An operation produced NaN or Inf."""


class PreconditionError(LoraCError, RuntimeError):
    pass


class ConfigError(LoraCError, ValueError):
    pass


class DivergenceError(LoraCError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, batch: int, detail: str = ""):
        self.epoch = epoch
        self.batch = batch
        msg = f"non-finite loss at epoch {epoch}, batch {batch}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class MergeError(LoraCError, RuntimeError):
    pass


class FormatError(LoraCError, ValueError):
    """Bad magic, unsupported version or truncated payload in a binary file."""

    def __init__(self, path, reason: str):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"{path}: {reason}")


class ShapeMismatchError(LoraCError, ValueError):
    """A stored tensor does not fit the tensor it is loaded into."""

    def __init__(self, name: str, expected, got):
        self.name = name
        self.expected = tuple(expected) if expected is not None else None
        self.got = tuple(got) if got is not None else None
        super().__init__(f"shape mismatch for {name!r}: expected {self.expected}, got {self.got}")

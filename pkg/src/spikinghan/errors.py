"""
Exception hierarchy for spiking-han.

Every error carries the process exit code the CLI maps it to:

- 1: configuration, shape and contract problems
- 2: dataset problems (missing files, schema violations, bad splits)
- 3: numeric failures (non-finite values, divergence)
"""

from pathlib import Path
from typing import Optional, Sequence, Tuple, Union


class SpikingHANError(Exception):
    """Base class for all errors raised by spiking-han."""

    exit_code: int = 1

    def __reduce__(self):
        # subclass __init__ signatures differ from args
        return _rebuild, (type(self), self.args, self.__dict__)


def _rebuild(cls, args, state):
    error = cls.__new__(cls, *args)
    error.args = args
    error.__dict__.update(state)
    return error


# region Config
class ConfigError(SpikingHANError, ValueError):
    exit_code = 1


class ShapeError(SpikingHANError, ValueError):
    exit_code = 1

    def __init__(self, message: str, *shapes: Sequence[int]):
        rendered = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{message}: {rendered}" if shapes else message)
        self.shapes: Tuple[Tuple[int, ...], ...] = tuple(tuple(s) for s in shapes)


class ContractError(SpikingHANError, RuntimeError):
    exit_code = 1


class NodeIndexError(SpikingHANError, IndexError):
    exit_code = 1


# endregion


# region Data
class DataError(SpikingHANError):
    exit_code = 2


class MissingFileError(DataError, FileNotFoundError):
    def __init__(self, path: Union[str, Path]):
        super().__init__(f"Required file not found: '{path}'")
        self.path = Path(path)


class SchemaError(DataError, ValueError):
    pass


class MetaPathError(DataError, ValueError):
    pass


class DimensionError(DataError, ValueError):
    pass


class StratificationError(DataError, ValueError):
    pass


class DatasetValidationError(DataError, ValueError):
    """A malformed dataset file. Points at the file and, when known, the line."""

    def __init__(self, message: str, path: Optional[Path] = None, line: Optional[int] = None):
        location = ""
        if path is not None:
            location = f"{path}"
            if line is not None:
                location += f" line {line}"
            location += ": "
        super().__init__(f"{location}{message}")
        self.path = path
        self.line = line


# endregion


# region Numeric
class NumericError(SpikingHANError, ArithmeticError):
    exit_code = 3


class DivergenceError(NumericError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"Training diverged at epoch {epoch}: loss={loss}")
        self.epoch = epoch
        self.loss = loss


# endregion

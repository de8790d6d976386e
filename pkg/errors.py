"""Exception types shared by every module. The command-line layer (app.py)
maps these onto exit codes: bad input is 2, a failed training run is 1."""

from typing import Optional


class InvalidArgumentError(ValueError):
    """A caller passed sizes, shapes or values outside an operation's domain."""


class ParseError(ValueError):
    """A dataset or model file could not be parsed. `row` is 0 for the header."""

    def __init__(self, message: str, row: int):
        super().__init__(f"row {row}: {message}")
        self.row = row


class ConfigError(ValueError):
    """A run config file could not be read. `line` is 1-based."""

    def __init__(self, message: str, line: Optional[int] = None):
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(f"{prefix}{message}")
        self.line = line


class TrainingError(RuntimeError):
    """Training diverged or missed its accuracy floor."""

    def __init__(self, message: str, epoch: Optional[int] = None, iteration: Optional[int] = None):
        where = []
        if epoch is not None:
            where.append(f"epoch {epoch}")
        if iteration is not None:
            where.append(f"iteration {iteration}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"{message}{suffix}")
        self.epoch = epoch
        self.iteration = iteration

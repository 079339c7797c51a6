"""Exception types shared across the package."""


class BssError(Exception):
    """Base class for all library errors."""


class ConfigError(BssError, ValueError):
    """Invalid configuration: divisibility, parameter lengths, bad flags."""


class ShapeError(BssError, ValueError):
    """Tensor dims are incompatible with the requested operation."""


class GraphError(BssError, ValueError):
    """Fusion graph is structurally invalid."""


class DegenerateInputError(BssError, ValueError):
    """Input makes a closed-form solve or normalisation undefined."""


class OracleError(BssError, ArithmeticError):
    """A finite-difference oracle saw non-finite function values."""


class FormatError(BssError, ValueError):
    """Malformed file contents. `line` is 1-based when known."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:"
            if line is not None:
                where += f"{line}:"
            where += " "
        super().__init__(where + message)

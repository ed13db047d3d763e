"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """A configuration value violates a structural constraint."""


class ContractError(ValueError):
    """A precondition of an operation does not hold."""


class ParseError(ValueError):
    """Malformed input file; message carries the offending line number."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}".strip())
        self.path = path
        self.line = line

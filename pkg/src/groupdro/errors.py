"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """An argument violates a documented precondition."""


class SplitInfeasible(InvalidArgument):
    """A group is too small to populate every part of a split."""

    def __init__(self, group, size, parts):
        self.group = group
        super().__init__(
            f"group {group} has {size} example(s); cannot give >= 1 to each of {parts} parts"
        )


class SchemaError(ValueError):
    """A dataset file does not match the expected CSV schema."""


class ParseError(SchemaError):
    def __init__(self, line, message):
        self.line = line
        super().__init__(f"line {line}: {message}")


class ConfigError(ValueError):
    """An experiment or dataset configuration is missing or malformed."""


class NumericalError(ArithmeticError):
    """Training produced a non-finite quantity."""

    def __init__(self, message, **diagnostics):
        self.diagnostics = diagnostics
        detail = ", ".join(f"{k}={v}" for k, v in diagnostics.items())
        super().__init__(f"{message} ({detail})" if detail else message)

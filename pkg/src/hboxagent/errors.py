"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class BoundsError(ValueError):
    """A region or window does not fit inside an image."""


class DegenerateFitError(ValueError):
    """Calibration data does not contain both classes."""


class GenerationError(RuntimeError):
    """Synthetic case generation could not satisfy its constraints."""


class DatasetFormatError(ValueError):
    """A dataset file line could not be parsed."""

    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no


class ToolError(RuntimeError):
    """An evidence tool could not answer a probe."""

"""Exception hierarchy. Each class maps to a CLI exit code."""


class CilnerError(Exception):
    exit_code = 1


class ConfigError(CilnerError, ValueError):
    """Bad configuration or schedule (usage error)."""

    exit_code = 1


class DataError(CilnerError, ValueError):
    """Malformed corpus, labels or report files."""

    exit_code = 2


class NumericalError(CilnerError, FloatingPointError):
    """Non-finite loss or logits."""

    exit_code = 3

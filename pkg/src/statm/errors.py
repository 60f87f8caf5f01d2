"""Exception types shared across the package.

Two failure families, mirrored by the CLI exit codes: configuration
problems (bad shapes, bad config files, exit code 2) and contract
violations at runtime (exit code 3).
"""


class ConfigurationError(ValueError):
    """A shape, option, or config-file value is invalid before compute starts."""


class ContractViolation(RuntimeError):
    """An operation was called in a state its contract forbids."""

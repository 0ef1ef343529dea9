"""Exception types shared across the lab.

``ValueError`` is used for plain domain/usage errors; the two classes here
exist so the CLI can map failures to distinct exit codes (config errors
exit 2, numerical failures exit 3).
"""


class ConfigError(ValueError):
    """Invalid manifest / configuration (unknown names, schema violations)."""


class NumericalError(RuntimeError):
    """A numerical routine failed to reach its target accuracy."""

    def __init__(self, message, achieved=None):
        super().__init__(message)
        self.achieved = achieved

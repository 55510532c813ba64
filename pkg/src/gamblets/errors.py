"""Error taxonomy shared by all modules.

Two failure classes matter to callers: bad arguments (wrong shapes, out-of-range
parameters, malformed config) and numerical breakdown (loss of positive
definiteness, CG breakdown, indefinite energy). The CLI maps them to exit codes
2 and 3 respectively.
"""


class InvalidArgumentError(ValueError):
    """An argument violates a documented precondition."""


class NumericalError(RuntimeError):
    """A computation left its numerical domain (non-SPD input, breakdown, ...)."""

"""
Exception hierarchy shared by the solver, the simulators and the runner.
"""


class PmeLabError(Exception):
    """Base class for every error raised by pme_lab."""


class ConfigError(PmeLabError, ValueError):
    """Invalid configuration. `problems` lists every (field, reason) found, the first one first."""

    def __init__(self, field: str, reason: str, problems: list[tuple[str, str]] = None):
        self.field = field
        self.reason = reason
        self.problems = problems or [(field, reason)]
        super().__init__("; ".join(f"{f}: {r}" for f, r in self.problems))


class GridError(PmeLabError, ValueError):
    pass


class StabilityError(PmeLabError):
    pass


class PositivityError(PmeLabError):
    pass


class RegimeError(PmeLabError, ValueError):
    pass


class InterpolationError(PmeLabError):
    pass


class EnsembleError(PmeLabError):
    pass


class UnknownCheckError(PmeLabError, KeyError):
    def __init__(self, check_id: str):
        self.check_id = check_id
        super().__init__(check_id)

    def __str__(self):
        return f"unknown check id '{self.check_id}'"

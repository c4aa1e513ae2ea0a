"""Structured exceptions raised across the package."""

from __future__ import annotations


class LyapcdrError(Exception):
    """Base class for all package errors."""


class ConfigurationError(LyapcdrError, ValueError):
    """Invalid user-provided parameter or configuration entry."""


class GeometryError(LyapcdrError):
    """Non-invertible mapping or inconsistent mesh data.

    Carries the offending element and node index when known.
    """

    def __init__(self, message: str, element: int | None = None, node: int | None = None):
        self.element = element
        self.node = node
        if element is not None:
            message = f"{message} (element {element}, node {node})"
        super().__init__(message)


class AdmissibilityError(LyapcdrError):
    """A state left the admissible set (a nonpositive concentration).

    ``element`` and ``node`` locate the first offending entry when the
    state is a global solution array; ``component`` names the variable.
    """

    def __init__(
        self,
        message: str,
        element: int | None = None,
        node: int | None = None,
        component: int | None = None,
    ):
        self.element = element
        self.node = node
        self.component = component
        if element is not None:
            message = f"{message} (element {element}, node {node}, component {component})"
        super().__init__(message)


class TableauError(LyapcdrError, ValueError):
    """A Butcher tableau violates one of its structural invariants."""


class RelaxationError(LyapcdrError):
    """No admissible relaxation parameter could be found for a step."""


class IntegrationError(LyapcdrError):
    """Time integration could not proceed (step size underflow and similar).

    ``last_state`` and ``last_time`` hold the last accepted snapshot.
    """

    def __init__(self, message: str, last_state=None, last_time: float | None = None,
                 diagnostics: dict | None = None):
        self.last_state = last_state
        self.last_time = last_time
        self.diagnostics = diagnostics or {}
        super().__init__(message)

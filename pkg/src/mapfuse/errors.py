"""Exception hierarchy shared by all mapfuse modules."""

from __future__ import annotations


class MapfuseError(Exception):
    """Base class for all errors raised by this package."""


class ChiralityError(MapfuseError):
    """A point has non-positive depth in the camera it is observed from."""

    def __init__(self, message: str, observation_index: int | None = None):
        super().__init__(message)
        self.observation_index = observation_index


class NotEnoughObservations(MapfuseError):
    """Too few observations for a well-posed adjustment (up to gauge)."""


class NumericalFailure(MapfuseError):
    """The damped normal system stayed indefinite up to the maximum damping."""


class SingularAuxiliary(MapfuseError):
    """The auxiliary normal matrix is numerically singular; the auxiliary
    parameters cannot be eliminated."""


class DegenerateAnchors(MapfuseError):
    """Anchor points are collinear/coincident; they cannot pin a similarity
    frame."""


class NotConverged(MapfuseError):
    """The map is not at an optimum (gradient norm above tolerance)."""

    def __init__(self, message: str, gradient_norm: float | None = None):
        super().__init__(message)
        self.gradient_norm = gradient_norm


class NoRecoveryData(MapfuseError):
    """The footprint was built without auxiliary-recovery data."""


class InsufficientOverlap(MapfuseError):
    """A map cannot be chained to the reference map through >=3 shared
    points."""

    def __init__(self, message: str, map_index: int | None = None):
        super().__init__(message)
        self.map_index = map_index


class DegenerateCorrespondences(MapfuseError):
    """Matched points are collinear; the aligning transform is not unique."""


class DegenerateConfiguration(MapfuseError):
    """A point configuration does not determine the requested alignment."""


class InvalidDof(MapfuseError):
    """Residual count does not exceed the degrees of freedom."""


class NonPositiveDof(MapfuseError):
    """The merge consumes no net degrees of freedom, so its residual
    increase cannot be tested."""

"""Shared exception types for the construction and verification engine."""


class TorusNFError(Exception):
    """Base class for all package-specific errors."""


class NearPole(TorusNFError):
    """An evaluation hit a denominator p.k below the evaluation tolerance."""


class MixedDegree(TorusNFError):
    """An operation required a radially homogeneous function but got mixed degrees."""


class TermExplosion(TorusNFError):
    """A momentum function exceeded the configured term cap."""


class InvalidClass(TorusNFError):
    """A cone-class-specific operation was applied to the wrong mode class."""


class StepRejected(TorusNFError):
    """An implicit integrator step failed to converge."""


class SurfaceSolveFailed(TorusNFError):
    """The radial Newton solve for the energy surface did not converge."""


class ValidationError(TorusNFError):
    """A seed, config or manifest failed validation."""

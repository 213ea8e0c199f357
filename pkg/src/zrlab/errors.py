"""Exception hierarchy shared across the package.

Every error carries a short stable ``code`` so that callers (and the CLI)
can match on failure kinds without parsing messages.
"""

from __future__ import annotations


class ZrlabError(Exception):
    """Base class for all package errors."""

    code = "zrlab-error"


class InvalidConfigError(ZrlabError):
    """A configuration value or key is malformed or out of range."""

    code = "invalid-config"


class FugacityAtRadiusError(ZrlabError):
    """Fugacity at or beyond the convergence radius of the partition sum."""

    code = "fugacity-at-radius"


class DensityUnreachableError(ZrlabError):
    """No fugacity below the radius reproduces the requested density."""

    code = "density-unreachable"


class QParameterError(ZrlabError):
    """q or the rescaled fugacity is outside (0, 1) for the q-geometric law."""

    code = "q-parameter-out-of-range"


class FrozenStateError(ZrlabError):
    """Total jump rate is zero; no event can be scheduled."""

    code = "frozen-state"


class EmptySiteJumpError(ZrlabError):
    """A jump was requested from a site with no particles."""

    code = "empty-site-jump"


class InconsistentRingError(ZrlabError):
    """Exclusion positions do not define a valid state on the stated ring."""

    code = "inconsistent-ring"


class DecoupledError(ZrlabError):
    """The coupled exclusion image stopped matching the occupancy state."""

    code = "decoupled"


class StateSpaceTooLargeError(ZrlabError):
    """Exact enumeration was requested beyond the supported state count."""

    code = "state-space-too-large"


class NotCenteredError(ZrlabError):
    """An H^{-1}-type norm was requested for a non-centered function."""

    code = "not-centered"


class MissingObserverError(ZrlabError):
    """A trajectory record does not contain the requested series."""

    code = "missing-observer"


class EpsilonTooSmallError(ZrlabError):
    """A block scale eps maps to an empty microscopic block."""

    code = "epsilon-too-small"

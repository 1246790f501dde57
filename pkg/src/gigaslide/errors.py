"""Domain exceptions shared across modules.

The HTTP layer maps these onto statuses (validation 422, authorization 403,
not-found 404, conflict 409); the CLI maps them onto nonzero exit codes.
"""


class GigaslideError(Exception):
    """Base class for all domain errors."""

    code = "error"


class ValidationError(GigaslideError):
    """Input violates a documented precondition or invariant."""

    code = "validation_error"


class AuthorizationError(GigaslideError):
    """Caller is not allowed to touch the requested resource."""

    code = "authorization_error"


class NotFoundError(GigaslideError):
    """Referenced entity does not exist."""

    code = "not_found"


class ConflictError(GigaslideError):
    """Write conflicts with existing state (duplicate name, unpaired event)."""

    code = "conflict"


class UndefinedMetricError(GigaslideError):
    """Metric has no defined value for the given inputs (e.g. zero denominator)."""

    code = "undefined_metric"

"""Exception hierarchy shared across the package."""


class VlscoreError(Exception):
    """Base class for all errors raised by this library."""


class FormatError(VlscoreError):
    """A file or document is structurally malformed (bad magic, truncated
    payload, unparseable field)."""


class ValidationError(VlscoreError):
    """A structurally well-formed input violates a documented invariant
    (out-of-range value, inconsistent shapes, degenerate vector)."""


class UndefinedMetricError(VlscoreError):
    """A metric was requested on an input where it has no defined value,
    e.g. average precision without any positive pixel."""


class GenerationError(VlscoreError):
    """A synthetic fixture request cannot be satisfied, e.g. more
    orthogonal prototypes than the embedding dimension allows."""

class SptlabError(Exception):
    """Base class for errors raised by sptlab."""


class DimensionError(SptlabError, ValueError):
    pass


class DomainError(SptlabError, ValueError):
    pass


class ValidationError(SptlabError, ValueError):
    pass


class UsageError(SptlabError, ValueError):
    pass


class FormatError(SptlabError, ValueError):
    """Raised for malformed IDX files, checkpoints and parameter files."""

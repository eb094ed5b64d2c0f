"""Exception types shared across the package."""

from __future__ import annotations


class RavenError(ValueError):
    """Raised for invalid inputs or violated pipeline preconditions."""


class FormatError(RavenError):
    """A file or record does not conform to its declared format."""

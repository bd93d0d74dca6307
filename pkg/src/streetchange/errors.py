"""Exception types shared across the pipeline.

The CLI maps these onto exit codes: ConfigError -> 1, DataFormatError -> 2,
MetadataClientError -> 3. Everything else is a programming error.
"""

from __future__ import annotations


class ConfigError(ValueError):
    """Invalid configuration value or unknown configuration key."""


class DataFormatError(ValueError):
    """A file on disk does not conform to its documented layout.

    ``offset`` is the byte offset at which parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class MissingEmbeddingError(KeyError):
    """An image id was not found in the embedding provider."""

    def __init__(self, image_id: str):
        super().__init__(image_id)
        self.image_id = image_id

    def __str__(self) -> str:
        return f"no embedding stored for image id {self.image_id!r}"


class MetadataClientError(RuntimeError):
    """The panorama metadata backend failed; the query may be retried."""


class GeometryError(ValueError):
    """Degenerate or malformed geometry input."""


class UndefinedStatisticError(ValueError):
    """A statistic is undefined for the given data (zero variance, zero base)."""

"""Exception hierarchy shared across the package.

Every error carries an ``exit_code`` so the CLI can map failure classes to
distinct process exit codes without a lookup table at the call sites.
"""


class FusionPoolError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class MissingInputError(FusionPoolError):
    """A referenced file or directory does not exist."""

    exit_code = 3


class FormatError(FusionPoolError):
    """A file exists but does not conform to its declared format."""

    exit_code = 4


class ManifestError(FormatError):
    """Malformed dataset manifest; message includes the offending line number."""


class ChecksumError(FormatError):
    """Stored CRC32 does not match the payload."""

    exit_code = 6


class ValidationError(FusionPoolError):
    """Inputs are well-formed but violate a contract (dims, labels, task ids)."""

    exit_code = 5


class SchemaMismatchError(ValidationError):
    """Backbone schemas of two pools (or a pool and a head) disagree."""


class LabelError(ValidationError):
    """A class label is unknown to the relevant label space."""

    exit_code = 7


class UnsupportedHeadError(ValidationError):
    """Operation requires a head kind that does not support it."""

    exit_code = 8

"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: ConfigurationError -> 1, DataError and
subclasses -> 2, any other FedspeechError -> 3.
"""


class FedspeechError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(FedspeechError):
    """Invalid configuration: bad dimensions, bad fold counts, bad config files."""


class DataError(FedspeechError):
    """Invalid input data: malformed files, bad labels, non-finite values."""


class UnsupportedVersionError(DataError):
    """Corpus file declares a format version this reader does not know."""


class TruncatedPayloadError(DataError):
    """Corpus file ends before the payload its header declares."""


class ShapeError(FedspeechError):
    """Array shapes incompatible with the model architecture."""


class ProtocolError(FedspeechError):
    """Server-side federation failure (empty round, incompatible client update)."""


class TrainingError(FedspeechError):
    """Training cannot proceed (degenerate dataset, non-finite parameters)."""

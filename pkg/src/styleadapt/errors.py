"""Exception types shared across the package."""


class StyleAdaptError(Exception):
    """Base class for all package errors."""


class ConfigError(StyleAdaptError, ValueError):
    """A configuration value violates its invariants."""


class DimensionError(StyleAdaptError, ValueError):
    """A tensor has an unusable shape for the requested operation."""


class SchemaError(StyleAdaptError, ValueError):
    """A parameter collection does not match the expected schema."""


class WeightsLoadError(StyleAdaptError):
    """A pretrained-weights archive is missing tensors or has wrong shapes."""


class ArchiveError(StyleAdaptError):
    """Base class for tensor-archive format errors."""


class CorruptArchiveError(ArchiveError):
    """Archive bytes are truncated or internally inconsistent."""


class FormatVersionError(ArchiveError):
    """Archive was written with an unsupported format version."""


class CodecError(StyleAdaptError):
    """An image file could not be decoded."""


class DataError(StyleAdaptError):
    """A dataset or batch source cannot satisfy a request."""


class DivergenceError(StyleAdaptError):
    """Optimization produced a non-finite loss or gradient.

    Carries the iteration (or step) index at which divergence was detected.
    """

    def __init__(self, message, iteration):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration

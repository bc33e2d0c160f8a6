"""Exception types shared across the registration engine."""


class GigaregError(Exception):
    """Base class for all engine errors."""


class ShapeMismatch(GigaregError):
    """Raster or field dimensions are inconsistent for the requested operation."""


class InsufficientMatches(GigaregError):
    """Fewer matches than the minimum required to fit a transform."""


class DegenerateConfiguration(GigaregError):
    """Geometry is rank-deficient (collinear points, singular normal equations)."""


class AdapterFailure(GigaregError):
    """External matcher subprocess failed, timed out, or replied with invalid data."""


class UnreadableInput(GigaregError):
    """An input image, pyramid, or artifact file cannot be read."""


class CorruptPyramidManifest(GigaregError):
    """Pyramid directory manifest is invalid or references missing tiles."""


class OutputWriteFailure(GigaregError):
    """Writing an output artifact failed."""


class MalformedCsv(GigaregError):
    """Landmark CSV file cannot be parsed."""


class MissingSpacing(GigaregError):
    """Physical landmark units were given without a pixel spacing."""


class LandmarkMismatch(GigaregError):
    """Landmark sets differ in length or identifiers."""


class EmptyInput(GigaregError):
    """An aggregate was requested over an empty collection."""

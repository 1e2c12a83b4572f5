"""Exception types shared across the toolkit."""


class SplatError(Exception):
    """Base class for all toolkit errors."""


class InvalidParameterError(SplatError):
    """Non-finite or out-of-contract numeric input."""


class DegenerateCovarianceError(SplatError):
    """Covariance is numerically singular. Carries the offending Gaussian index."""

    def __init__(self, index, message=None):
        self.index = int(index)
        super().__init__(message or f"degenerate covariance for Gaussian {index}")


class EmptyRegionError(SplatError):
    """A masked loss was evaluated on an empty region."""

    def __init__(self, region_tag):
        self.region_tag = region_tag
        super().__init__(f"empty supervision mask for region {region_tag!r}")


class InvalidSizeError(SplatError):
    """Image smaller than an operator's minimum window."""


class SceneValidationError(SplatError):
    """SceneBundle failed validation before any compute."""


class UnsupportedVersionError(SplatError):
    """Checkpoint or bundle written by an incompatible format version."""


class UnknownObjectError(SplatError):
    """A scenario edit referenced an object id the scene does not contain."""

    def __init__(self, object_id, valid_ids):
        self.object_id = int(object_id)
        self.valid_ids = sorted(int(i) for i in valid_ids)
        super().__init__(
            f"unknown object id {object_id}; scene has objects {self.valid_ids}"
        )

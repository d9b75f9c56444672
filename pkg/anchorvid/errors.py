"""Exception hierarchy shared by every anchorvid module."""


class AnchorVidError(Exception):
    """Base class for all anchorvid errors."""


class ShapeError(AnchorVidError):
    """Operands have incompatible shapes."""


class NonFiniteError(AnchorVidError):
    """A NaN or Inf appeared in a tensor."""


class GradientError(AnchorVidError):
    """Gradient request is malformed (non-scalar loss, detached parameter)."""


class ConfigError(AnchorVidError):
    """Run configuration failed validation."""


class AnchorLayoutError(AnchorVidError):
    """Anchor set or token sequence layout is invalid."""


class AnchorUnavailableError(AnchorVidError):
    """A requested anchor kind has no indexed frames in the source."""


class StageGatingError(AnchorVidError):
    """A training example violates the rules of its training stage."""


class JudgeError(AnchorVidError):
    """The expression judge failed to produce a verdict."""


class ProbeUnavailableError(AnchorVidError):
    """Attention probe requested on a model without instrumentation."""


class ContainerFormatError(AnchorVidError):
    """Binary container or checkpoint is malformed."""


class SourceTooShortError(AnchorVidError):
    """Source video is shorter than one training clip."""


class GeometryError(AnchorVidError):
    """Pose vectors are not unit length."""

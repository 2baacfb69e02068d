"""Exception hierarchy.

``CDCMError`` subclasses ``ValueError`` so callers that only care about bad
input can keep catching the builtin.
"""


class CDCMError(ValueError):
    pass


class InvalidInputError(CDCMError):
    pass


class NotRealLogIdentifiableError(CDCMError):
    """Matrix has no unique real logarithm (assumption A3 fails downstream)."""


class DesignViolationError(CDCMError):
    """Stimulus blocks are confounded (A2) or too short (A1)."""


class TrajectoryDegenerateError(CDCMError):
    """Within-block states do not span the affine space (A4)."""


class NonInjectiveObservationError(CDCMError):
    """HRF at one TR vanishes, so convolution cannot be inverted."""


class DegenerateSignalError(CDCMError):
    pass


class DegenerateDrawsError(CDCMError):
    pass


class DegenerateCovarianceError(CDCMError):
    pass


class SamplerInitError(CDCMError):
    pass


class ParseError(CDCMError):
    pass

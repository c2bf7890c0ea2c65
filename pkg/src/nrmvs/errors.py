"""Exception hierarchy shared across the package."""


class NRMVSError(Exception):
    """Base class for all errors raised by nrmvs."""


class BehindCameraError(NRMVSError):
    """A point lies at or behind the camera plane."""


class DegenerateGeometryError(NRMVSError):
    """Rays are (nearly) parallel, triangulation is ill-posed."""


class EmptyInputError(NRMVSError):
    pass


class DegenerateWeightsError(NRMVSError):
    """All k+1 nearest nodes coincide with the query point."""


class DegenerateNormalError(NRMVSError):
    pass


class SingularBlendError(NRMVSError):
    """The weighted rotation blend cannot be inverted."""


class IncompatibleGraphsError(NRMVSError):
    pass


class NoInliersError(NRMVSError):
    pass


class DivergedError(NRMVSError):
    """Non-finite residuals during optimization.

    The last finite state is kept on ``graph``.
    """

    def __init__(self, message, graph=None):
        super().__init__(message)
        self.graph = graph


class NoSourcesError(NRMVSError):
    pass


class BootstrapError(NRMVSError):
    """No view pair qualifies as canonical pair."""


class ResolutionMismatchError(NRMVSError):
    pass


class ParseError(NRMVSError):
    """Malformed input file; carries the offending line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line

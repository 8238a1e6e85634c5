"""Exception types raised across the library."""


class ImbaError(Exception):
    """Base class for all library errors."""


# geometry

class BehindCamera(ImbaError):
    """Point has non-positive depth in the camera frame."""


class LowParallax(ImbaError):
    """Triangulation rays are too close to parallel."""


class CheiralityViolation(ImbaError):
    """Triangulated point lies behind one of the cameras."""


# solvers

class SingularSystem(ImbaError):
    """Reduced normal equations are not positive definite after damping retries."""


class InsufficientObservations(ImbaError):
    """Problem does not meet the minimum frame/track/observation counts."""


class DegenerateConfiguration(ImbaError):
    """Point configuration is rank deficient (e.g. collinear points for PnP)."""


class NoCheiralSolution(ImbaError):
    """No pose candidate places the points in front of the camera."""


class TooFewMatches(ImbaError):
    """Fewer matches than the minimal sample size."""


class NoConsensus(ImbaError):
    """RANSAC failed to find a model with enough inliers."""


# ba

class InvalidWindow(ImbaError):
    """Pair-enumeration span is outside the allowed range."""


class NoViablePair(ImbaError):
    """No frame pair has enough correspondences to anchor the map."""


class InitializationFailed(ImbaError):
    """Map initialization could not pose every frame."""


class CollapsedProblem(ImbaError):
    """Too few active tracks survive to continue optimizing."""


# matcher

class QueryOutOfBounds(ImbaError):
    """Query pixel falls outside the descriptor grid coverage."""


class MissingForwardCache(ImbaError):
    """Backward pass requested but the feature maps carry no forward cache."""


# evalkit

class EmptyInput(ImbaError):
    """Metric requested on an empty collection."""


class ZeroBaseline(ImbaError):
    """Relative-pose error undefined for a zero ground-truth baseline."""

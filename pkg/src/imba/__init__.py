"""Bundle-adjustment supervised feature matching on procedurally generated scenes."""

from . import errors
from .geometry import Intrinsics, SE3Pose

__all__ = ["errors", "Intrinsics", "SE3Pose"]
__version__ = "0.1.0"

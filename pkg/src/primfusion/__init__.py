"""Plane-aware radiance field reconstruction of indoor scenes from posed RGB-D frames."""

from .geometry import Frame, Intrinsics, Plane, Pose, Ray
from .registry import Registry
from .volume import DENSE, EMPTY, EditState, SemanticVolume

__version__ = "0.1.0"

__all__ = ["Frame", "Intrinsics", "Plane", "Pose", "Ray", "Registry", "SemanticVolume", "EditState",
           "EMPTY", "DENSE", "__version__"]

"""Online dense mapping of street scenes with sky, road and free Gaussian families."""
from .config import SceneConfig
from .scene import (FreeGaussians, HybridScene, PlaneGaussians, PlaneSegment, SphereGaussians,
                    lift_plane, lift_sphere, materialize_covariance)

__version__ = "0.1.0"

"""Dense monocular depth-map fusion back-end.

Fuses semi-dense inverse-depth maps from a keyframe SLAM front-end with
single-image relative-depth predictions into dense, globally consistent
depth maps, refines the keyframe pose graph from the densified structure,
and evaluates reconstruction quality against ground truth.
"""

from .core import FusionConfig, Intrinsics, Keyframe, validate_keyframe
from .geometry import Sim3Pose

__all__ = [
    "FusionConfig",
    "Intrinsics",
    "Keyframe",
    "Sim3Pose",
    "validate_keyframe",
]

__version__ = "0.1.0"

"""Toolkit for a 16-DoF tendon-driven hand with a combined abduction joint.

Submodules:
    model         kinematic structure, couplings, forward kinematics
    transmission  motor <-> joint mapping through tendon geometry
    workspace     Monte-Carlo reachable workspaces and voxel volumes
    retargeting   human keypoint frames -> robot joint vectors
    grasp         pinch, object-size and disturbance-resistance analysis
    service       local network API
    cli           command-line entry point
"""

from .model import (
    HandModel,
    JointSpec,
    CouplingSpec,
    JointVector,
    FingertipPoses,
    load_hand_description,
    load_default_model,
    forward_kinematics,
    apply_couplings,
    clamp_to_limits,
    joint_vector,
)

__version__ = "0.1.0"

__all__ = [
    "HandModel",
    "JointSpec",
    "CouplingSpec",
    "JointVector",
    "FingertipPoses",
    "load_hand_description",
    "load_default_model",
    "forward_kinematics",
    "apply_couplings",
    "clamp_to_limits",
    "joint_vector",
    "__version__",
]

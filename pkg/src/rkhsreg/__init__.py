"""Correspondence-free registration and bundle adjustment for semantic point
clouds, built on kernel-space alignment of whole frames."""

from rkhsreg.se3 import (
    IcosahedralRotations,
    Pose,
    Rotation,
    Twist,
    exp_se3,
    icosahedral_group,
    log_se3,
    wedge,
)

__all__ = [
    "IcosahedralRotations",
    "Pose",
    "Rotation",
    "Twist",
    "exp_se3",
    "icosahedral_group",
    "log_se3",
    "wedge",
]

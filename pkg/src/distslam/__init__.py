"""Distributed multi-robot pose-graph SLAM back end with a rendezvous simulator."""

__version__ = "0.1.0"

from .errors import DistSlamError  # noqa: E402
from .se3 import Pose3  # noqa: E402
from .posegraph import GlobalKey, MeasurementEdge, PoseGraph  # noqa: E402

__all__ = ["__version__", "DistSlamError", "GlobalKey", "MeasurementEdge", "Pose3", "PoseGraph"]

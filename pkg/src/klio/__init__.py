"""LiDAR-inertial odometry with an error-state EKF, IMU preintegration and GICP."""

from .config import KlioConfig
from .errors import KlioError
from .geometry import Pose
from .pipeline import Odometry, OdometryRecord, create, replay
from .pointcloud import ScanCloud
from .preintegration import ImuSample, NavState

__all__ = [
    "ImuSample",
    "KlioConfig",
    "KlioError",
    "NavState",
    "Odometry",
    "OdometryRecord",
    "Pose",
    "ScanCloud",
    "create",
    "replay",
]

__version__ = "0.1.0"

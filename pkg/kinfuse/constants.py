from typing import Dict, Tuple

import numpy as np

GRAVITY_AXIS = np.array([0.0, 0.0, 1.0])

# Trackers in wire-id order. The id is the index into this tuple.
TRACKED_BONES: Tuple[str, ...] = (
    "pelvis",
    "left_upper_arm",
    "right_upper_arm",
    "left_forearm",
    "right_forearm",
    "left_thigh",
    "right_thigh",
    "left_shank",
    "right_shank",
)
PELVIS = "pelvis"

# Child bones of the elbow, hip and knee joints.
DIRECT_BONES: Tuple[str, ...] = (
    "left_forearm",
    "right_forearm",
    "left_thigh",
    "right_thigh",
    "left_shank",
    "right_shank",
)
SHOULDER_BONES: Tuple[str, ...] = ("left_upper_arm", "right_upper_arm")
FOOT_JOINTS: Tuple[str, ...] = ("left_foot", "right_foot")

# Rates and timing.
IMU_RATE_HZ = 100.0
CAMERA_RATE_HZ = 30.0
MAX_GAP_MS = 50
CAMERA_PAIR_GAP_MS = 5
STALE_AFTER_MS = 50
STALE_FADE_MS = 500.0
EPOCH_MS = 1_700_000_000_000

# so3.
KARCHER_TOLERANCE = 1e-10
KARCHER_MAX_ITERATIONS = 100
TRIM_THRESHOLD_RAD = float(np.deg2rad(15.0))
BRANCH_TOLERANCE = 1e-7
YAW_TOLERANCE = 1e-9

# Calibration.
N_MIN = 30

# Pose optimization.
WINDOW = 30
OVERLAP = 10
STEP_TOLERANCE = 1e-8
MAX_ITERATIONS = 50
CONTACT_HEIGHT_M = 0.05
CONTACT_SPEED_MPS = 0.2
GROUND_WINDOW_S = 1.0
HEAD_OFFSET_RANGE_M = (0.3, 1.0)

# Wire format.
PACKET_MAGIC = b"\xa7\x51"
PACKET_SIZE = 24
Q15_SCALE = 32767
QUATERNION_NORM_TOLERANCE = 0.02

# Document and file versions.
SKELETON_VERSION = 1
RECORDING_VERSION = 1
CONFIG_VERSION = 1
CALIBRATION_VERSION = 1
REPORT_VERSION = 1

# Stage keys for seed fan-out. Append only.
STAGES: Dict[str, int] = {
    "motion": 0,
    "imu": 1,
    "tags": 2,
    "bones": 3,
    "slam": 4,
    "camera": 5,
    "calibration": 6,
}

# Stream ids in recordings: "<prefix>/<tracked bone>" plus the single SLAM stream.
IMU_PREFIX = "imu"
TAG_PREFIX = "tag"
BONE_PREFIX = "bone"
TRACKED_PREFIX = "tracked"
SLAM_STREAM = "slam"

# Marker names of the calibration segment.
CALIBRATION_START = "calibration_start"
CALIBRATION_END = "calibration_end"

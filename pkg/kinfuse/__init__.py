from . import constants, so3
from .calibration import (
    CalibrationInput,
    CalibrationResult,
    TrackerCalibration,
    build_calibration_input,
    calibrate,
    camera_world,
    dump_calibration,
    estimate_bone_to_sensor,
    estimate_world_alignment,
    load_calibration,
)
from .codec import TrackerPacket, crc16_ccitt, decode_packet, encode_packet
from .errors import ConfigError, ConvergenceError, DataError, KinfuseError
from .guidance import GuidanceWeights, fuse, optimize_pose, optimize_sequence
from .interfaces import AlignedEntry, AlignedFrame, HeadPose, Stream, TimedSample
from .metrics import Clip, EvalReport, build_report, jae, mpjpe, recall
from .motions import MotionKind, generate_motion
from .recording import Recording, read_motion, read_recording, write_motion, write_recording
from .simulate import SimBundle, SimConfig, simulate_sensors
from .skeleton import MotionSequence, PoseFrame, SkeletonModel, default_skeleton
from .so3 import Rotation, karcher_mean, yaw_project
from .sync import synchronize
from .tracking import TrackedBones, anchor_root, track_bones

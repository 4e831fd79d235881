from __future__ import annotations

from typing import Any, Dict

import numpy as np


class KinfuseError(Exception):
    "Base class of every error raised by kinfuse."

    exit_code: int = 1
    module: str = "kinfuse"

    def __init__(self, message: str = "") -> None:
        super().__init__(f"{self.module}: {message}" if message else self.module)


class ConfigError(KinfuseError):
    exit_code = 2


class DataError(KinfuseError):
    exit_code = 3


class ConvergenceError(KinfuseError):
    exit_code = 4


class InvalidConfigError(ConfigError):
    module = "config"


# so3-geometry


class EmptyInputError(DataError):
    module = "so3"


class KarcherConvergenceError(ConvergenceError):
    module = "so3"

    def __init__(self, best: Any, gradient_norm: float, iterations: int) -> None:
        self.best = best
        self.gradient_norm = gradient_norm
        self.iterations = iterations
        super().__init__(
            f"karcher mean did not converge after {iterations} iterations"
            f" (gradient norm {gradient_norm:.3e})"
        )


# skeleton


class SkeletonMismatchError(DataError):
    module = "skeleton"


class UnknownBoneError(DataError):
    module = "skeleton"

    def __init__(self, name: str) -> None:
        self.name = name
        super().__init__(f"unknown bone {name!r}")


class SkeletonFileError(ConfigError):
    module = "skeleton"


# sensor-sim


class UnknownMotionError(ConfigError):
    module = "simulate"


# stream-io


class PacketError(DataError):
    module = "codec"


class BadMagicError(PacketError):
    pass


class ChecksumError(PacketError):
    pass


class ShortBufferError(PacketError):
    pass


class MalformedPacketError(PacketError):
    pass


class RecordingError(DataError):
    module = "recording"


class VersionError(RecordingError):
    pass


class TruncatedFileError(RecordingError):
    def __init__(self, offset: int, message: str = "") -> None:
        self.offset = offset
        super().__init__(f"file truncated at byte offset {offset}" + message)


class SchemaError(RecordingError):
    pass


class EmptyStreamError(DataError):
    module = "sync"


class DuplicateStreamError(DataError):
    module = "sync"


# calibration


class TooFewSamplesError(DataError):
    module = "calibration"

    def __init__(self, tracker: str, count: int, required: int) -> None:
        self.tracker = tracker
        self.count = count
        self.required = required
        super().__init__(
            f"tracker {tracker!r} has {count} valid samples, {required} required"
        )


class PelvisAnchorError(DataError):
    module = "calibration"


class MissingMarkerError(DataError):
    module = "calibration"

    def __init__(self, marker: str) -> None:
        self.marker = marker
        super().__init__(f"recording has no {marker!r} marker")


# fusion-tracking


class MissingCalibrationError(DataError):
    module = "tracking"

    def __init__(self, tracker: str) -> None:
        self.tracker = tracker
        super().__init__(f"no calibration for tracker {tracker!r}")


class WindowError(DataError):
    module = "guidance"


class OptimizationError(ConvergenceError):
    module = "guidance"

    def __init__(
        self,
        message: str,
        best: np.ndarray | None,
        residuals: Dict[str, float],
        motion: Any = None,
    ) -> None:
        self.best = best
        self.residuals = dict(residuals)
        # Best-so-far sequence when raised from a multi-window solve.
        self.motion = motion
        super().__init__(message)


# metrics-eval


class ZeroValidPairsError(DataError):
    module = "metrics"

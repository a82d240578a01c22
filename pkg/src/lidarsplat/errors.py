"""Exception types shared across the pipeline stages."""


class LidarSplatError(Exception):
    """Base class for all pipeline errors."""


class AngleNearPiError(LidarSplatError):
    """Rotation angle too close to pi for a stable logarithm."""


class BehindCameraError(LidarSplatError):
    """Point has non-positive depth and cannot be projected."""


class MissingIndexFileError(LidarSplatError):
    """A dataset index file (rgb.txt / depth.txt / calib.txt) is absent."""


class TooFewMatchesError(LidarSplatError):
    """Feature matching produced fewer matches than the minimum."""


class DegenerateBaselineError(LidarSplatError):
    """Triangulation observations have insufficient parallax."""


class NegativeDepthError(LidarSplatError):
    """Triangulated point lies behind at least one observing camera."""


class DegenerateConfigurationError(LidarSplatError):
    """Point sets are rank-deficient; rigid alignment is ill-posed."""


class InsufficientInliersError(LidarSplatError):
    """RANSAC could not find a model with enough inliers."""


class DisconnectedGraphError(LidarSplatError):
    """Pose graph is not connected; lists the components found."""

    def __init__(self, components):
        self.components = [sorted(c) for c in components]
        super().__init__(f"pose graph has {len(components)} components: {self.components}")


class EmptyInitializationError(LidarSplatError):
    """No LiDAR point projected inside the image; nothing to initialize."""


class DimensionMismatchError(LidarSplatError):
    """Two images passed to a metric do not share dimensions."""


class NoAssociationsError(LidarSplatError):
    """Trajectories share no timestamps within the association tolerance."""


class FrameOutOfRangeError(LidarSplatError):
    """Requested frame index does not exist in the dataset."""


class MissingArtifactsError(LidarSplatError):
    """Expected run artifacts (trajectory, renders, ...) were not found."""


class WorldSpecError(LidarSplatError):
    """Synthetic world specification is invalid."""


class ConfigError(LidarSplatError):
    """Pipeline configuration is invalid or references missing paths."""


class StageError(LidarSplatError):
    """A pipeline stage failed; carries the stage name for CLI reporting."""

    def __init__(self, stage, message):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")

"""Curated 6DoF object trajectories from egocentric tracker output."""

__version__ = "0.1.0"

from .actions import (
    ActionChunk,
    action_mse,
    chunk_actions,
    compute_norm_stats,
    denormalize,
    merge_datasets,
    normalize,
    rot6d_from_rotation,
    rotation_from_rot6d,
    to_actions,
)
from .curation import CurationConfig, bgts, curate, smooth_translations, travel_distance
from .geometry import (
    RegistrationConfig,
    RigidTransform,
    estimate_rigid_transform,
    euler_from_rotation,
    extract_pose_sequence,
    register_to_start_frame,
    rotation_from_euler,
)
from .model import (
    ActionRecord,
    CurationReport,
    Episode,
    NormStats,
    Pose6DoF,
    TrackedFrame,
    Trajectory,
    validate_episode,
)

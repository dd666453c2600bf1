"""Domain types shared by every stage of the pipeline.

All types are frozen dataclasses. Array fields are copied to float64 on
construction and marked read-only, so instances can be shared freely.
Construction only normalizes shapes; invariant checking is the job of
:func:`validate_episode`, which never raises.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

KEPT = "kept"
REJECTED_TRAVEL = "rejected-travel"
REJECTED_BGTS = "rejected-bgts"
REJECTED_DEGENERATE = "rejected-degenerate"
VERDICTS = (KEPT, REJECTED_TRAVEL, REJECTED_BGTS, REJECTED_DEGENERATE)

INSUFFICIENT_MOTION = "insufficient-motion"

ORTHO_TOL = 1e-6


def frozen_array(a, shape_tail=None, name="array", dtype=np.float64):
    """Copy ``a`` into a read-only array, checking the trailing shape."""
    arr = np.array(a, dtype=dtype, copy=True)
    if shape_tail is not None:
        if arr.size == 0 and arr.ndim == 1:
            arr = arr.reshape((0,) + tuple(shape_tail))
        if arr.shape[arr.ndim - len(shape_tail):] != tuple(shape_tail):
            raise ValueError(f"{name}: expected shape (..., {shape_tail}), got {arr.shape}")
    arr.setflags(write=False)
    return arr


def _optional_array(a, shape_tail, name):
    return None if a is None else frozen_array(a, shape_tail, name)


@dataclass(frozen=True, eq=False)
class Pose6DoF:
    position: np.ndarray
    rotation: np.ndarray
    timestamp_index: int

    def __post_init__(self):
        object.__setattr__(self, "position", frozen_array(self.position, (3,), "position").reshape(3))
        object.__setattr__(self, "rotation", frozen_array(self.rotation, (3, 3), "rotation").reshape(3, 3))
        object.__setattr__(self, "timestamp_index", int(self.timestamp_index))

    def replace(self, **changes) -> "Pose6DoF":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True, eq=False)
class Trajectory:
    poses: tuple
    frame_rate_hz: float = 20.0

    def __post_init__(self):
        object.__setattr__(self, "poses", tuple(self.poses))
        object.__setattr__(self, "frame_rate_hz", float(self.frame_rate_hz))

    def __len__(self):
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.position for p in self.poses]).reshape(-1, 3)

    @property
    def rotations(self) -> np.ndarray:
        return np.array([p.rotation for p in self.poses]).reshape(-1, 3, 3)

    @property
    def timestamps(self) -> list:
        return [p.timestamp_index for p in self.poses]

    @classmethod
    def from_arrays(cls, positions, rotations, timestamps=None, frame_rate_hz=20.0):
        positions = np.asarray(positions, dtype=np.float64)
        rotations = np.asarray(rotations, dtype=np.float64)
        if timestamps is None:
            timestamps = range(1, len(positions) + 1)
        poses = [Pose6DoF(p, r, t) for p, r, t in zip(positions, rotations, timestamps)]
        return cls(poses, frame_rate_hz)


@dataclass(frozen=True, eq=False)
class TrackedFrame:
    """One video frame of tracker output, in that frame's camera coordinates.

    ``object_track_2d`` holds the image positions of the tracked object points
    (K×2) and ``background_tracks_2d`` those of L background points (L×2).
    Row ``i`` of every array refers to the same physical point in all frames
    of an episode.
    """

    object_points: np.ndarray
    frame_index: int
    object_colors: Optional[np.ndarray] = None
    scene_points: Optional[np.ndarray] = None
    scene_colors: Optional[np.ndarray] = None
    object_track_2d: Optional[np.ndarray] = None
    background_tracks_2d: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "object_points", frozen_array(self.object_points, (3,), "object_points"))
        object.__setattr__(self, "frame_index", int(self.frame_index))
        for name, tail in (
            ("object_colors", (3,)),
            ("scene_points", (3,)),
            ("scene_colors", (3,)),
            ("object_track_2d", (2,)),
            ("background_tracks_2d", (2,)),
        ):
            object.__setattr__(self, name, _optional_array(getattr(self, name), tail, name))


@dataclass(frozen=True)
class CurationReport:
    travel_distance_m: float
    bgts: Optional[float]
    verdict: str
    thresholds_used: tuple
    reason: str = ""
    smoothed: bool = False
    bgts_flag: Optional[str] = None

    @property
    def insufficient_motion(self) -> bool:
        return self.bgts_flag == INSUFFICIENT_MOTION

    def to_dict(self) -> dict:
        return {
            "travel_distance_m": self.travel_distance_m,
            "bgts": self.bgts,
            "bgts_flag": self.bgts_flag,
            "verdict": self.verdict,
            "thresholds_used": list(self.thresholds_used),
            "reason": self.reason,
            "smoothed": self.smoothed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CurationReport":
        return cls(
            travel_distance_m=d["travel_distance_m"],
            bgts=d["bgts"],
            verdict=d["verdict"],
            thresholds_used=tuple(d["thresholds_used"]),
            reason=d.get("reason", ""),
            smoothed=d.get("smoothed", False),
            bgts_flag=d.get("bgts_flag"),
        )


@dataclass(frozen=True, eq=False)
class Episode:
    id: str
    instruction: str = ""
    verb: str = ""
    object: str = ""
    frames: tuple = ()
    trajectory: Optional[Trajectory] = None
    curation: Optional[CurationReport] = None
    source_dataset: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))

    def replace(self, **changes) -> "Episode":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True, eq=False)
class ActionRecord:
    """One step of the displacement action, plus the proprioceptive state at ``t``."""

    values: np.ndarray
    raw_values: np.ndarray
    pad_mask: np.ndarray
    t: int
    state: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "values", frozen_array(self.values, name="values").reshape(-1))
        object.__setattr__(self, "raw_values", frozen_array(self.raw_values, name="raw_values").reshape(-1))
        object.__setattr__(self, "pad_mask", frozen_array(self.pad_mask, dtype=bool).reshape(-1))
        object.__setattr__(self, "t", int(self.t))
        if self.state is not None:
            object.__setattr__(self, "state", frozen_array(self.state, name="state").reshape(-1))


@dataclass(frozen=True, eq=False)
class NormStats:
    q01: np.ndarray
    q99: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    dataset_tag: str = ""

    def __post_init__(self):
        for name in ("q01", "q99", "mean", "std"):
            object.__setattr__(self, name, frozen_array(getattr(self, name), name=name).reshape(-1))
        if not (len(self.q01) == len(self.q99) == len(self.mean) == len(self.std)):
            raise ValueError("NormStats: per-dimension arrays differ in length")

    @property
    def dim(self) -> int:
        return len(self.q01)

    def to_dict(self) -> dict:
        return {
            "q01": self.q01.tolist(),
            "q99": self.q99.tolist(),
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "dataset_tag": self.dataset_tag,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(d["q01"], d["q99"], d["mean"], d["std"], d.get("dataset_tag", ""))


def rotation_defects(R) -> tuple:
    """Return ``(||R^T R - I||_F, det R)``."""
    R = np.asarray(R, dtype=np.float64)
    return float(np.linalg.norm(R.T @ R - np.eye(3))), float(np.linalg.det(R))


def is_rotation(R, tol: float = ORTHO_TOL) -> bool:
    ortho, det = rotation_defects(R)
    return ortho < tol and abs(det - 1.0) <= tol


def _finite(a) -> bool:
    return a is None or bool(np.all(np.isfinite(a)))


def validate_episode(ep: Episode) -> list:
    """Check every domain invariant of ``ep``.

    Returns a list of ``"<field>: <invariant>"`` strings, empty when the
    episode is well formed. Each distinct violation is listed once.
    """
    out = []

    def bad(msg):
        if msg not in out:
            out.append(msg)

    if not ep.id:
        bad("id: non-empty required")
    if ep.instruction.strip():
        if not ep.verb.strip():
            bad("verb: non-empty when instruction is set")
        if not ep.object.strip():
            bad("object: non-empty when instruction is set")

    n_points = None
    prev_index = None
    for fr in ep.frames:
        n = fr.object_points.shape[0]
        if n < 3:
            bad("object_points: N ≥ 3 required")
        if n_points is None:
            n_points = n
        elif n != n_points:
            bad("object_points: N constant across episode")
        for name in ("object_points", "object_colors", "scene_points", "scene_colors",
                     "object_track_2d", "background_tracks_2d"):
            if not _finite(getattr(fr, name)):
                bad(f"{name}: finite coordinates required")
        for pts, cols, name in ((fr.object_points, fr.object_colors, "object_colors"),
                                (fr.scene_points, fr.scene_colors, "scene_colors")):
            if cols is None:
                continue
            if pts is None or cols.shape[0] != pts.shape[0]:
                bad(f"{name}: one color per point")
            if cols.size and (cols.min() < 0.0 or cols.max() > 1.0):
                bad(f"{name}: RGB in [0, 1]")
        if prev_index is not None and fr.frame_index <= prev_index:
            bad("frames: frame_index strictly increasing")
        prev_index = fr.frame_index

    traj = ep.trajectory
    if traj is not None:
        if len(traj) < 2:
            bad("trajectory: T ≥ 2 required")
        if not (traj.frame_rate_hz > 0 and np.isfinite(traj.frame_rate_hz)):
            bad("frame_rate_hz: positive required")
        prev = None
        for p in traj.poses:
            if not _finite(p.position):
                bad("position: finite components required")
            if not _finite(p.rotation) or not is_rotation(p.rotation):
                bad("rotation: orthonormality")
            if prev is not None and p.timestamp_index <= prev:
                bad("timestamp_index: strictly increasing")
            prev = p.timestamp_index

    rep = ep.curation
    if rep is not None:
        if rep.verdict not in VERDICTS:
            bad(f"verdict: one of {', '.join(VERDICTS)}")
        if not rep.travel_distance_m >= 0:
            bad("travel_distance_m: non-negative required")
        if rep.bgts is not None and not -1.0 <= rep.bgts <= 1.0:
            bad("bgts: within [-1, 1]")
        delta_td, delta_bgts = rep.thresholds_used
        if (rep.verdict == REJECTED_TRAVEL) != (rep.travel_distance_m > delta_td):
            bad("verdict: rejected-travel iff D > delta_td")
        bgts_fails = (rep.travel_distance_m <= delta_td and rep.bgts is not None
                      and rep.bgts > delta_bgts)
        if (rep.verdict == REJECTED_BGTS) != bgts_fails:
            bad("verdict: rejected-bgts iff BGTS > delta_bgts after travel check")
    return out

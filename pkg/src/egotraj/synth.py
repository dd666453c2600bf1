"""Synthetic episodes with known object motion and camera ego-motion.

The world frame coincides with the camera frame of the first video frame,
so the ground-truth camera-to-start transform of frame ``t`` is simply the
camera pose at ``t``. Object points are sampled on the surface of a colored
box; scene points fill an ellipsoidal shell around the workspace and are
static in the world. Both are observed per frame in camera coordinates with
optional isotropic Gaussian noise, then projected with a fixed pinhole model
to produce the 2D tracks.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import InvalidSpec, LengthMismatch
from .geometry import RigidTransform, axis_angle_to_matrix, geodesic_angle
from .model import Episode, Pose6DoF, TrackedFrame, Trajectory

FOCAL_PX = 500.0
IMAGE_SIZE = (640, 480)
PRINCIPAL = (IMAGE_SIZE[0] / 2.0, IMAGE_SIZE[1] / 2.0)

FAILURE_MODES = ("none", "registration_jump", "static_object", "low_overlap")

BOX_SIZE = (0.08, 0.06, 0.10)
BOX_CENTER = (0.0, 0.0, 0.6)
SHELL_RADII = (0.6, 1.2)
SHELL_AXES = (1.2, 0.8, 1.0)
N_BACKGROUND_TRACKS = 32
FACE_COLORS = np.array([
    [0.9, 0.1, 0.1], [0.1, 0.8, 0.2], [0.1, 0.2, 0.9],
    [0.9, 0.9, 0.1], [0.8, 0.1, 0.8], [0.1, 0.8, 0.8],
])


@dataclass(frozen=True)
class MotionSpec:
    """Parametric SE(3) path: ``p(t) = velocity * t + spline(t)``, ``R(t) = exp(angular_velocity * t)``.

    ``knots`` are translation offsets placed evenly over the episode and
    joined by a natural cubic spline (one knot is a constant offset).
    Units are meters/frame and radians/frame.
    """

    velocity: tuple = (0.0, 0.0, 0.0)
    angular_velocity: tuple = (0.0, 0.0, 0.0)
    knots: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "velocity", tuple(float(x) for x in self.velocity))
        object.__setattr__(self, "angular_velocity", tuple(float(x) for x in self.angular_velocity))
        object.__setattr__(self, "knots", tuple(tuple(float(x) for x in k) for k in self.knots))
        if len(self.velocity) != 3 or len(self.angular_velocity) != 3 or any(len(k) != 3 for k in self.knots):
            raise InvalidSpec("motion vectors must be 3-dimensional")

    def offsets(self, T: int) -> np.ndarray:
        t = np.arange(T, dtype=np.float64)
        out = t[:, None] * np.array(self.velocity)
        if len(self.knots) == 1:
            out = out + np.array(self.knots[0])
        elif len(self.knots) > 1:
            x = np.linspace(0.0, max(T - 1, 1), len(self.knots))
            out = out + CubicSpline(x, np.array(self.knots), bc_type="natural")(t)
        return out

    def rotations(self, T: int) -> np.ndarray:
        w = np.array(self.angular_velocity)
        return np.array([axis_angle_to_matrix(w * t) for t in range(T)]).reshape(T, 3, 3)


@dataclass(frozen=True)
class SceneSpec:
    frames: int = 10
    n_object_points: int = 200
    n_scene_points: int = 500
    object_motion: MotionSpec = MotionSpec()
    camera_motion: MotionSpec = MotionSpec()
    noise_sigma_m: float = 0.0
    failure_mode: str = "none"
    failure_frame: int = 0
    failure_magnitude_m: float = 0.0
    seed: int = 0
    frame_rate_hz: float = 20.0
    instruction: str = "pick up the box"
    verb: str = "pick"
    object: str = "box"
    episode_id: Optional[str] = None

    def __post_init__(self):
        for name in ("object_motion", "camera_motion"):
            v = getattr(self, name)
            if isinstance(v, dict):
                object.__setattr__(self, name, MotionSpec(**v))
        if self.frames < 1:
            raise InvalidSpec("frames must be >= 1")
        if self.n_object_points < 3 or self.n_scene_points < 0:
            raise InvalidSpec("need n_object_points >= 3 and n_scene_points >= 0")
        if self.noise_sigma_m < 0:
            raise InvalidSpec("noise_sigma_m must be non-negative")
        if self.failure_mode not in FAILURE_MODES:
            raise InvalidSpec(f"failure_mode must be one of {FAILURE_MODES}")
        if self.failure_mode in ("registration_jump", "low_overlap") and not 0 < self.failure_frame < self.frames:
            raise InvalidSpec("failure_frame must lie in [1, frames-1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        return cls(**json.loads(text))

    def with_seed(self, seed: int, episode_id: Optional[str] = None) -> "SceneSpec":
        d = asdict(self)
        d.update(seed=int(seed), episode_id=episode_id)
        return SceneSpec(**d)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    poses: Trajectory
    cam_transforms: tuple


def _sample_box_surface(rng, n):
    size = np.array(BOX_SIZE)
    # faces: (axis, sign); area-weighted face choice
    faces = [(a, s) for a in range(3) for s in (-1.0, 1.0)]
    areas = np.array([np.prod(np.delete(size, a)) for a, _ in faces])
    face = rng.choice(len(faces), size=n, p=areas / areas.sum())
    pts = (rng.random((n, 3)) - 0.5) * size
    colors = np.empty((n, 3))
    for k, (a, s) in enumerate(faces):
        sel = face == k
        pts[sel, a] = s * size[a] / 2.0
        colors[sel] = FACE_COLORS[k]
    return pts, colors


def _sample_shell(rng, n, center):
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = rng.uniform(*SHELL_RADII, size=(n, 1))
    return center + d * r * np.array(SHELL_AXES)


def project(points_cam) -> np.ndarray:
    p = np.asarray(points_cam, dtype=np.float64)
    z = p[:, 2]
    return np.stack([FOCAL_PX * p[:, 0] / z + PRINCIPAL[0], FOCAL_PX * p[:, 1] / z + PRINCIPAL[1]], axis=1)


def _camera_poses(spec: SceneSpec):
    T = spec.frames
    offs = spec.camera_motion.offsets(T)
    rots = spec.camera_motion.rotations(T)
    return [RigidTransform(rots[t], offs[t]) for t in range(T)]


def generate_episode(spec: SceneSpec):
    """Return ``(Episode, GroundTruth)`` for ``spec``; bit-identical per spec."""
    rng = np.random.default_rng(spec.seed)
    T = spec.frames
    body, body_colors = _sample_box_surface(rng, spec.n_object_points)
    body -= body.mean(axis=0)
    center0 = np.array(BOX_CENTER)
    scene_world = _sample_shell(rng, spec.n_scene_points, center0)
    scene_colors = rng.random((spec.n_scene_points, 3))

    if spec.failure_mode == "static_object":
        obj_offsets = np.zeros((T, 3))
        obj_rots = np.repeat(np.eye(3)[None], T, axis=0)
    else:
        obj_offsets = spec.object_motion.offsets(T)
        obj_rots = spec.object_motion.rotations(T)
    centers = center0 + obj_offsets

    cams_true = _camera_poses(spec)
    cams_scene = list(cams_true)
    if spec.failure_mode == "registration_jump":
        # The camera really jumps, but the scene cloud keeps reporting the pre-jump
        # pose, so registration misses the jump and the object appears to teleport.
        jump = RigidTransform(np.eye(3), [spec.failure_magnitude_m, 0.0, 0.0])
        cams_true = [c if t < spec.failure_frame else jump.compose(c) for t, c in enumerate(cams_true)]

    disjoint = None
    if spec.failure_mode == "low_overlap":
        disjoint = _sample_shell(rng, spec.n_scene_points, center0 + np.array([25.0, 25.0, 25.0]))

    # Background tracks follow scene points that stay in front of the camera.
    depth_ok = np.ones(spec.n_scene_points, dtype=bool)
    for cam in cams_true:
        depth_ok &= cam.inverse().apply(scene_world)[:, 2] > 0.2
    track_ids = np.flatnonzero(depth_ok)[:N_BACKGROUND_TRACKS]

    frames, gt_poses = [], []
    for t in range(T):
        obj_world = centers[t] + body @ obj_rots[t].T
        world_to_cam = cams_true[t].inverse()
        obj_cam = world_to_cam.apply(obj_world)
        scene_src = disjoint if (disjoint is not None and t >= spec.failure_frame) else scene_world
        scene_cam = cams_scene[t].inverse().apply(scene_src)
        bg_cam = world_to_cam.apply(scene_world[track_ids])
        if spec.noise_sigma_m > 0:
            obj_cam = obj_cam + rng.normal(scale=spec.noise_sigma_m, size=obj_cam.shape)
            scene_cam = scene_cam + rng.normal(scale=spec.noise_sigma_m, size=scene_cam.shape)
            bg_cam = bg_cam + rng.normal(scale=spec.noise_sigma_m, size=bg_cam.shape)
        frames.append(TrackedFrame(
            object_points=obj_cam,
            frame_index=t + 1,
            object_colors=body_colors,
            scene_points=scene_cam,
            scene_colors=scene_colors,
            object_track_2d=project(obj_cam),
            background_tracks_2d=project(bg_cam) if len(track_ids) else np.zeros((0, 2)),
        ))
        gt_poses.append(Pose6DoF(centers[t], obj_rots[t] @ obj_rots[0].T, t + 1))

    ep = Episode(
        id=spec.episode_id or f"synth-{spec.seed}",
        instruction=spec.instruction,
        verb=spec.verb,
        object=spec.object,
        frames=frames,
        source_dataset="synthetic",
        meta={
            "intrinsics": {"fx": FOCAL_PX, "fy": FOCAL_PX, "cx": PRINCIPAL[0], "cy": PRINCIPAL[1],
                           "width": IMAGE_SIZE[0], "height": IMAGE_SIZE[1]},
            "frame_rate_hz": spec.frame_rate_hz,
            "spec": json.loads(spec.to_json()),
        },
    )
    return ep, GroundTruth(Trajectory(gt_poses, spec.frame_rate_hz), tuple(cams_true))


def evaluate_recovery(gt, recovered: Trajectory) -> dict:
    """Absolute trajectory RMSE (no alignment) and worst rotation geodesic in degrees."""
    gt_traj = gt.poses if isinstance(gt, GroundTruth) else gt
    if len(gt_traj) != len(recovered):
        raise LengthMismatch(f"ground truth has {len(gt_traj)} poses, recovered {len(recovered)}")
    if len(recovered) == 0:
        return {"ate_rmse_m": 0.0, "max_rot_geodesic_deg": 0.0}
    diff = gt_traj.positions - recovered.positions
    ate = float(np.sqrt(np.mean(np.sum(diff**2, axis=1))))
    rot = max(geodesic_angle(a.rotation, b.rotation) for a, b in zip(gt_traj.poses, recovered.poses))
    return {"ate_rmse_m": ate, "max_rot_geodesic_deg": float(np.degrees(rot))}


def random_rotation(rng) -> np.ndarray:
    """Uniformly distributed rotation via a normalized Gaussian quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def _random_direction(rng, planar=False):
    v = rng.normal(size=3)
    if planar:
        v[2] = 0.0
    return v / np.linalg.norm(v)


def ego_motion_spec(rng, max_step_m=0.02, max_step_deg=2.0) -> MotionSpec:
    """Constant-rate camera motion at up to ``max_step_m`` and ``max_step_deg`` per frame."""
    v = _random_direction(rng) * rng.uniform(0.0, max_step_m)
    w = _random_direction(rng) * np.radians(rng.uniform(0.0, max_step_deg))
    return MotionSpec(tuple(v), tuple(w))


def manipulation_spec(rng, frames=20, **kw) -> SceneSpec:
    """An object carried once around a loop while the head drifts slowly.

    The loop (radius 4-7 cm, random plane and phase) sweeps every image
    direction, so object and ego-motion displacements are decorrelated.
    """
    radius = rng.uniform(0.04, 0.07)
    a = _random_direction(rng)
    b = np.cross(a, _random_direction(rng))
    b /= np.linalg.norm(b)
    phase = rng.uniform(0.0, 2 * np.pi)
    phis = phase + np.linspace(0.0, 2 * np.pi, 9)
    loop = [radius * ((np.cos(p) - np.cos(phase)) * a + (np.sin(p) - np.sin(phase)) * b) for p in phis]
    obj = MotionSpec((0.0, 0.0, 0.0), tuple(_random_direction(rng) * np.radians(rng.uniform(0.0, 3.0))),
                     tuple(tuple(k) for k in loop))
    cam = MotionSpec(tuple(_random_direction(rng) * rng.uniform(0.0, 0.003)),
                     tuple(_random_direction(rng) * np.radians(rng.uniform(0.0, 0.3))))
    return SceneSpec(frames=frames, object_motion=obj, camera_motion=cam,
                     seed=int(rng.integers(2**31)), **kw)


def static_object_spec(rng, frames=20, **kw) -> SceneSpec:
    """A world-fixed object observed by a laterally moving, slightly panning camera."""
    v = _random_direction(rng, planar=True) * rng.uniform(0.01, 0.02)
    # pan/tilt that shifts the image the same way as the translation does
    w = np.array([-v[1], v[0], 0.0]) / np.linalg.norm(v) * np.radians(rng.uniform(0.0, 0.5))
    cam = MotionSpec(tuple(v), tuple(w))
    return SceneSpec(frames=frames, camera_motion=cam, failure_mode="static_object",
                     seed=int(rng.integers(2**31)), **kw)

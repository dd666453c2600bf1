"""Rigid-transform estimation, frame registration and pose extraction.

Frames are registered into the camera coordinates of the first frame by
chaining pairwise point-to-point ICP between consecutive scene clouds. The
object pose sequence is then read off the registered object points: the
position is the centroid, the orientation the composition of per-step Kabsch
rotations between consecutive (index-corresponded) object clouds.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateInput, NotARotation, RegistrationFailed
from .model import Pose6DoF, Trajectory, frozen_array, rotation_defects

logger = logging.getLogger(__name__)

REORTHO_EVERY = 10
_RANK_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Maps ``x`` to ``rotation @ x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", frozen_array(self.rotation, (3, 3), "rotation").reshape(3, 3))
        object.__setattr__(self, "translation", frozen_array(self.translation, (3,), "translation").reshape(3))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True)
class RegistrationConfig:
    max_iterations: int = 50
    convergence_tol: float = 1e-5
    max_correspondence_dist: float = 0.05
    color_weight: float = 0.0
    min_overlap_fraction: float = 0.3
    min_scene_points: int = 50

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        if self.convergence_tol <= 0 or self.max_correspondence_dist <= 0:
            raise ValueError("convergence_tol and max_correspondence_dist must be positive")
        if not 0.0 <= self.color_weight <= 1.0:
            raise ValueError("color_weight must lie in [0, 1]")
        if not 0.0 < self.min_overlap_fraction <= 1.0:
            raise ValueError("min_overlap_fraction must lie in (0, 1]")


def project_to_rotation(M) -> np.ndarray:
    """Nearest proper rotation to ``M`` in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=np.float64))
    d = np.sign(np.linalg.det(U @ Vt))
    if d == 0:
        d = 1.0
    return U @ np.diag([1.0, 1.0, d]) @ Vt


def geodesic_angle(R1, R2=None) -> float:
    """Angle in radians of the relative rotation ``R1^T R2`` (or of ``R1`` alone)."""
    R = np.asarray(R1, dtype=np.float64)
    if R2 is not None:
        R = R.T @ np.asarray(R2, dtype=np.float64)
    # atan2 form stays accurate for tiny angles, unlike arccos of the trace.
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    c = 0.5 * (np.trace(R) - 1.0)
    return float(np.arctan2(s, c))


def axis_angle_to_matrix(rotvec) -> np.ndarray:
    w = np.asarray(rotvec, dtype=np.float64)
    theta = np.linalg.norm(w)
    if theta < 1e-15:
        return np.eye(3)
    k = w / theta
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def estimate_rigid_transform(src, dst, weights=None):
    """Weighted least-squares rigid fit ``dst ≈ R @ src + t`` (Kabsch).

    Returns ``(RigidTransform, rmse)`` where ``rmse`` is the weighted RMS of
    the residuals. Reflections are removed by flipping the singular vector of
    the smallest singular value, so the result is always a proper rotation.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError(f"src and dst must both be N×3, got {src.shape} and {dst.shape}")
    n = src.shape[0]
    if n < 3:
        raise DegenerateInput(f"need at least 3 corresponded points, got {n}")
    if weights is None:
        w = np.full(n, 1.0 / n)
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        if w.shape[0] != n or np.any(w < 0) or not w.sum() > 0:
            raise ValueError("weights must be non-negative with positive sum")
        w = w / w.sum()

    src_mean = w @ src
    dst_mean = w @ dst
    src_c = src - src_mean
    dst_c = dst - dst_mean
    H = (src_c * w[:, None]).T @ dst_c
    U, S, Vt = np.linalg.svd(H)
    scale = max(S[0], np.sqrt(np.sum(w * np.sum(src_c**2, axis=1)) * np.sum(w * np.sum(dst_c**2, axis=1))))
    if scale == 0.0 or S[1] <= _RANK_TOL * scale:
        raise DegenerateInput("points are collinear or coincident (covariance rank < 2)")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    if d == 0:
        d = 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = dst_mean - R @ src_mean
    resid = src @ R.T + t - dst
    rmse = float(np.sqrt(np.sum(w * np.sum(resid**2, axis=1))))
    return RigidTransform(R, t), rmse


def _color_weights(src_colors, dst_colors, color_weight):
    if color_weight == 0.0 or src_colors is None or dst_colors is None:
        return None
    dc = np.linalg.norm(src_colors - dst_colors, axis=1) / np.sqrt(3.0)
    return (1.0 - color_weight) + color_weight * (1.0 - np.clip(dc, 0.0, 1.0))


def icp(src, dst, cfg: RegistrationConfig, src_colors=None, dst_colors=None, init=None, t=None):
    """Point-to-point ICP aligning ``src`` onto ``dst``.

    Each iteration matches every transformed source point to its nearest
    target point, rejects matches beyond ``cfg.max_correspondence_dist`` and
    refits the full transform from the original source points. Stops when the
    RMSE changes by less than ``convergence_tol`` or the match set stops changing.

    Returns ``(transform, rmse, overlap_fraction)``.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    tree = cKDTree(dst)
    T = init if init is not None else RigidTransform.identity()
    prev_rmse = np.inf
    prev_pairs = None
    rmse = np.inf
    overlap = 0.0
    for _ in range(cfg.max_iterations):
        dist, idx = tree.query(T.apply(src), k=1, distance_upper_bound=cfg.max_correspondence_dist)
        valid = np.isfinite(dist)
        overlap = float(valid.mean()) if len(src) else 0.0
        if valid.sum() < 3:
            raise RegistrationFailed(t, overlap)
        pairs = np.flatnonzero(valid), idx[valid]
        if prev_pairs is not None and np.array_equal(pairs[0], prev_pairs[0]) and np.array_equal(pairs[1], prev_pairs[1]):
            break
        w = _color_weights(
            None if src_colors is None else src_colors[pairs[0]],
            None if dst_colors is None else dst_colors[pairs[1]],
            cfg.color_weight,
        )
        try:
            T, rmse = estimate_rigid_transform(src[pairs[0]], dst[pairs[1]], w)
        except DegenerateInput:
            raise RegistrationFailed(t, overlap) from None
        prev_pairs = pairs
        if abs(prev_rmse - rmse) < cfg.convergence_tol:
            break
        prev_rmse = rmse
    dist, _ = tree.query(T.apply(src), k=1, distance_upper_bound=cfg.max_correspondence_dist)
    overlap = float(np.isfinite(dist).mean())
    if overlap < cfg.min_overlap_fraction:
        raise RegistrationFailed(t, overlap)
    return T, rmse, overlap


def _reorthonormalize(T: RigidTransform) -> RigidTransform:
    return RigidTransform(project_to_rotation(T.rotation), T.translation)


def register_to_start_frame(frames, cfg: RegistrationConfig = RegistrationConfig()):
    """Transforms mapping each frame's camera coordinates into frame 0's.

    ``result[0]`` is the identity; ``result[t] = result[t-1] ∘ icp(t → t-1)``.
    Raises :class:`RegistrationFailed` carrying the offending frame position.
    """
    frames = list(frames)
    if not frames:
        return []
    for i, fr in enumerate(frames):
        if fr.scene_points is None or len(fr.scene_points) < cfg.min_scene_points:
            logger.warning("frame %d: fewer than %d scene points", i, cfg.min_scene_points)
            raise RegistrationFailed(i, 0.0)
    out = [RigidTransform.identity()]
    for i in range(1, len(frames)):
        prev, cur = frames[i - 1], frames[i]
        pair, rmse, overlap = icp(cur.scene_points, prev.scene_points, cfg,
                                  cur.scene_colors, prev.scene_colors, t=i)
        logger.debug("frame %d: rmse=%.3g overlap=%.3f", i, rmse, overlap)
        T = out[-1].compose(pair)
        if i % REORTHO_EVERY == 0:
            T = _reorthonormalize(T)
        out.append(T)
    return out


def extract_pose_sequence(frames, cam_to_start, frame_rate_hz: float = 20.0) -> Trajectory:
    """6DoF object trajectory in start-frame coordinates.

    Position is the centroid of the registered object points; rotation starts
    at identity and is left-multiplied by the Kabsch rotation between each
    pair of consecutive registered object clouds. :class:`DegenerateInput` is
    raised with ``step`` set when any per-step fit is impossible.
    """
    frames = list(frames)
    cam_to_start = list(cam_to_start)
    if len(frames) != len(cam_to_start):
        raise ValueError("need one camera transform per frame")
    if not frames:
        raise DegenerateInput("no frames", step=0)
    mapped = [T.apply(fr.object_points) for fr, T in zip(frames, cam_to_start)]
    n = mapped[0].shape[0]
    for i, m in enumerate(mapped):
        if m.shape[0] != n:
            raise DegenerateInput(f"object point count changes at frame {i}", step=i)
    R = np.eye(3)
    rotations = [R]
    for i in range(len(mapped) - 1):
        try:
            step, _ = estimate_rigid_transform(mapped[i], mapped[i + 1])
        except DegenerateInput as exc:
            raise DegenerateInput(str(exc), step=i) from exc
        R = step.rotation @ R
        if (i + 1) % REORTHO_EVERY == 0:
            R = project_to_rotation(R)
        rotations.append(R)
    poses = [
        Pose6DoF(m.mean(axis=0), Rt, fr.frame_index)
        for m, Rt, fr in zip(mapped, rotations, frames)
    ]
    return Trajectory(poses, frame_rate_hz)


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_from_euler(roll, pitch, yaw) -> np.ndarray:
    """Extrinsic x-y-z Euler angles (radians) to ``Rz(yaw) @ Ry(pitch) @ Rx(roll)``."""
    return _rz(yaw) @ _ry(pitch) @ _rx(roll)


def euler_from_rotation(R, gimbal_eps: float = 1e-12):
    """Inverse of :func:`rotation_from_euler`.

    At gimbal lock (|pitch| = pi/2) roll is set to 0 and the remaining
    freedom is folded into yaw.
    """
    R = np.asarray(R, dtype=np.float64)
    ortho, det = rotation_defects(R)
    if ortho > 1e-4 or abs(det - 1.0) > 1e-4:
        raise NotARotation(f"not a proper rotation (||R^T R - I||={ortho:.2e}, det={det:.6f})")
    cp = np.hypot(R[0, 0], R[1, 0])
    pitch = np.arctan2(-R[2, 0], cp)
    if cp < gimbal_eps:
        return 0.0, float(pitch), float(np.arctan2(-R[0, 1], R[1, 1]))
    roll = np.arctan2(R[2, 1], R[2, 2])
    yaw = np.arctan2(R[1, 0], R[0, 0])
    return float(roll), float(pitch), float(yaw)

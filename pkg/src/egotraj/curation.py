"""Rule-based trajectory filters and translational smoothing."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import LengthMismatch
from .model import (
    INSUFFICIENT_MOTION,
    KEPT,
    REJECTED_BGTS,
    REJECTED_DEGENERATE,
    REJECTED_TRAVEL,
    CurationReport,
    Episode,
    Trajectory,
)

BGTS_MEAN = "mean-displacement"
BGTS_PER_TRACK = "per-track"


@dataclass(frozen=True)
class CurationConfig:
    delta_td_m: float = 5.0
    delta_bgts: float = 0.7
    epsilon_motion: float = 1e-8
    smoothing_window: int = 5
    low_motion_skip_fraction: float = 0.5
    bgts_aggregation: str = BGTS_MEAN

    def __post_init__(self):
        if not -1.0 <= self.delta_bgts <= 1.0:
            raise ValueError(f"delta_bgts must lie in [-1, 1], got {self.delta_bgts}")
        if not self.delta_td_m >= 0:
            raise ValueError(f"delta_td_m must be non-negative, got {self.delta_td_m}")
        if self.smoothing_window < 1 or self.smoothing_window % 2 == 0:
            raise ValueError("smoothing_window must be a positive odd integer")
        if self.bgts_aggregation not in (BGTS_MEAN, BGTS_PER_TRACK):
            raise ValueError(f"unknown bgts_aggregation {self.bgts_aggregation!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def travel_distance(traj: Trajectory) -> float:
    """Sum of Euclidean gaps between consecutive positions, in meters."""
    p = traj.positions
    if len(p) < 2:
        return 0.0
    return float(np.sum(np.linalg.norm(np.diff(p, axis=0), axis=1)))


def _mean_cosine(u, b, eps, skip_fraction):
    nu = np.linalg.norm(u, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (nu >= eps) & (nb >= eps)
    n_terms = len(u)
    if n_terms == 0 or (n_terms - ok.sum()) > skip_fraction * n_terms or not ok.any():
        return None
    cos = np.sum(u[ok] * b[ok], axis=1) / (nu[ok] * nb[ok])
    return float(np.clip(cos.mean(), -1.0, 1.0))


def bgts(object_track, background_tracks, eps: float = 1e-8,
         low_motion_skip_fraction: float = 0.5, aggregation: str = BGTS_MEAN):
    """Background track similarity of an object track.

    ``object_track`` is a T×2 sequence of image positions, ``background_tracks``
    an L×T×2 stack (or list of T×2 sequences). Returns the mean cosine
    similarity between object and background displacements, or ``None`` when
    more than ``low_motion_skip_fraction`` of the steps have a displacement
    shorter than ``eps`` (insufficient motion).

    With ``aggregation="mean-displacement"`` the background displacement at each
    step is the mean over tracks; ``"per-track"`` averages per-track scores.
    """
    o = np.asarray(object_track, dtype=np.float64)
    if o.ndim != 2 or o.shape[1] != 2:
        raise ValueError(f"object_track must be T×2, got {o.shape}")
    tracks = [np.asarray(q, dtype=np.float64) for q in background_tracks]
    if not tracks:
        return None
    for q in tracks:
        if q.shape != o.shape:
            raise LengthMismatch(f"background track shape {q.shape} != object track shape {o.shape}")
    if len(o) < 2:
        return None
    u = np.diff(o, axis=0)
    if aggregation == BGTS_MEAN:
        b = np.mean([np.diff(q, axis=0) for q in tracks], axis=0)
        return _mean_cosine(u, b, eps, low_motion_skip_fraction)
    if aggregation == BGTS_PER_TRACK:
        scores = [_mean_cosine(u, np.diff(q, axis=0), eps, low_motion_skip_fraction) for q in tracks]
        scores = [s for s in scores if s is not None]
        return float(np.clip(np.mean(scores), -1.0, 1.0)) if scores else None
    raise ValueError(f"unknown aggregation {aggregation!r}")


def episode_tracks(ep: Episode):
    """Object track (T×2, centroid of tracked object points) and L×T×2 background tracks."""
    if not ep.frames or any(fr.object_track_2d is None or fr.background_tracks_2d is None
                            for fr in ep.frames):
        return None, None
    obj = []
    for fr in ep.frames:
        if len(fr.object_track_2d) == 0:
            return None, None
        obj.append(fr.object_track_2d.mean(axis=0))
    n_bg = {len(fr.background_tracks_2d) for fr in ep.frames}
    if len(n_bg) != 1:
        raise LengthMismatch(f"background track count varies across frames: {sorted(n_bg)}")
    bg = np.stack([fr.background_tracks_2d for fr in ep.frames], axis=1)
    return np.array(obj), bg


def smooth_translations(traj: Trajectory, window: int = 5) -> Trajectory:
    """Centered moving average of positions, truncating the window at the ends.

    Position ``t`` becomes the unweighted mean over ``[t - h, t + h] ∩ [0, T-1]``
    with ``h = window // 2``. Rotations and timestamps are kept.
    """
    p = traj.positions
    T = len(p)
    if T == 0:
        return traj
    h = window // 2
    csum = np.vstack([np.zeros((1, 3)), np.cumsum(p, axis=0)])
    lo = np.maximum(np.arange(T) - h, 0)
    hi = np.minimum(np.arange(T) + h, T - 1) + 1
    smoothed = (csum[hi] - csum[lo]) / (hi - lo)[:, None]
    poses = [pose.replace(position=s) for pose, s in zip(traj.poses, smoothed)]
    return Trajectory(poses, traj.frame_rate_hz)


def _verdict(D, bgts_value, bgts_flag, cfg):
    if D > cfg.delta_td_m:
        return REJECTED_TRAVEL, f"travel distance {D:.4f} m > {cfg.delta_td_m} m"
    if bgts_flag == INSUFFICIENT_MOTION:
        return REJECTED_DEGENERATE, INSUFFICIENT_MOTION
    if bgts_value is None:
        return REJECTED_DEGENERATE, "no object/background tracks"
    if bgts_value > cfg.delta_bgts:
        return REJECTED_BGTS, f"BGTS {bgts_value:.4f} > {cfg.delta_bgts}"
    return KEPT, "passed travel and BGTS filters"


def curate(ep: Episode, cfg: CurationConfig = CurationConfig()) -> Episode:
    """Attach a :class:`CurationReport`; smooth the trajectory of kept episodes.

    Filters run on the raw trajectory: degenerate check, then travel
    distance, then BGTS. An episode already smoothed by a previous run is
    re-judged from its recorded raw measurements and never smoothed twice.
    """
    thresholds = (float(cfg.delta_td_m), float(cfg.delta_bgts))
    prior = ep.curation
    if prior is not None and prior.smoothed:
        verdict, reason = _verdict(prior.travel_distance_m, prior.bgts, prior.bgts_flag, cfg)
        report = CurationReport(prior.travel_distance_m, prior.bgts, verdict, thresholds,
                                reason, True, prior.bgts_flag)
        return ep.replace(curation=report)

    traj = ep.trajectory
    if traj is None or len(traj) < 2:
        why = ep.meta.get("extract_error") or f"trajectory length {0 if traj is None else len(traj)} < 2"
        report = CurationReport(0.0, None, REJECTED_DEGENERATE, thresholds, why)
        return ep.replace(curation=report)

    D = travel_distance(traj)
    obj, bg = episode_tracks(ep)
    score, flag = None, None
    if obj is not None:
        score = bgts(obj, bg, cfg.epsilon_motion, cfg.low_motion_skip_fraction, cfg.bgts_aggregation)
        if score is None:
            flag = INSUFFICIENT_MOTION
    verdict, reason = _verdict(D, score, flag, cfg)
    if verdict == KEPT:
        report = CurationReport(D, score, verdict, thresholds, reason, True, flag)
        return ep.replace(trajectory=smooth_translations(traj, cfg.smoothing_window), curation=report)
    return ep.replace(curation=CurationReport(D, score, verdict, thresholds, reason, False, flag))

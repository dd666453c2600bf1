"""Per-episode composition of registration and pose extraction."""

from __future__ import annotations

import logging

from .errors import DegenerateInput, RegistrationFailed
from .geometry import RegistrationConfig, extract_pose_sequence, register_to_start_frame
from .model import Episode

logger = logging.getLogger(__name__)


def extract_episode(ep: Episode, cfg: RegistrationConfig = RegistrationConfig()) -> Episode:
    """Register the frames of ``ep`` and attach the object trajectory.

    Registration and degenerate-fit failures do not propagate: the episode is
    returned without a trajectory and ``meta["extract_error"]`` says why, so
    curation later marks it ``rejected-degenerate``.
    """
    frame_rate = float(ep.meta.get("frame_rate_hz", 20.0))
    try:
        cams = register_to_start_frame(ep.frames, cfg)
        traj = extract_pose_sequence(ep.frames, cams, frame_rate)
    except (RegistrationFailed, DegenerateInput) as exc:
        logger.info("episode %s: %s", ep.id, exc)
        meta = dict(ep.meta, extract_error=f"{type(exc).__name__}: {exc}")
        return ep.replace(trajectory=None, meta=meta)
    meta = {k: v for k, v in ep.meta.items() if k != "extract_error"}
    return ep.replace(trajectory=traj, meta=meta)

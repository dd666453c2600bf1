"""Action encoding, normalization statistics, dataset merging and chunking.

An action is the 9-dim displacement ``[dx, dy, dz, d_rot6d(6)]`` between two
consecutive poses, where rot6d is the first two rotation-matrix columns
stacked column by column. The proprioceptive state at ``t`` is the absolute
pose ``[x, y, z, rot6d(R_t)]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateRot6D, DimMismatch, EmptyDataset
from .model import ActionRecord, NormStats, Trajectory, frozen_array

ACTION_DIM = 9
DEFAULT_HORIZON = 16
CLIP = 4.0

ELEMENTWISE = "elementwise"
RELATIVE = "relative"
DELTA_ROTATION_MODES = (ELEMENTWISE, RELATIVE)


def rot6d_from_rotation(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[:, 0], R[:, 1]])


def rotation_from_rot6d(v, eps: float = 1e-9) -> np.ndarray:
    """Gram-Schmidt recovery of a proper rotation from a 6-vector."""
    v = np.asarray(v, dtype=np.float64).reshape(6)
    a, b = v[:3], v[3:]
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < eps or nb < eps:
        raise DegenerateRot6D("zero column in rot6d vector")
    c1 = a / na
    if np.linalg.norm(np.cross(c1, b / nb)) <= eps:
        raise DegenerateRot6D("rot6d columns are parallel")
    b_perp = b - (c1 @ b) * c1
    c2 = b_perp / np.linalg.norm(b_perp)
    c3 = np.cross(c1, c2)
    return np.stack([c1, c2, c3], axis=1)


def pose_state(position, R) -> np.ndarray:
    return np.concatenate([np.asarray(position, dtype=np.float64), rot6d_from_rotation(R)])


def to_actions(traj: Trajectory, delta_rotation_mode: str = ELEMENTWISE) -> list:
    """Displacement actions for steps ``t = 0 .. T-2`` (T-1 records).

    ``"elementwise"`` subtracts rot6d vectors; ``"relative"`` encodes the
    relative rotation ``R_t^T R_{t+1}`` as rot6d.
    """
    if delta_rotation_mode not in DELTA_ROTATION_MODES:
        raise ValueError(f"unknown delta_rotation_mode {delta_rotation_mode!r}")
    p = traj.positions
    R = traj.rotations
    six = np.array([rot6d_from_rotation(r) for r in R]).reshape(-1, 6)
    out = []
    mask = np.ones(ACTION_DIM, dtype=bool)
    for t in range(len(p) - 1):
        if delta_rotation_mode == ELEMENTWISE:
            drot = six[t + 1] - six[t]
        else:
            drot = rot6d_from_rotation(R[t].T @ R[t + 1])
        raw = np.concatenate([p[t + 1] - p[t], drot])
        state = np.concatenate([p[t], six[t]])
        out.append(ActionRecord(raw, raw, mask, traj.poses[t].timestamp_index, state))
    return out


def _as_matrix(records) -> np.ndarray:
    if isinstance(records, np.ndarray):
        arr = records.astype(np.float64, copy=False)
    else:
        records = list(records)
        if not records:
            raise EmptyDataset("no records")
        if isinstance(records[0], ActionRecord):
            arr = np.array([r.raw_values for r in records], dtype=np.float64)
        else:
            arr = np.array(records, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    return arr


def compute_norm_stats(records, dataset_tag: str = "") -> NormStats:
    """Per-dimension 1%/99% quantiles (linear interpolation), mean and std.

    ``records`` is an n×d array, a sequence of vectors or ActionRecords, or a
    list of such shards; shards are concatenated before sorting so the
    result does not depend on how the data was split or ordered.
    """
    if isinstance(records, (list, tuple)) and records and isinstance(records[0], np.ndarray) \
            and records[0].ndim == 2:
        arr = np.concatenate([_as_matrix(s) for s in records], axis=0)
    else:
        arr = _as_matrix(records)
    if arr.shape[0] == 0:
        raise EmptyDataset("no records")
    if arr.shape[0] < 2:
        raise EmptyDataset("need at least 2 records per dimension")
    s = np.sort(arr, axis=0)
    q01, q99 = np.quantile(s, [0.01, 0.99], axis=0, method="linear")
    mean = s.mean(axis=0)
    std = np.sqrt(np.mean((s - mean) ** 2, axis=0))
    return NormStats(q01, q99, mean, std, dataset_tag)


def normalize(v, stats: NormStats) -> np.ndarray:
    """Map ``[q01, q99]`` onto ``[-1, 1]`` per dimension, clipped to ±4.

    Dimensions with ``q99 == q01`` map to 0.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != stats.dim:
        raise DimMismatch(f"vector has {v.shape[-1]} dims, stats have {stats.dim}")
    span = stats.q99 - stats.q01
    degenerate = span == 0
    safe = np.where(degenerate, 1.0, span)
    out = np.clip(2.0 * (v - stats.q01) / safe - 1.0, -CLIP, CLIP)
    return np.where(degenerate, 0.0, out)


def denormalize(v_hat, stats: NormStats) -> np.ndarray:
    v_hat = np.asarray(v_hat, dtype=np.float64)
    if v_hat.shape[-1] != stats.dim:
        raise DimMismatch(f"vector has {v_hat.shape[-1]} dims, stats have {stats.dim}")
    span = stats.q99 - stats.q01
    return np.where(span == 0, stats.q01, (v_hat + 1.0) * 0.5 * span + stats.q01)


@dataclass(frozen=True, eq=False)
class MergedDataset:
    values: np.ndarray
    pad_mask: np.ndarray
    sources: tuple
    dim: int

    def __len__(self):
        return self.values.shape[0]

    def counts(self) -> dict:
        out = {}
        for s in self.sources:
            out[s] = out.get(s, 0) + 1
        return out


def merge_datasets(datasets) -> MergedDataset:
    """Normalize each dataset with its own stats, then zero-pad to a common width.

    ``datasets`` is a sequence of ``(records, native_dim, stats)``; records
    are n×native_dim arrays or sequences of vectors/ActionRecords. The source
    tag of each record is its dataset's ``stats.dataset_tag``.
    """
    datasets = list(datasets)
    if not datasets:
        raise EmptyDataset("no datasets to merge")
    dim = max(int(nd) for _, nd, _ in datasets)
    values, masks, sources = [], [], []
    for records, native_dim, stats in datasets:
        arr = _as_matrix(records) if len(records) else np.zeros((0, native_dim))
        if arr.shape[1] != native_dim:
            raise DimMismatch(f"records have {arr.shape[1]} dims, declared {native_dim}")
        padded = np.zeros((arr.shape[0], dim))
        padded[:, :native_dim] = normalize(arr, stats)
        mask = np.zeros((arr.shape[0], dim), dtype=bool)
        mask[:, :native_dim] = True
        values.append(padded)
        masks.append(mask)
        sources.extend([stats.dataset_tag] * arr.shape[0])
    return MergedDataset(
        frozen_array(np.concatenate(values, axis=0)),
        frozen_array(np.concatenate(masks, axis=0), dtype=bool),
        tuple(sources),
        dim,
    )


@dataclass(frozen=True, eq=False)
class ActionChunk:
    actions: np.ndarray
    state: Optional[np.ndarray]
    horizon: int
    valid: np.ndarray
    pad_mask: np.ndarray
    t: int = 0

    def __post_init__(self):
        object.__setattr__(self, "actions", frozen_array(self.actions, name="actions"))
        object.__setattr__(self, "valid", frozen_array(self.valid, dtype=bool).reshape(-1))
        object.__setattr__(self, "pad_mask", frozen_array(self.pad_mask, dtype=bool).reshape(-1))
        if self.state is not None:
            object.__setattr__(self, "state", frozen_array(self.state, name="state").reshape(-1))


def chunk_actions(actions: Sequence[ActionRecord], H: int = DEFAULT_HORIZON) -> list:
    """One chunk per start step; tail chunks are zero-padded with ``valid`` False."""
    if H < 1:
        raise ValueError(f"horizon must be >= 1, got {H}")
    actions = list(actions)
    if not actions:
        return []
    d = len(actions[0].values)
    vals = np.array([a.values for a in actions])
    out = []
    for t, rec in enumerate(actions):
        n_valid = min(H, len(actions) - t)
        block = np.zeros((H, d))
        block[:n_valid] = vals[t:t + n_valid]
        valid = np.arange(H) < n_valid
        out.append(ActionChunk(block, rec.state, H, valid, rec.pad_mask, rec.t))
    return out


def action_mse(pred: ActionChunk, gt: ActionChunk) -> float:
    """Mean over steps valid in both chunks of the squared L2 action error."""
    if pred.actions.shape != gt.actions.shape:
        raise DimMismatch(f"chunk shapes differ: {pred.actions.shape} vs {gt.actions.shape}")
    valid = pred.valid & gt.valid
    if not valid.any():
        return 0.0
    err = (pred.actions[valid] - gt.actions[valid]) ** 2
    return float(err.sum(axis=1).mean())

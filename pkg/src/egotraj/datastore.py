"""On-disk formats: EGTR episode files, JSONL manifests and training shards.

EGTR layout (all integers and floats little-endian)::

    magic "EGTR" | format_version u32 | T u32 | N u32 | flags u32
    positions   T×3 f64
    rotations   T×9 f64 (row-major)
    blocks      tag[4] | length u64 | payload      (repeated)
    "META"      length u64 | UTF-8 JSON           (always last)

Per-frame array blocks carry ``frame u32 | rows u32 | cols u32`` followed by
rows×cols f64. The JSON trailer holds the text fields, frame indices, pose
timestamps and the curation report. Serialization is deterministic, so
``serialize(parse(b)) == b`` for every valid file.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import struct
import tempfile
from collections import namedtuple
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from filelock import FileLock

from . import actions as act
from .errors import BadMagic, FormatError, ManifestCorrupt, MissingStats, TruncatedFile, VersionUnsupported
from .model import CurationReport, Episode, NormStats, Pose6DoF, TrackedFrame, Trajectory, validate_episode

logger = logging.getLogger(__name__)

MAGIC = b"EGTR"
SHARD_MAGIC = b"EGSH"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIIII")
BLOCK_HEAD = struct.Struct("<4sQ")
ARRAY_HEAD = struct.Struct("<III")
SHARD_HEADER = struct.Struct("<4sIIIII")

FLAG_TRAJECTORY = 1
FLAG_FRAMES = 2
FLAG_CURATION = 4

# Block tag -> TrackedFrame attribute, in serialization order.
FRAME_BLOCKS = (
    (b"OBJP", "object_points"),
    (b"OBJC", "object_colors"),
    (b"SCNP", "scene_points"),
    (b"SCNC", "scene_colors"),
    (b"OT2D", "object_track_2d"),
    (b"BT2D", "background_tracks_2d"),
)
_TAG_TO_ATTR = dict(FRAME_BLOCKS)
META_TAG = b"META"


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"),
                      allow_nan=False).encode("utf-8")


def _f64(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def atomic_write(path, data: bytes) -> None:
    """Write ``data`` to ``path`` through a temp file in the same directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def content_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# --------------------------------------------------------------------------- episodes

def serialize_episode(ep: Episode) -> bytes:
    traj = ep.trajectory
    T = len(traj) if traj is not None else 0
    N = ep.frames[0].object_points.shape[0] if ep.frames else 0
    flags = ((FLAG_TRAJECTORY if traj is not None else 0)
             | (FLAG_FRAMES if ep.frames else 0)
             | (FLAG_CURATION if ep.curation is not None else 0))
    parts = [HEADER.pack(MAGIC, FORMAT_VERSION, T, N, flags)]
    if traj is not None:
        parts.append(_f64(traj.positions))
        parts.append(_f64(traj.rotations.reshape(T, 9)))
    for i, fr in enumerate(ep.frames):
        for tag, attr in FRAME_BLOCKS:
            arr = getattr(fr, attr)
            if arr is None:
                continue
            rows, cols = arr.shape
            payload = ARRAY_HEAD.pack(i, rows, cols) + _f64(arr)
            parts.append(BLOCK_HEAD.pack(tag, len(payload)))
            parts.append(payload)
    meta = {
        "id": ep.id,
        "instruction": ep.instruction,
        "verb": ep.verb,
        "object": ep.object,
        "source_dataset": ep.source_dataset,
        "meta": ep.meta,
        "frames": [fr.frame_index for fr in ep.frames],
        "trajectory": None if traj is None else {
            "timestamps": traj.timestamps,
            "frame_rate_hz": traj.frame_rate_hz,
        },
        "curation": None if ep.curation is None else ep.curation.to_dict(),
    }
    body = _json_bytes(meta)
    parts.append(BLOCK_HEAD.pack(META_TAG, len(body)))
    parts.append(body)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFile(f"truncated {what}: need {n} bytes, {len(self.buf) - self.pos} left", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def array(self, shape, what: str) -> np.ndarray:
        n = int(np.prod(shape)) * 8
        return np.frombuffer(self.take(n, what), dtype="<f8").reshape(shape).astype(np.float64)


def parse_episode(buf: bytes) -> Episode:
    r = _Reader(buf)
    if len(buf) >= 4 and buf[:4] != MAGIC:
        raise BadMagic(f"bad magic {buf[:4]!r}, expected {MAGIC!r}", 0)
    magic, version, T, N, flags = HEADER.unpack(r.take(HEADER.size, "header"))
    if version != FORMAT_VERSION:
        raise VersionUnsupported(f"format_version {version} not supported", 4)
    positions = rotations = None
    if flags & FLAG_TRAJECTORY:
        positions = r.array((T, 3), "positions block")
        rotations = r.array((T, 3, 3), "rotations block")

    frame_arrays = {}
    meta = None
    while meta is None:
        start = r.pos
        tag, length = BLOCK_HEAD.unpack(r.take(BLOCK_HEAD.size, "block header"))
        payload = r.take(length, f"{tag.decode('ascii', 'replace')} block")
        if tag == META_TAG:
            try:
                meta = json.loads(payload.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise FormatError(f"unreadable metadata trailer: {exc}", start) from exc
        elif tag in _TAG_TO_ATTR:
            frame, rows, cols = ARRAY_HEAD.unpack_from(payload)
            if ARRAY_HEAD.size + rows * cols * 8 != length:
                raise FormatError(f"{tag!r} block length mismatch", start)
            arr = np.frombuffer(payload, dtype="<f8", offset=ARRAY_HEAD.size).reshape(rows, cols)
            frame_arrays.setdefault(frame, {})[_TAG_TO_ATTR[tag]] = arr.astype(np.float64)
        else:
            logger.debug("skipping unknown block %r at offset %d", tag, start)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after metadata", r.pos)

    frames = []
    for i, frame_index in enumerate(meta["frames"]):
        arrays = frame_arrays.get(i, {})
        if "object_points" not in arrays:
            raise FormatError(f"frame {i} has no object_points block", r.pos)
        frames.append(TrackedFrame(frame_index=frame_index, **arrays))

    trajectory = None
    if meta["trajectory"] is not None:
        ts = meta["trajectory"]["timestamps"]
        trajectory = Trajectory([Pose6DoF(p, R, t) for p, R, t in zip(positions, rotations, ts)],
                                meta["trajectory"]["frame_rate_hz"])
    curation = None if meta["curation"] is None else CurationReport.from_dict(meta["curation"])
    return Episode(
        id=meta["id"],
        instruction=meta["instruction"],
        verb=meta["verb"],
        object=meta["object"],
        frames=frames,
        trajectory=trajectory,
        curation=curation,
        source_dataset=meta["source_dataset"],
        meta=meta["meta"],
    )


def episode_filename(episode_id: str) -> str:
    safe = re.sub(r"[^A-Za-z0-9._-]", "_", episode_id)
    if safe != episode_id or not safe:
        safe = f"{safe}-{hashlib.sha1(episode_id.encode('utf-8')).hexdigest()[:8]}"
    return safe + ".egtr"


def write_episode(ep: Episode, root, subdir: str = "episodes") -> str:
    """Validate and atomically write ``ep`` under ``root``; return its relative path."""
    problems = validate_episode(ep)
    if problems:
        raise ValueError(f"episode {ep.id!r} is invalid: {'; '.join(problems)}")
    rel = f"{subdir}/{episode_filename(ep.id)}" if subdir else episode_filename(ep.id)
    data = serialize_episode(ep)
    target = Path(root) / rel
    if target.exists() and target.read_bytes() == data:
        return rel
    atomic_write(target, data)
    return rel


def read_episode(path) -> Episode:
    return parse_episode(Path(path).read_bytes())


# --------------------------------------------------------------------------- manifest

DatasetStats = namedtuple("DatasetStats", "n_episodes n_verbs n_objects n_frames")


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    path: str
    verdict: Optional[str] = None
    verb: str = ""
    object: str = ""
    T: int = 0
    source_dataset: str = ""
    status: str = "ok"
    error: Optional[str] = None
    input_hash: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "record": "episode", "id": self.id, "path": self.path, "verdict": self.verdict,
            "verb": self.verb, "object": self.object, "T": self.T,
            "source_dataset": self.source_dataset, "status": self.status,
            "error": self.error, "input_hash": self.input_hash,
        }


@dataclass(frozen=True)
class Manifest:
    dataset_tag: str = ""
    episodes: tuple = ()
    norm_stats: Optional[dict] = None
    curation_config: Optional[dict] = None
    delta_rotation_mode: str = act.ELEMENTWISE
    format_version: int = FORMAT_VERSION
    extra: dict = field(default_factory=dict)

    def replace(self, **changes) -> "Manifest":
        return replace(self, **changes)

    def by_id(self) -> dict:
        return {e.id: e for e in self.episodes}


def entry_for(ep: Episode, path: str, **kw) -> ManifestEntry:
    T = len(ep.trajectory) if ep.trajectory is not None else len(ep.frames)
    return ManifestEntry(
        id=ep.id, path=path, verdict=None if ep.curation is None else ep.curation.verdict,
        verb=ep.verb, object=ep.object, T=T, source_dataset=ep.source_dataset, **kw)


def canonical_label(s: str) -> str:
    return s.strip().casefold()


def dataset_stats(manifest: Manifest, kept_only: bool = False) -> DatasetStats:
    """Episode, distinct verb, distinct object and total frame counts."""
    entries = [e for e in manifest.episodes if not kept_only or e.verdict == "kept"]
    verbs = {canonical_label(e.verb) for e in entries} - {""}
    objects = {canonical_label(e.object) for e in entries} - {""}
    return DatasetStats(len(entries), len(verbs), len(objects), sum(int(e.T) for e in entries))


def manifest_lines(manifest: Manifest) -> bytes:
    stats = dataset_stats(manifest)
    head = {
        "record": "manifest",
        "format_version": manifest.format_version,
        "dataset_tag": manifest.dataset_tag,
        "delta_rotation_mode": manifest.delta_rotation_mode,
        "curation_config": manifest.curation_config,
        "norm_stats": None if manifest.norm_stats is None else {
            k: v.to_dict() for k, v in sorted(manifest.norm_stats.items())},
        "stats": stats._asdict(),
        "extra": manifest.extra,
    }
    lines = [_json_bytes(head)] + [_json_bytes(e.to_dict()) for e in manifest.episodes]
    return b"\n".join(lines) + b"\n"


def write_manifest(manifest: Manifest, path) -> None:
    """Atomically write ``manifest``; a lock file serializes concurrent writers."""
    ids = [e.id for e in manifest.episodes]
    if len(ids) != len(set(ids)):
        raise ValueError("manifest episode ids are not unique")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with FileLock(str(path) + ".lock"):
        atomic_write(path, manifest_lines(manifest))


def read_manifest(path, check_paths: bool = True) -> Manifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ManifestCorrupt(f"cannot read manifest {path}: {exc}") from exc
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ManifestCorrupt(f"{path}: empty manifest (no header line)")
    try:
        records = [json.loads(ln) for ln in lines]
    except json.JSONDecodeError as exc:
        raise ManifestCorrupt(f"{path}: invalid JSON line: {exc}") from exc
    head, rows = records[0], records[1:]
    if head.get("record") != "manifest":
        raise ManifestCorrupt(f"{path}: first line is not a manifest header")
    if head.get("format_version") != FORMAT_VERSION:
        raise ManifestCorrupt(f"{path}: unsupported format_version {head.get('format_version')}")
    try:
        entries = tuple(ManifestEntry(**{k: v for k, v in r.items() if k != "record"}) for r in rows)
    except TypeError as exc:
        raise ManifestCorrupt(f"{path}: bad episode record: {exc}") from exc
    ids = [e.id for e in entries]
    if len(ids) != len(set(ids)):
        raise ManifestCorrupt(f"{path}: duplicate episode ids")
    if check_paths:
        for e in entries:
            if not (path.parent / e.path).exists():
                raise ManifestCorrupt(f"{path}: episode {e.id!r} path {e.path!r} does not exist")
    norm = head.get("norm_stats")
    manifest = Manifest(
        dataset_tag=head.get("dataset_tag", ""),
        episodes=entries,
        norm_stats=None if norm is None else {k: NormStats.from_dict(v) for k, v in norm.items()},
        curation_config=head.get("curation_config"),
        delta_rotation_mode=head.get("delta_rotation_mode", act.ELEMENTWISE),
        format_version=head["format_version"],
        extra=head.get("extra") or {},
    )
    if head.get("stats") != dataset_stats(manifest)._asdict():
        raise ManifestCorrupt(f"{path}: stats block does not match the episode records")
    return manifest


# --------------------------------------------------------------------------- norm stats / export

def _episode_vectors(ep: Episode, mode: str):
    recs = act.to_actions(ep.trajectory, mode)
    return np.array([r.raw_values for r in recs]), np.array([r.state for r in recs])


def compute_manifest_norm_stats(manifest: Manifest, root) -> Optional[dict]:
    """Action and state statistics over all kept episodes, or None if too few steps."""
    acts, states = [], []
    for e in manifest.episodes:
        if e.verdict != "kept":
            continue
        ep = read_episode(Path(root) / e.path)
        if ep.trajectory is None or len(ep.trajectory) < 2:
            continue
        a, s = _episode_vectors(ep, manifest.delta_rotation_mode)
        acts.append(a)
        states.append(s)
    if sum(len(a) for a in acts) < 2:
        return None
    tag = manifest.dataset_tag
    return {
        "action": act.compute_norm_stats(acts, tag),
        "state": act.compute_norm_stats(states, tag),
    }


def _serialize_shard(chunks, refs, H, action_dim, state_dim) -> bytes:
    n = len(chunks)
    parts = [SHARD_HEADER.pack(SHARD_MAGIC, FORMAT_VERSION, n, H, action_dim, state_dim)]
    parts.append(_f64(np.array([c.actions for c in chunks]).reshape(n, H, action_dim)))
    parts.append(np.array([c.valid for c in chunks], dtype=np.uint8).reshape(n, H).tobytes())
    parts.append(np.array([c.pad_mask for c in chunks], dtype=np.uint8).reshape(n, action_dim).tobytes())
    parts.append(_f64(np.array([c.state for c in chunks]).reshape(n, state_dim)))
    body = _json_bytes({"episodes": refs, "t": [c.t for c in chunks]})
    parts.append(struct.pack("<Q", len(body)))
    parts.append(body)
    return b"".join(parts)


def read_shard(path) -> dict:
    """Load a training shard into arrays (``actions``, ``valid``, ``pad_mask``, ``state``)."""
    r = _Reader(Path(path).read_bytes())
    magic, version, n, H, d, ds = SHARD_HEADER.unpack(r.take(SHARD_HEADER.size, "shard header"))
    if magic != SHARD_MAGIC:
        raise BadMagic(f"bad shard magic {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise VersionUnsupported(f"shard format_version {version} not supported", 4)
    out = {"actions": r.array((n, H, d), "actions")}
    out["valid"] = np.frombuffer(r.take(n * H, "valid mask"), dtype=np.uint8).reshape(n, H).astype(bool)
    out["pad_mask"] = np.frombuffer(r.take(n * d, "pad mask"), dtype=np.uint8).reshape(n, d).astype(bool)
    out["state"] = r.array((n, ds), "state")
    (length,) = struct.unpack("<Q", r.take(8, "trailer length"))
    out.update(json.loads(r.take(length, "trailer").decode("utf-8")))
    return out


def export_training_shards(manifest: Manifest, root, out_dir, H: int = act.DEFAULT_HORIZON,
                           shard_size: int = 1024, seed: int = 0) -> dict:
    """Write normalized action chunks of kept episodes into fixed-size shards.

    Episodes are ordered by id, permuted with ``seed`` and their chunks
    packed ``shard_size`` at a time. The index (returned and written as
    ``index.json``) maps each shard to its episode chunk ranges.
    """
    if manifest.norm_stats is None or not {"action", "state"} <= set(manifest.norm_stats):
        raise MissingStats("manifest has no action/state norm_stats; run curation first")
    if shard_size < 1:
        raise ValueError("shard_size must be >= 1")
    a_stats, s_stats = manifest.norm_stats["action"], manifest.norm_stats["state"]
    kept = sorted((e for e in manifest.episodes if e.verdict == "kept"), key=lambda e: e.id)
    order = np.random.default_rng(seed).permutation(len(kept)) if kept else []
    out_dir = Path(out_dir)

    shards, pending, refs = [], [], []

    def flush():
        name = f"shard-{len(shards):05d}.egsh"
        atomic_write(out_dir / name, _serialize_shard(pending, refs, H, a_stats.dim, s_stats.dim))
        shards.append({"file": name, "n_chunks": len(pending), "episodes": list(refs)})
        pending.clear()
        refs.clear()

    for i in order:
        e = kept[int(i)]
        ep = read_episode(Path(root) / e.path)
        if ep.trajectory is None or len(ep.trajectory) < 2:
            continue
        records = [
            act.ActionRecord(act.normalize(r.raw_values, a_stats), r.raw_values, r.pad_mask, r.t,
                             act.normalize(r.state, s_stats))
            for r in act.to_actions(ep.trajectory, manifest.delta_rotation_mode)
        ]
        chunks = act.chunk_actions(records, H)
        start = 0
        while start < len(chunks):
            take = min(shard_size - len(pending), len(chunks) - start)
            pending.extend(chunks[start:start + take])
            refs.append({"id": e.id, "start": start, "stop": start + take})
            start += take
            if len(pending) == shard_size:
                flush()
    if pending:
        flush()

    index = {
        "format_version": FORMAT_VERSION,
        "seed": int(seed),
        "horizon": int(H),
        "shard_size": int(shard_size),
        "action_dim": a_stats.dim,
        "state_dim": s_stats.dim,
        "delta_rotation_mode": manifest.delta_rotation_mode,
        "dataset_tag": manifest.dataset_tag,
        "total_chunks": sum(s["n_chunks"] for s in shards),
        "shards": shards,
    }
    atomic_write(out_dir / "index.json", _json_bytes(index) + b"\n")
    return index

"""Command-line front end: ``egotraj {synth,extract,curate,stats,export,eval}``.

Exit codes: 0 success, 1 no episode succeeded, 2 invalid invocation.
Every command writes its resolved configuration next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import actions as act
from . import datastore as ds
from .curation import CurationConfig, curate
from .errors import EgoTrajError, MissingStats
from .geometry import RegistrationConfig
from .model import KEPT, REJECTED_BGTS, REJECTED_DEGENERATE, REJECTED_TRAVEL, Episode
from .pipeline import extract_episode
from .synth import SceneSpec, evaluate_recovery, generate_episode

logger = logging.getLogger("egotraj")


class UsageError(Exception):
    pass


def _setup_logging():
    level = os.environ.get("EGOTRAJ_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _write_run_config(path: Path, command: str, config: dict) -> None:
    payload = {"command": command, "version": __version__, **config}
    ds.atomic_write(path, (json.dumps(payload, sort_keys=True, indent=2) + "\n").encode("utf-8"))


def _pmap(fn, items, jobs):
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------- synth

def cmd_synth(args) -> int:
    try:
        base = SceneSpec.from_json(Path(args.spec).read_text(encoding="utf-8"))
    except (OSError, ValueError, TypeError) as exc:
        raise UsageError(f"cannot load spec {args.spec}: {exc}") from exc
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    out = Path(args.out)
    gt_entries = []
    for i in range(args.count):
        seed = int(np.random.SeedSequence([args.seed, i]).generate_state(1)[0])
        spec = base.with_seed(seed, episode_id=f"{args.prefix}-{i:05d}")
        ep, gt = generate_episode(spec)
        ds.write_episode(ep, out, "bundles")
        gt_ep = ep.replace(trajectory=gt.poses)
        rel = ds.write_episode(gt_ep, out / "gt")
        gt_entries.append(ds.entry_for(gt_ep, rel))
    ds.write_manifest(ds.Manifest(dataset_tag="synthetic-gt", episodes=tuple(gt_entries)),
                      out / "gt" / "manifest.jsonl")
    _write_run_config(out / "run_config.json", "synth",
                      {"spec": json.loads(base.to_json()), "count": args.count, "seed": args.seed})
    print(f"wrote {args.count} bundles to {out / 'bundles'}")
    return 0


# --------------------------------------------------------------------------- extract

def _extract_one(task):
    path, cfg_dict, out_root, input_hash = task
    cfg = RegistrationConfig(**cfg_dict)
    try:
        ep = ds.read_episode(path)
    except (EgoTrajError, OSError) as exc:
        return None, f"{type(exc).__name__}: {exc}", Path(path).stem
    ep = extract_episode(ep, cfg)
    rel = ds.write_episode(ep, out_root)
    status = "failed" if ep.trajectory is None else "ok"
    entry = ds.entry_for(ep, rel, status=status, error=ep.meta.get("extract_error"), input_hash=input_hash)
    return entry, None, ep.id


def cmd_extract(args) -> int:
    src = Path(args.input)
    if not src.is_dir():
        raise UsageError(f"input root {src} is not a readable directory")
    bundles = sorted(src.glob("*.egtr"))
    if not bundles:
        raise UsageError(f"no *.egtr bundles found in {src}")
    cfg = RegistrationConfig(max_iterations=args.max_iterations,
                             max_correspondence_dist=args.max_correspondence_dist,
                             color_weight=args.color_weight)
    cfg_dict = asdict(cfg)
    manifest_path = Path(args.out)
    root = manifest_path.parent
    cfg_blob = json.dumps(cfg_dict, sort_keys=True).encode("utf-8")

    previous = {}
    if manifest_path.exists():
        try:
            previous = ds.read_manifest(manifest_path).by_id()
        except EgoTrajError as exc:
            logger.warning("ignoring unreadable previous manifest: %s", exc)
    prev_by_hash = {e.input_hash: e for e in previous.values() if e.input_hash}

    tasks, reused = [], {}
    for path in bundles:
        h = ds.content_hash(path.read_bytes() + cfg_blob)
        hit = prev_by_hash.get(h)
        if hit is not None and (root / hit.path).exists():
            reused[str(path)] = hit
        else:
            tasks.append((str(path), cfg_dict, str(root), h))
    results = dict(zip((t[0] for t in tasks), _pmap(_extract_one, tasks, args.jobs)))

    entries, n_ok, n_fail = [], 0, 0
    for path in bundles:
        key = str(path)
        if key in reused:
            entry = reused[key]
        else:
            entry, read_error, name = results[key]
            if entry is None:
                logger.warning("unreadable bundle %s: %s", path, read_error)
                print(f"failed {name}: {read_error}")
                n_fail += 1
                continue
        entries.append(entry)
        if entry.status == "ok":
            n_ok += 1
        else:
            n_fail += 1
            print(f"failed {entry.id}: {entry.error}")
    manifest = ds.Manifest(dataset_tag=args.dataset_tag, episodes=tuple(entries),
                           delta_rotation_mode=args.delta_rotation_mode,
                           extra={"registration_config": cfg_dict})
    ds.write_manifest(manifest, manifest_path)
    _write_run_config(manifest_path.with_name(manifest_path.stem + ".extract.config.json"), "extract", {
        "registration": cfg_dict, "delta_rotation_mode": args.delta_rotation_mode,
        "jobs": args.jobs, "seed": args.seed, "input": str(src), "out": str(manifest_path)})
    print(f"extracted {n_ok} episodes, {n_fail} failed, {len(reused)} reused")
    return 0 if n_ok else 1


# --------------------------------------------------------------------------- curate

def _curate_one(task):
    path, root, cfg_dict, subdir = task
    ep = curate(ds.read_episode(path), CurationConfig(**cfg_dict))
    rel = ds.write_episode(ep, root, subdir)
    return ep, rel


def _fmt(x):
    return "" if x is None else repr(float(x))


def cmd_curate(args) -> int:
    try:
        cfg = CurationConfig(delta_td_m=args.delta_td, delta_bgts=args.delta_bgts,
                             bgts_aggregation=args.bgts_aggregation)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    manifest_path = Path(args.manifest)
    manifest = ds.read_manifest(manifest_path)
    root = manifest_path.parent
    out_path = Path(args.out) if args.out else manifest_path
    mode = args.delta_rotation_mode or manifest.delta_rotation_mode

    # One output directory per config keeps episode files write-once.
    subdir = "curated-" + ds.content_hash(json.dumps(asdict(cfg), sort_keys=True).encode("utf-8"))[:8]
    tasks = [(str(root / e.path), str(out_path.parent), asdict(cfg), subdir) for e in manifest.episodes]
    results = _pmap(_curate_one, tasks, args.jobs)

    entries, rows = [], []
    counts = {KEPT: 0, REJECTED_TRAVEL: 0, REJECTED_BGTS: 0, REJECTED_DEGENERATE: 0}
    for old, (ep, rel) in zip(manifest.episodes, results):
        rep = ep.curation
        counts[rep.verdict] += 1
        entries.append(ds.entry_for(ep, rel, status=old.status, error=old.error, input_hash=old.input_hash))
        bgts_txt = "insufficient-motion" if rep.insufficient_motion else _fmt(rep.bgts)
        rows.append([ep.id, repr(float(rep.travel_distance_m)), bgts_txt, rep.verdict, rep.reason])

    curated = manifest.replace(episodes=tuple(entries), curation_config=cfg.to_dict(),
                               delta_rotation_mode=mode, norm_stats=None)
    curated = curated.replace(norm_stats=ds.compute_manifest_norm_stats(curated, out_path.parent))
    ds.write_manifest(curated, out_path)

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", "D", "BGTS", "verdict", "reason"])
    writer.writerows(rows)
    csv_path = Path(args.csv) if args.csv else out_path.with_name(out_path.stem + ".curation.csv")
    ds.atomic_write(csv_path, buf.getvalue().encode("utf-8"))
    _write_run_config(out_path.with_name(out_path.stem + ".curate.config.json"), "curate", {
        "curation": cfg.to_dict(), "delta_rotation_mode": mode, "jobs": args.jobs,
        "manifest": str(manifest_path), "out": str(out_path), "csv": str(csv_path)})
    rejected = len(rows) - counts[KEPT]
    print(f"kept={counts[KEPT]} rejected={rejected} (travel={counts[REJECTED_TRAVEL]} "
          f"bgts={counts[REJECTED_BGTS]} degenerate={counts[REJECTED_DEGENERATE]})")
    return 0


# --------------------------------------------------------------------------- stats / export / eval

def cmd_stats(args) -> int:
    manifest = ds.read_manifest(args.manifest)
    stats = ds.dataset_stats(manifest, kept_only=args.kept_only)
    if args.json:
        print(json.dumps(stats._asdict(), sort_keys=True))
    else:
        print(f"#Episodes {stats.n_episodes}")
        print(f"#Verbs    {stats.n_verbs}")
        print(f"#Objects  {stats.n_objects}")
        print(f"#Frames   {stats.n_frames}")
    return 0


def cmd_export(args) -> int:
    if args.horizon < 1 or args.shard_size < 1:
        raise UsageError("--horizon and --shard-size must be >= 1")
    manifest_path = Path(args.manifest)
    manifest = ds.read_manifest(manifest_path)
    out = Path(args.out)
    try:
        index = ds.export_training_shards(manifest, manifest_path.parent, out, args.horizon,
                                          args.shard_size, args.seed)
    except MissingStats as exc:
        raise UsageError(str(exc)) from exc
    _write_run_config(out / "run_config.json", "export", {
        "manifest": str(manifest_path), "horizon": args.horizon, "shard_size": args.shard_size,
        "seed": args.seed, "delta_rotation_mode": manifest.delta_rotation_mode})
    print(f"wrote {len(index['shards'])} shards, {index['total_chunks']} chunks to {out}")
    return 0


def cmd_eval(args) -> int:
    gt_path, rec_path = Path(args.gt), Path(args.recovered)
    gt, rec = ds.read_manifest(gt_path), ds.read_manifest(rec_path)
    rec_by_id = rec.by_id()
    per_episode, missing = {}, []
    for e in gt.episodes:
        r = rec_by_id.get(e.id)
        rec_ep = None if r is None else ds.read_episode(rec_path.parent / r.path)
        if rec_ep is None or rec_ep.trajectory is None:
            missing.append(e.id)
            continue
        gt_ep = ds.read_episode(gt_path.parent / e.path)
        per_episode[e.id] = evaluate_recovery(gt_ep.trajectory, rec_ep.trajectory)
    ates = [m["ate_rmse_m"] for m in per_episode.values()]
    rots = [m["max_rot_geodesic_deg"] for m in per_episode.values()]
    report = {
        "episodes": per_episode,
        "missing": missing,
        "n_evaluated": len(per_episode),
        "mean_ate_rmse_m": float(np.mean(ates)) if ates else None,
        "max_ate_rmse_m": float(np.max(ates)) if ates else None,
        "max_rot_geodesic_deg": float(np.max(rots)) if rots else None,
    }
    text = json.dumps(report, sort_keys=True, indent=2) + "\n"
    if args.out:
        ds.atomic_write(Path(args.out), text.encode("utf-8"))
        _write_run_config(Path(args.out).with_suffix(".config.json"), "eval",
                          {"gt": str(gt_path), "recovered": str(rec_path)})
    sys.stdout.write(text)
    return 0 if per_episode else 1


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="egotraj", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic track bundles with ground truth")
    s.add_argument("spec", help="SceneSpec JSON file")
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--prefix", default="synth")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("extract", help="register frames and extract 6DoF trajectories")
    s.add_argument("input", help="directory of *.egtr track bundles")
    s.add_argument("--out", required=True, help="output manifest (JSONL)")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dataset-tag", default="egocentric")
    s.add_argument("--delta-rotation-mode", choices=act.DELTA_ROTATION_MODES, default=act.ELEMENTWISE)
    s.add_argument("--max-iterations", type=int, default=RegistrationConfig.max_iterations)
    s.add_argument("--max-correspondence-dist", type=float, default=RegistrationConfig.max_correspondence_dist)
    s.add_argument("--color-weight", type=float, default=RegistrationConfig.color_weight)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("curate", help="apply travel-distance and BGTS filters, smooth kept episodes")
    s.add_argument("manifest")
    s.add_argument("--delta-td", type=float, default=CurationConfig.delta_td_m)
    s.add_argument("--delta-bgts", type=float, default=CurationConfig.delta_bgts)
    s.add_argument("--bgts-aggregation", choices=("mean-displacement", "per-track"),
                   default=CurationConfig.bgts_aggregation)
    s.add_argument("--delta-rotation-mode", choices=act.DELTA_ROTATION_MODES, default=None)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", default=None, help="output manifest (default: update in place)")
    s.add_argument("--csv", default=None, help="curation report CSV path")
    s.set_defaults(func=cmd_curate)

    s = sub.add_parser("stats", help="episode/verb/object/frame counts")
    s.add_argument("manifest")
    s.add_argument("--kept-only", action="store_true")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("export", help="write normalized action-chunk training shards")
    s.add_argument("manifest")
    s.add_argument("--horizon", type=int, default=act.DEFAULT_HORIZON)
    s.add_argument("--shard-size", type=int, default=1024)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("eval", help="compare recovered trajectories against ground truth")
    s.add_argument("gt", help="ground-truth manifest")
    s.add_argument("recovered", help="recovered manifest")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    _setup_logging()
    try:
        sys.stdout.reconfigure(line_buffering=True)
    except (AttributeError, io.UnsupportedOperation):
        pass
    args = build_parser().parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        print("egotraj: error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"egotraj {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except EgoTrajError as exc:
        print(f"egotraj {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

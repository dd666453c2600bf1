"""Acceptance criteria, one test each; a pass/fail line per criterion is printed at the end of the run."""

import time
from dataclasses import replace

import numpy as np

from egotraj.actions import (
    ActionChunk,
    action_mse,
    compute_norm_stats,
    denormalize,
    merge_datasets,
    normalize,
    rot6d_from_rotation,
    rotation_from_rot6d,
    to_actions,
)
from egotraj.curation import CurationConfig, curate, smooth_translations, travel_distance
from egotraj.datastore import parse_episode, read_episode, serialize_episode, write_episode
from egotraj.errors import BadMagic, TruncatedFile
from egotraj.geometry import estimate_rigid_transform, geodesic_angle, register_to_start_frame
from egotraj.model import KEPT, REJECTED_BGTS, REJECTED_TRAVEL, Trajectory
from egotraj.pipeline import extract_episode
from egotraj.synth import (
    SceneSpec,
    ego_motion_spec,
    evaluate_recovery,
    generate_episode,
    manipulation_spec,
    random_rotation,
    static_object_spec,
)

from conftest import random_episode, record_criterion


def test_criterion_01_kabsch_exactness():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst_r = worst_t = 0.0
    for _ in range(1000):
        R, t = random_rotation(rng), rng.uniform(-1.0, 1.0, 3)
        src = rng.normal(size=(10, 3))
        fit, _ = estimate_rigid_transform(src, src @ R.T + t)
        worst_r = max(worst_r, np.linalg.norm(fit.rotation - R))
        worst_t = max(worst_t, np.linalg.norm(fit.translation - t))
    elapsed = time.perf_counter() - start
    ok = worst_r < 1e-9 and worst_t < 1e-9 and elapsed < 5.0
    record_criterion(1, ok, f"kabsch max |dR|_F={worst_r:.2e} max |dt|={worst_t:.2e} m in {elapsed:.2f}s")
    assert ok


def _ego_spec(rng, noise):
    obj = manipulation_spec(rng).object_motion
    return SceneSpec(frames=20, n_scene_points=500, object_motion=obj, camera_motion=ego_motion_spec(rng),
                     noise_sigma_m=noise, seed=int(rng.integers(2**31)))


def test_criterion_02_registration_under_ego_motion():
    rng = np.random.default_rng(202)
    start = time.perf_counter()
    worst_t = worst_r = worst_ate = 0.0
    sigma = 0.002
    for _ in range(100):
        spec = _ego_spec(rng, 0.0)
        ep, gt = generate_episode(spec)
        cams = register_to_start_frame(ep.frames)
        final, truth = cams[-1], gt.cam_transforms[-1]
        worst_t = max(worst_t, np.linalg.norm(final.translation - truth.translation))
        worst_r = max(worst_r, np.degrees(geodesic_angle(final.rotation, truth.rotation)))

        ep, gt = generate_episode(replace(spec, noise_sigma_m=sigma))
        rec = extract_episode(ep)
        assert rec.trajectory is not None, rec.meta.get("extract_error")
        worst_ate = max(worst_ate, evaluate_recovery(gt, rec.trajectory)["ate_rmse_m"])
    elapsed = time.perf_counter() - start
    ok = worst_t < 1e-3 and worst_r < 0.1 and worst_ate < 2 * sigma and elapsed < 60.0
    record_criterion(2, ok, f"ego-motion registration: final |dt|={worst_t:.2e} m, dR={worst_r:.2e} deg; "
                            f"noisy max ATE={worst_ate * 1e3:.2f} mm (< {2 * sigma * 1e3:.0f}); {elapsed:.1f}s")
    assert ok


def test_criterion_03_end_to_end_noiseless():
    rng = np.random.default_rng(303)
    worst_ate = worst_rot = 0.0
    verdicts = []
    for _ in range(20):
        ep, gt = generate_episode(manipulation_spec(rng))
        rec = extract_episode(ep)
        m = evaluate_recovery(gt, rec.trajectory)
        worst_ate, worst_rot = max(worst_ate, m["ate_rmse_m"]), max(worst_rot, m["max_rot_geodesic_deg"])
        verdicts.append(curate(rec).curation.verdict)
    all_kept = all(v == KEPT for v in verdicts)
    ok = worst_ate < 1e-4 and worst_rot < 0.1 and all_kept
    record_criterion(3, ok, f"end-to-end noiseless: max ATE={worst_ate:.2e} m, max rot={worst_rot:.2e} deg, "
                            f"kept {verdicts.count(KEPT)}/{len(verdicts)}")
    assert ok


def test_criterion_04_bgts_separation():
    rng = np.random.default_rng(404)
    static, manip = [], []
    for _ in range(100):
        static.append(extract_episode(generate_episode(static_object_spec(rng, noise_sigma_m=0.001))[0]))
        manip.append(extract_episode(generate_episode(manipulation_spec(rng, noise_sigma_m=0.001))[0]))
    cfg = CurationConfig(delta_bgts=0.7)
    s_out = [curate(e, cfg).curation for e in static]
    m_out = [curate(e, cfg).curation for e in manip]
    correct = sum(r.verdict == REJECTED_BGTS for r in s_out) + sum(r.verdict == KEPT for r in m_out)
    frac = correct / 200
    s_b = [r.bgts for r in s_out if r.bgts is not None]
    m_b = [r.bgts for r in m_out if r.bgts is not None]

    kept = {}
    for d in (0.5, 0.7, 1.0):
        c = CurationConfig(delta_bgts=d)
        kept[d] = {i for i, e in enumerate(static + manip) if curate(e, c).curation.verdict == KEPT}
    chain = kept[0.5] <= kept[0.7] <= kept[1.0]
    sizes = tuple(len(kept[d]) for d in (0.5, 0.7, 1.0))
    ok = frac >= 0.95 and chain
    record_criterion(4, ok, f"BGTS at 0.7: {frac:.1%} correct (static min {min(s_b):.3f}, manip max {max(m_b):.3f}); "
                            f"kept counts {sizes} subset chain={chain}")
    assert ok


def _jump_paired(rng):
    base = manipulation_spec(rng, noise_sigma_m=0.001)
    clean = extract_episode(generate_episode(base)[0])
    frame = int(rng.integers(2, base.frames - 1))
    jumped = replace(base, failure_mode="registration_jump", failure_frame=frame, failure_magnitude_m=1.0)
    return clean, extract_episode(generate_episode(jumped)[0])


def test_criterion_05_travel_distance_filter():
    rng = np.random.default_rng(505)
    pairs = [_jump_paired(rng) for _ in range(100)]
    clean_d = np.array([travel_distance(c.trajectory) for c, _ in pairs])
    jump_d = np.array([travel_distance(j.trajectory) for _, j in pairs])
    cfg = CurationConfig(delta_td_m=5.0)
    recall = np.mean([curate(j, cfg).curation.verdict == REJECTED_TRAVEL for _, j in pairs])
    fpr = np.mean([curate(c, cfg).curation.verdict == REJECTED_TRAVEL for c, _ in pairs])
    spread = clean_d.max() - clean_d.min()
    ok = clean_d.max() < 0.5 and recall == 1.0 and fpr == 0.0 and spread <= 2.0
    record_criterion(5, ok, f"travel filter at 5.0 m: recall={recall:.0%} FPR={fpr:.0%}; clean D in "
                            f"[{clean_d.min():.2f}, {clean_d.max():.2f}] m, jumped D in "
                            f"[{jump_d.min():.2f}, {jump_d.max():.2f}] m")
    assert ok


def test_criterion_06_smoothing_variance_reduction():
    rng = np.random.default_rng(606)
    T, sigma, v = 100, 0.005, 0.001
    truth = np.arange(T)[:, None] * np.array([v, 0.0, 0.0])
    eye = np.repeat(np.eye(3)[None], T, axis=0)
    raw_se = np.zeros(T)
    smooth_se = np.zeros(T)
    for _ in range(1000):
        noisy = truth + rng.normal(scale=sigma, size=truth.shape)
        sm = smooth_translations(Trajectory.from_arrays(noisy, eye)).positions
        raw_se += np.sum((noisy - truth) ** 2, axis=1)
        smooth_se += np.sum((sm - truth) ** 2, axis=1)
    ratio = raw_se / smooth_se
    interior = raw_se[2:-2].sum() / smooth_se[2:-2].sum()
    factors = {"interior": (interior, 5.0), "t=1": (ratio[0], 3.0), "t=T": (ratio[-1], 3.0),
               "t=2": (ratio[1], 4.0), "t=T-1": (ratio[-2], 4.0)}
    ok = all(abs(got - want) <= 0.3 * want for got, want in factors.values())
    detail = ", ".join(f"{k} {got:.2f} (target {want:.0f})" for k, (got, want) in factors.items())
    record_criterion(6, ok, f"smoothing MSE reduction: {detail}")
    assert ok


def test_criterion_07_rot6d_and_telescoping():
    rng = np.random.default_rng(707)
    worst = max(np.linalg.norm(rotation_from_rot6d(rot6d_from_rotation(R)) - R)
                for R in (random_rotation(rng) for _ in range(1000)))
    tele_ok = True
    worst_tele = 0.0
    for T in (2, 10, 100, 1000):
        p = np.cumsum(rng.normal(scale=0.1, size=(T, 3)), axis=0)
        traj = Trajectory.from_arrays(p, [random_rotation(rng) for _ in range(T)])
        total = np.sum([a.raw_values[:3] for a in to_actions(traj)], axis=0)
        err = np.max(np.abs(total - (p[-1] - p[0])))
        worst_tele = max(worst_tele, err)
        tele_ok &= err <= 1e-9 * T
    ok = worst < 1e-6 and tele_ok
    record_criterion(7, ok, f"rot6d round trip max {worst:.2e}; telescoping max err {worst_tele:.2e}")
    assert ok


def test_criterion_08_normalize_and_merge():
    rng = np.random.default_rng(808)
    ours = rng.normal(size=(300, 9))
    robot = rng.normal(size=(120, 7)) * 3 + 1
    s9, s7 = compute_norm_stats(ours, "egocentric"), compute_norm_stats(robot, "robot")
    inside = rng.uniform(s9.q01, s9.q99, size=(1000, 9))
    rt = np.max(np.abs(denormalize(normalize(inside, s9), s9) - inside))
    m = merge_datasets([(ours, 9, s9), (robot, 7, s7)])
    masks_ok = (m.dim == 9 and m.values.shape == (420, 9) and m.pad_mask[:300].all()
                and m.pad_mask[300:, :7].all() and not m.pad_mask[300:, 7:].any())
    zeros_ok = bool(np.all(m.values[300:, 7:] == 0.0))
    counts_ok = m.counts() == {"egocentric": 300, "robot": 120}
    ok = rt < 1e-9 and masks_ok and zeros_ok and counts_ok
    record_criterion(8, ok, f"normalize round trip {rt:.2e}; merge masks={masks_ok} pad zeros={zeros_ok} "
                            f"counts={m.counts()}")
    assert ok


def _chunk(rows, valid):
    rows = np.asarray(rows, dtype=float)
    return ActionChunk(rows, None, len(rows), np.asarray(valid, bool), np.ones(rows.shape[1], bool))


def test_criterion_09_action_mse():
    rng = np.random.default_rng(909)
    x = rng.normal(size=(16, 9))
    zero = action_mse(_chunk(x, [1] * 16), _chunk(x, [1] * 16))
    nine = action_mse(_chunk(np.ones((2, 9)), [1, 1]), _chunk(np.zeros((2, 9)), [1, 1]))
    masked = action_mse(_chunk([[0.0] * 9, [5.0] * 9], [1, 1]), _chunk(np.zeros((2, 9)), [1, 0]))
    ok = zero == 0.0 and nine == 9.0 and masked == 0.0
    record_criterion(9, ok, f"action_mse identical={zero} fixture={nine} masked={masked}")
    assert ok


def test_criterion_10_format_durability(tmp_path):
    rng = np.random.default_rng(1010)
    mismatches = 0
    for i in range(1000):
        ep = random_episode(rng, i)
        path = tmp_path / write_episode(ep, tmp_path)
        data = path.read_bytes()
        if serialize_episode(read_episode(path)) != data or data != serialize_episode(ep):
            mismatches += 1
    sample = serialize_episode(random_episode(rng, 0))
    bad_magic = trunc = False
    try:
        parse_episode(b"XXXX" + sample[4:])
    except BadMagic as exc:
        bad_magic = exc.offset == 0
    try:
        parse_episode(sample[:20 + 8 * 3 + 4])
    except TruncatedFile as exc:
        trunc = exc.offset == 20
    ok = mismatches == 0 and bad_magic and trunc
    record_criterion(10, ok, f"1000-episode round trip mismatches={mismatches}; BadMagic={bad_magic} "
                             f"TruncatedFile@20={trunc} (suite runtime reported below)")
    assert ok

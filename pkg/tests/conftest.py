import time

import numpy as np
import pytest

from egotraj.model import Episode, Pose6DoF, TrackedFrame, Trajectory

ACCEPTANCE_LINES = []
SUITE_BUDGET_S = 300.0
_session = {}


def record_criterion(number, ok, detail):
    ACCEPTANCE_LINES.append((number, bool(ok), detail))


def pytest_sessionstart(session):
    _session["start"] = time.perf_counter()


def pytest_sessionfinish(session, exitstatus):
    elapsed = time.perf_counter() - _session["start"]
    _session["elapsed"] = elapsed
    if elapsed >= SUITE_BUDGET_S and exitstatus == 0:
        session.exitstatus = 1


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(ACCEPTANCE_LINES, key=lambda x: x[0]):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {detail}")
    elapsed = _session.get("elapsed", time.perf_counter() - _session["start"])
    ok = elapsed < SUITE_BUDGET_S
    terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion 10: suite runtime {elapsed:.1f}s "
                                f"(budget {SUITE_BUDGET_S:.0f}s)")


def rz(deg):
    a = np.radians(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def line_trajectory(T, step, direction=(1.0, 0.0, 0.0)):
    d = np.asarray(direction, dtype=float)
    return Trajectory([Pose6DoF(t * step * d, np.eye(3), t + 1) for t in range(T)])


def simple_frames(T=2, N=4, seed=0):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(N, 3))
    return [TrackedFrame(pts + 0.01 * t, frame_index=t + 1) for t in range(T)]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def two_frame_episode():
    frames = simple_frames(2, 4)
    traj = line_trajectory(2, 0.01)
    return Episode("ep-0", "pick up the cup", "pick", "cup", frames, traj, source_dataset="test")


VERBS = ["pick", "Place", " stir ", "open", "pour"]
OBJECTS = ["cup", "bowl", "Pot", "lid ", "café mug"]


def random_episode(rng, idx=0):
    """A valid episode with every optional block filled in at random."""
    from egotraj.curation import curate
    from egotraj.synth import random_rotation

    T = int(rng.integers(2, 12))
    N = int(rng.integers(3, 20))
    M = int(rng.integers(0, 15))
    L = int(rng.integers(1, 5))
    frames = []
    for t in range(T):
        frames.append(TrackedFrame(
            rng.normal(size=(N, 3)), frame_index=2 * t + 1,
            object_colors=rng.uniform(size=(N, 3)) if rng.random() < 0.7 else None,
            scene_points=rng.normal(size=(M, 3)) if M else None,
            scene_colors=rng.uniform(size=(M, 3)) if M and rng.random() < 0.5 else None,
            object_track_2d=rng.normal(size=(3, 2)) * 100,
            background_tracks_2d=rng.normal(size=(L, 2)) * 100,
        ))
    traj = Trajectory([Pose6DoF(rng.normal(size=3), random_rotation(rng), 2 * t + 1) for t in range(T)],
                      frame_rate_hz=float(rng.choice([20.0, 30.0, 15.5])))
    verb, obj = VERBS[idx % len(VERBS)], OBJECTS[(idx // 2) % len(OBJECTS)]
    ep = Episode(f"ep-{idx:05d}", f"{verb} the {obj} ✓", verb, obj, frames, traj,
                 source_dataset="random", meta={"k": idx, "note": "ünïcode"})
    return curate(ep) if rng.random() < 0.5 else ep


def assert_episodes_equal(a, b):
    assert (a.id, a.instruction, a.verb, a.object, a.source_dataset, a.meta) == \
        (b.id, b.instruction, b.verb, b.object, b.source_dataset, b.meta)
    assert a.curation == b.curation
    assert len(a.frames) == len(b.frames)
    for fa, fb in zip(a.frames, b.frames):
        assert fa.frame_index == fb.frame_index
        for name in ("object_points", "object_colors", "scene_points", "scene_colors",
                     "object_track_2d", "background_tracks_2d"):
            x, y = getattr(fa, name), getattr(fb, name)
            assert (x is None) == (y is None)
            if x is not None:
                np.testing.assert_array_equal(x, y)
    assert (a.trajectory is None) == (b.trajectory is None)
    if a.trajectory is not None:
        np.testing.assert_array_equal(a.trajectory.positions, b.trajectory.positions)
        np.testing.assert_array_equal(a.trajectory.rotations, b.trajectory.rotations)
        assert a.trajectory.timestamps == b.trajectory.timestamps
        assert a.trajectory.frame_rate_hz == b.trajectory.frame_rate_hz

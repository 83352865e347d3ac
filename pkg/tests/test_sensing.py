import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from capnav.sensing import (
    MAX_DEPTH,
    EpisodeSensors,
    ExpertObservation,
    Frame,
    FrameHistory,
    Granularity,
    Mount,
    SensorParams,
    add_proprio_noise,
    assemble_expert_obs,
    assemble_student_obs,
    degrade,
    goal_in_body,
    pool,
    raycast,
)
from capnav.simkernel import ContractError, RobotState
from capnav.world import Capability, Obstacle, Rectangle, Scene, generate_scene
from conftest import empty_scene


def _wall_scene(face_x):
    wall = Obstacle(Rectangle((0.1, 50.0)), (face_x + 0.1, 0.0))
    return Scene((-100, -100, 100, 100), (wall,), (), (), Capability.REACHING, 0)


def test_empty_scene_reads_max_range():
    img = raycast(RobotState(0, 0, 0.7), empty_scene(500, 500), Mount.BACK, math.radians(140))
    assert np.all(img.rays == MAX_DEPTH)


def test_perpendicular_wall_obeys_cosine_law():
    fov = math.radians(120)
    img = raycast(RobotState(0, 0, 0), _wall_scene(0.35 + 2.0), Mount.FRONT, fov, rays=33)
    theta = fov * np.linspace(-0.5, 0.5, 33)
    want = np.minimum(2.0 / np.cos(theta), MAX_DEPTH)
    assert img.rays[16] == pytest.approx(2.0, abs=1e-12)
    assert np.allclose(img.rays, want, atol=1e-9)


@given(st.floats(0.2, 3.0), st.floats(0.01, 1.0))
def test_ray_depth_monotone_in_obstacle_distance(near, extra):
    a = raycast(RobotState(0, 0, 0), _wall_scene(0.35 + near), Mount.FRONT, math.radians(120), rays=16)
    b = raycast(RobotState(0, 0, 0), _wall_scene(0.35 + near + extra), Mount.FRONT, math.radians(120), rays=16)
    assert np.all(b.rays >= a.rays)


def test_goal_in_body_examples():
    assert np.allclose(goal_in_body(np.array([[0, 0, 0.0]]), np.array([[3.0, 0]])), [[3, 0]])
    assert np.allclose(goal_in_body(np.array([[0, 0, math.pi / 2]]), np.array([[3.0, 0]])), [[0, -3]])


def test_first_step_has_zero_last_action():
    obs = assemble_expert_obs(RobotState(0, 0, 0), empty_scene(), None, (3.0, 0.0), EpisodeSensors(math.radians(120)))
    assert np.array_equal(obs.last_action, np.zeros(3))
    assert obs.depth.shape == (4, 32)


def test_proprio_noise():
    obs = assemble_expert_obs(RobotState(0, 0, 0), generate_scene(Capability.REACHING, 1), [0.1, 0.2, 0.3],
                              (3.0, 0.0), EpisodeSensors(math.radians(120)))
    assert add_proprio_noise(obs, 0.0, np.random.default_rng(0)) is obs
    rng = np.random.default_rng(3)
    draws = np.stack([add_proprio_noise(obs, 0.05, rng).last_action for _ in range(34_000)])
    resid = (draws - obs.last_action).ravel()
    assert resid.size > 100_000
    assert abs(resid.std() / 0.05 - 1) < 0.02
    noisy = add_proprio_noise(obs, 0.05, rng)
    for a, b in zip(noisy.views, obs.views):
        assert a.rays.tobytes() == b.rays.tobytes()
    with pytest.raises(ValueError):
        add_proprio_noise(obs, -1.0, rng)


def test_pool_example_and_mean():
    fine = np.array([1, 1, 1, 1, 3, 3, 3, 3, 2, 2, 2, 2, 4, 4, 4, 4], float)
    assert np.array_equal(pool(fine), [1, 3, 2, 4])


@given(st.lists(st.floats(0.01, 4.0), min_size=32, max_size=32))
def test_pooling_preserves_mean(rays):
    rays = np.array(rays)
    assert pool(rays).mean() == pytest.approx(rays.mean(), abs=1e-12)


def test_degrade_quantizes_to_eight_levels():
    params = SensorParams(student_noise=0.0)
    out = degrade(np.linspace(0.01, 4.0, 1000), np.random.default_rng(0), params)
    levels = np.unique(np.round(out, 12))
    assert len(levels) == 8
    assert levels[0] == pytest.approx(0.01) and levels[-1] == pytest.approx(4.0)


def _frames(n):
    rng = np.random.default_rng(n)
    return [Frame(rng.uniform(0.01, 4.0, size=(4, 32)), 0.1 * k) for k in range(n)]


def test_window_with_one_frame():
    obs = assemble_student_obs(_frames(1), (1.0, 0.0), np.random.default_rng(0))
    assert len(obs.window) == 1 and obs.window[0].granularity is Granularity.FINE


def test_window_truncates_to_eight():
    obs = assemble_student_obs(_frames(12), (1.0, 0.0), np.random.default_rng(0))
    assert [f.granularity for f in obs.window] == [Granularity.COARSE] * 7 + [Granularity.FINE]
    stamps = [f.timestamp for f in obs.window]
    assert all(a < b for a, b in zip(stamps, stamps[1:]))
    assert stamps[-1] == pytest.approx(1.1)
    assert obs.window[0].rays.shape == (4, 8) and obs.window[-1].rays.shape == (4, 32)


def test_empty_history_is_rejected():
    with pytest.raises(ContractError):
        assemble_student_obs([], (1.0, 0.0), np.random.default_rng(0))


@pytest.mark.parametrize("n", [1, 3, 8, 11])
def test_frame_history_matches_single_assembly(n):
    """The batched ring buffer and the per-frame path produce the same arrays."""
    params = SensorParams(student_noise=0.0)
    frames = _frames(n)
    hist = FrameHistory(2)
    for f in frames:
        hist.push(np.stack([f.rays, f.rays * 0.5]))
    fine, coarse = hist.student_arrays(np.random.default_rng(0), params)
    obs = assemble_student_obs(frames, (1.0, 0.0), np.random.default_rng(0), params)
    want_fine, want_coarse = obs.arrays()
    assert np.allclose(fine[0], want_fine)
    assert np.allclose(coarse[0], want_coarse)
    # zero padding marks slots older than the episode
    assert np.all(coarse[0, : max(0, 8 - n)] == 0)


def test_student_pipeline_never_returns_expert_observation():
    obs = assemble_student_obs(_frames(3), (1.0, 0.0), np.random.default_rng(0))
    assert not isinstance(obs, ExpertObservation)
    assert not hasattr(obs, "views")


def test_fov_sampling_range():
    rng = np.random.default_rng(0)
    fovs = [EpisodeSensors.sample(rng, SensorParams()).fov for _ in range(2000)]
    assert math.radians(100) <= min(fovs) and max(fovs) <= math.radians(140)
    assert EpisodeSensors.nominal(SensorParams()).fov == pytest.approx(math.radians(120))

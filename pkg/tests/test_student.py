import numpy as np
import pytest

from capnav.sensing import FrameFeatures, Granularity, StudentObservation, assemble_expert_obs, EpisodeSensors
from capnav.simkernel import RobotState
from capnav.student import (
    StudentPolicy,
    bc_loss,
    evaluate_loss,
    finetune,
    load_student,
    save_student,
    student_forward,
)
from conftest import empty_scene


def _obs(n_frames, rng):
    frames = [FrameFeatures(rng.uniform(0.01, 4, (4, 8)), Granularity.COARSE, 0.1 * k) for k in range(n_frames - 1)]
    frames.append(FrameFeatures(rng.uniform(0.01, 4, (4, 32)), Granularity.FINE, 0.1 * n_frames))
    return StudentObservation(tuple(frames), rng.normal(size=2))


def _data(n, rng, teacher=None):
    fine = rng.uniform(0.01, 4.0, size=(n, 128))
    coarse = rng.uniform(0.01, 4.0, size=(n, 7, 32))
    goal = rng.normal(size=(n, 2)) * 3
    label = rng.uniform(-1, 1, size=(n, 3)) if teacher is None else teacher.act(fine, coarse, goal)
    return {"fine": fine, "coarse": coarse, "goal": goal, "expert_action": label}


def test_zero_net_gives_zero_action():
    pol = StudentPolicy(seed=0)
    for p in pol.parameters():
        p.data[...] = 0.0
    assert np.array_equal(student_forward(pol, _obs(3, np.random.default_rng(0))), np.zeros(3))


def test_single_frame_equals_hand_padded_window():
    pol = StudentPolicy(seed=1)
    rng = np.random.default_rng(1)
    one = _obs(1, rng)
    fine = one.window[0].rays.reshape(-1)
    got = student_forward(pol, one)
    want = pol.act(fine[None], np.zeros((1, 7, 32)), one.goal_rel[None])[0]
    assert np.array_equal(got, want)


def test_forward_is_deterministic():
    pol = StudentPolicy(seed=2)
    obs = _obs(8, np.random.default_rng(2))
    first = student_forward(pol, obs)
    assert all(student_forward(pol, obs).tobytes() == first.tobytes() for _ in range(100))


def test_expert_observation_is_rejected():
    pol = StudentPolicy(seed=0)
    expert_obs = assemble_expert_obs(RobotState(0, 0, 0), empty_scene(), None, (1, 0), EpisodeSensors(2.0))
    with pytest.raises(TypeError):
        student_forward(pol, expert_obs)


def test_input_widths_mirror_pooling():
    pol = StudentPolicy(rays=32)
    assert pol.fine_in == 128 and pol.coarse_in == 32 and pol.fine_in == 4 * pol.coarse_in
    with pytest.raises(ValueError):
        pol.predict(np.zeros((1, 128)), np.zeros((1, 7, 128)), np.zeros((1, 2)))


def test_bc_loss_examples():
    pol = StudentPolicy(seed=0)
    for p in pol.parameters():
        p.data[...] = 0.0
    batch = {"fine": np.ones((1, 128)), "coarse": np.ones((1, 7, 32)), "goal": np.zeros((1, 2)),
             "expert_action": np.array([[1.0, 0.0, 0.0]])}
    assert float(bc_loss(pol, batch).data) == pytest.approx(1 / 3)
    batch["expert_action"] = np.zeros((1, 3))
    assert float(bc_loss(pol, batch).data) == 0.0


def test_bc_loss_is_symmetric():
    rng = np.random.default_rng(4)
    pol = StudentPolicy(seed=4)
    data = _data(16, rng)
    pred = pol.act(data["fine"], data["coarse"], data["goal"])
    forward = float(bc_loss(pol, data).data)

    class Frozen:
        """Stub that replays the original labels as its prediction."""

        def predict(self, *args):
            from capnav.tensornn import Tensor
            return Tensor(data["expert_action"])

    swapped = float(bc_loss(Frozen(), {**data, "expert_action": pred}).data)
    assert forward == pytest.approx(swapped, rel=1e-12)


def test_zero_learning_rate_keeps_parameters():
    pol = StudentPolicy(seed=5)
    before = {k: v.copy() for k, v in pol.state_dict().items()}
    finetune(pol, _data(64, np.random.default_rng(5)), epochs=2, lr=0.0, batch_size=16, rng=np.random.default_rng(0))
    after = pol.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)


@pytest.mark.parametrize("seed", range(3))
def test_second_epoch_does_not_increase_loss(seed):
    rng = np.random.default_rng(seed)
    teacher = StudentPolicy(seed=100 + seed)
    pol = StudentPolicy(seed=seed)
    curve = finetune(pol, _data(512, rng, teacher), epochs=2, lr=1e-3, batch_size=64, rng=rng)
    assert curve[1] <= curve[0]


def test_memorizes_small_set():
    rng = np.random.default_rng(7)
    data = _data(1000, rng, StudentPolicy(seed=70))
    pol = StudentPolicy(seed=7)
    finetune(pol, data, epochs=60, lr=1e-3, batch_size=64, rng=rng)
    assert evaluate_loss(pol, data) < 1e-3


def test_nan_labels_abort():
    data = _data(8, np.random.default_rng(0))
    data["expert_action"][0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        finetune(StudentPolicy(seed=0), data, 1, 1e-3, 8, np.random.default_rng(0))


def test_checkpoint_round_trip(tmp_path):
    pol = StudentPolicy(seed=9)
    save_student(tmp_path / "s.ckpt", pol)
    back = load_student(tmp_path / "s.ckpt")
    obs = _obs(5, np.random.default_rng(9))
    assert student_forward(back, obs).tobytes() == student_forward(pol, obs).tobytes()

import numpy as np
import pytest

from reslora.model import build_model, forward
from reslora.tensor import SeededRng, ShapeError, as_matrix
from reslora.train import (
    AdamState,
    NormWindow,
    TrainConfig,
    TrainingDivergedError,
    adam_step,
    evaluate,
    make_task,
    mse_loss,
    sgd_step,
    train,
)


def small_setup(structure="none", seed=0, rank=2, pre_num=4):
    bases, task = make_task(seed, 4, 8, 0.1)
    return build_model(bases, structure, rank=rank, pre_num=pre_num, seed=seed), task


def test_mse_examples():
    m = as_matrix([[1.0, 2.0]])
    assert mse_loss(m, m) == 0.0
    assert mse_loss(as_matrix(1.0), as_matrix(3.0)) == 4.0
    assert mse_loss(as_matrix([[1, 1]]), as_matrix([[0, 2]])) == 1.0
    with pytest.raises(ShapeError):
        mse_loss(m, as_matrix(1.0))


def test_sgd_examples():
    p = [as_matrix(1.0)]
    assert sgd_step(p, [as_matrix(2.0)], lr=0.1)[0][0][0, 0] == pytest.approx(0.8)
    assert np.array_equal(sgd_step(p, [as_matrix(0.0)], lr=0.1)[0][0], p[0])


@pytest.mark.parametrize("g", [1.0, 1e-3, 250.0])
def test_adam_first_step_is_lr(g):
    p = np.zeros((2, 3))
    new, state = adam_step([p], [np.full((2, 3), g)], None, lr=0.01)
    np.testing.assert_allclose(new[0], -0.01, rtol=1e-5)
    assert isinstance(state, AdamState) and state.t == 1


def test_shift_zero_gives_zero_loss():
    bases, task = make_task(3, 3, 5, 0.0)
    model = build_model(bases, "none", rank=2, seed=3)
    assert evaluate(model, task) == 0.0


def test_make_task_deterministic():
    a = make_task(5, 3, 4, 0.1)
    b = make_task(5, 3, 4, 0.1)
    for la, lb in zip(a[0] + a[1].teacher, b[0] + b[1].teacher):
        assert la.W.tobytes() == lb.W.tobytes()


def test_make_task_rejects_bad_args():
    with pytest.raises(ValueError):
        make_task(0, 0, 4, 0.1)
    with pytest.raises(ValueError):
        make_task(0, 2, 4, -0.1)


def test_initial_loss_recorded_first():
    model, task = small_setup()
    cfg = TrainConfig(steps=5, learning_rate=1e-2, seed=0)
    _, curve, _ = train(model, task, cfg)
    x, y = task.sample(SeededRng(0, stream=1), cfg.batch_size)
    assert curve.losses[0] == mse_loss(forward(model, x).output, y)
    assert curve.losses[0] > 0


def test_training_reduces_loss():
    model, task = small_setup()
    _, curve, _ = train(model, task, TrainConfig(steps=300, learning_rate=1e-2, seed=0))
    assert len(curve) == 300
    assert curve.final < curve.losses[0]


def test_steps_one_and_invalid_config():
    model, task = small_setup()
    assert len(train(model, task, TrainConfig(steps=1))[1]) == 1
    with pytest.raises(ValueError):
        TrainConfig(steps=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="lbfgs")


def test_deterministic_curve():
    model, task = small_setup("bs")
    cfg = TrainConfig(steps=40, seed=3)
    a = train(model, task, cfg)[1].losses
    b = train(model, task, cfg)[1].losses
    assert np.array(a).tobytes() == np.array(b).tobytes()


def test_frozen_weights_untouched_and_input_not_mutated():
    model, task = small_setup("ms")
    before = [l.base.W.tobytes() for l in model.layers]
    A0 = model.adapters[0].A.copy()
    trained, _, _ = train(model, task, TrainConfig(steps=20, seed=1))
    assert [l.base.W.tobytes() for l in trained.layers] == before
    assert np.array_equal(model.adapters[0].A, A0)
    assert trained.adapters[0].B.any()


@pytest.mark.parametrize("steps, capacity", [(10, 64), (100, 64), (7, 3)])
def test_window_lengths(steps, capacity):
    model, task = small_setup("is")
    _, _, windows = train(model, task, TrainConfig(steps=steps, window_capacity=capacity))
    assert [len(w) for w in windows] == [min(steps, capacity)] * model.depth


def test_window_fifo_and_validation():
    w = NormWindow(0, capacity=2)
    for v in (1.0, 2.0, 4.0):
        w.push(v)
    assert list(w.values) == [2.0, 4.0] and w.mean() == 3.0
    with pytest.raises(ValueError):
        w.push(-1.0)
    with pytest.raises(ValueError):
        NormWindow(1).mean()


def test_ms_windows_track_down_projection():
    model, task = small_setup("ms")
    trained, _, windows = train(model, task, TrainConfig(steps=3))
    # A x norms are much smaller than the input norms (A has std 0.02)
    assert windows[0].mean() < 1.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reported():
    model, task = small_setup()
    with pytest.raises(TrainingDivergedError, match="step"):
        train(model, task, TrainConfig(steps=200, optimizer="sgd", learning_rate=1e6))


def test_shape_mismatch():
    model, _ = small_setup()
    _, other = make_task(0, 4, 6, 0.1)
    with pytest.raises(ShapeError):
        train(model, other, TrainConfig(steps=1))


def test_eval_batch_fixed():
    _, task = make_task(2, 2, 4, 0.1)
    assert task.eval_batch()[0].tobytes() == task.eval_batch()[0].tobytes()
    assert task.sample(SeededRng(2, stream=2), 256)[0].tobytes() == task.eval_batch()[0].tobytes()

import numpy as np
import pytest

from gatelab.tasks import (
    TASKS, TaskError, TaskSpec, ar2_filter, generate, input_dim, narma10_series, write_batch_csv,
)


@pytest.mark.parametrize("kind", TASKS)
def test_shapes_and_determinism(kind):
    spec = TaskSpec(kind, 30, seed=5)
    a = generate(spec, 4)
    b = generate(spec, 4)
    assert a.inputs.shape == (4, 30, input_dim(kind))
    assert a.targets.shape == (4, 30, 1)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    np.testing.assert_array_equal(a.targets, b.targets)


@pytest.mark.parametrize("kind", TASKS)
def test_sequence_independent_of_batch_layout(kind):
    spec = TaskSpec(kind, 25, seed=1)
    whole = generate(spec, 6)
    part = generate(spec, 2, start=3)
    np.testing.assert_array_equal(whole.inputs[3:5], part.inputs)


def test_adding_structure():
    batch = generate(TaskSpec("adding", 40, seed=0), 20)
    marks = batch.inputs[:, :, 1]
    assert np.all(marks.sum(axis=1) == 2)
    expect = (batch.inputs[:, :, 0] * marks).sum(axis=1)
    np.testing.assert_allclose(batch.targets[:, -1, 0], expect)
    assert batch.mask.sum() == 20 and batch.mask[:, -1].all()


def test_ar2_filter_by_hand():
    y = ar2_filter(np.array([1.0, 0.0, 0.0]), 0.6, -0.2)
    np.testing.assert_allclose(y, [1.0, 0.6, 0.36 - 0.2])


def test_ar2_unstable_rejected():
    with pytest.raises(TaskError):
        generate(TaskSpec("ar2", 10, {"a": 1.5, "b": 0.0}), 1)


def test_ar2_targets_follow_recursion():
    batch = generate(TaskSpec("ar2", 50, seed=2), 1)
    u, y = batch.inputs[0, :, 0], batch.targets[0, :, 0]
    np.testing.assert_allclose(y[2:], 0.6 * y[1:-1] - 0.2 * y[:-2] + u[2:], atol=1e-14)


def test_delay_sum():
    batch = generate(TaskSpec("delay_sum", 30, {"d1": 2, "d2": 5}, seed=3), 1)
    u, y = batch.inputs[0, :, 0], batch.targets[0, :, 0]
    np.testing.assert_allclose(y[5:], u[3:-2] + u[:-5])
    assert not batch.mask[0, :5].any() and batch.mask[0, 5:].all()
    with pytest.raises(TaskError):
        generate(TaskSpec("delay_sum", 10, {"d1": 2, "d2": 10}), 1)


def test_moving_average():
    batch = generate(TaskSpec("moving_average", 20, {"window": 4}, seed=4), 1)
    u, y = batch.inputs[0, :, 0], batch.targets[0, :, 0]
    np.testing.assert_allclose(y[6], u[3:7].mean())
    np.testing.assert_allclose(y[1], (u[0] + u[1]) / 4)
    assert batch.mask[0].sum() == 16


def test_narma10_by_hand():
    u = np.full(12, 0.2)
    y = narma10_series(u)
    assert y[1] == pytest.approx(0.1)
    assert y[2] == pytest.approx(0.3 * 0.1 + 0.05 * 0.1 * 0.1 + 0.1)
    # u(t-9) enters once t >= 9
    y10 = 0.3 * y[9] + 0.05 * y[9] * y[0:10].sum() + 1.5 * 0.04 + 0.1
    assert y[10] == pytest.approx(y10)


def test_narma10_retries_then_fails():
    spec = TaskSpec("narma10", 40, {"divergence_bound": 1e-6, "max_retries": 2})
    with pytest.raises(TaskError, match="retries"):
        generate(spec, 1)
    ok = generate(TaskSpec("narma10", 40, seed=1), 3)
    assert ok.mask[0, :10].sum() == 0 and np.all(np.abs(ok.targets) < 1e3)


def test_unknown_task():
    with pytest.raises(TaskError):
        TaskSpec("copy")


def test_csv_roundtrip(tmp_path):
    batch = generate(TaskSpec("adding", 5, seed=0), 2)
    path = tmp_path / "b.csv"
    write_batch_csv(batch, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "seq_id,t,u0,u1,target,mask"
    assert len(lines) == 11
    assert float(lines[1].split(",")[2]) == batch.inputs[0, 0, 0]


class _StubRng:
    """Returns fixed draws, standing in for a Generator."""

    def __init__(self, uniform, choice=None):
        self._uniform = np.asarray(uniform, dtype=float)
        self._choice = choice

    def uniform(self, lo, hi, size):
        return self._uniform[:size].copy()

    def choice(self, n, size, replace):
        return np.asarray(self._choice)


def test_delay_sum_zero_inputs_zero_targets():
    from gatelab.tasks import delay_sum_sequence
    _, y, _ = delay_sum_sequence(_StubRng(np.zeros(20)), 20, 3, 10)
    assert not y.any()


def test_adding_definitional_sum():
    from gatelab.tasks import adding_sequence
    vals = np.full(10, 0.9)
    vals[3], vals[7] = 0.2, 0.5
    u, y, mask = adding_sequence(_StubRng(vals, [3, 7]), 10)
    assert y[-1, 0] == pytest.approx(0.7, abs=1e-15)
    assert u[3, 1] == u[7, 1] == 1.0 and u[:, 1].sum() == 2


def test_narma10_first_targets_against_scalar_oracle():
    from gatelab.tasks import sequence_rng
    spec = TaskSpec("narma10", 15, seed=42)
    batch = generate(spec, 1)
    u = list(sequence_rng(42, 0).uniform(0.0, 0.5, 15))
    np.testing.assert_array_equal(batch.inputs[0, :, 0], u)
    y = [0.0] * 16
    for t in range(15):
        s = 0.0
        for i in range(10):
            if t - i >= 0:
                s += y[t - i]
        lagged = u[t - 9] if t >= 9 else 0.0
        y[t + 1] = 0.3 * y[t] + 0.05 * y[t] * s + 1.5 * lagged * u[t] + 0.1
    np.testing.assert_allclose(batch.targets[0, :, 0], y[1:], rtol=0, atol=1e-12)

"""
Toy flow matching: data, the velocity model, guidance, the solvers,
losses, EMA and the optimizer
"""

import numpy as np
import pytest

from utils.autodiff import Tensor, grad_check
from utils.flow import (
    GMM_MODES,
    NULL_LABEL,
    Adam,
    FlowModel,
    cfg_velocity,
    drop_labels,
    ema_update,
    energy_distance,
    model_velocity,
    ode_solve,
    pseudo_huber,
    sample,
    sample_toy_data,
    sinusoidal_features,
    squared_error,
    student_predict,
)


@pytest.fixture
def make_model():
    def _make_model(w_embedded=False, seed=0):
        return FlowModel(hidden=16, layers=3, freqs=4, w_embedded=w_embedded, seed=seed)

    return _make_model


@pytest.fixture
def batch():
    return sample_toy_data("gmm8", 32, seed=5)


def test_toy_data_is_deterministic():
    first = sample_toy_data("checkerboard", 100, seed=1)
    second = sample_toy_data("checkerboard", 100, seed=1)
    np.testing.assert_array_equal(first.points, second.points)
    assert not np.array_equal(first.points, sample_toy_data("checkerboard", 100, seed=2).points)


def test_gmm8():
    data = sample_toy_data("gmm8", 2000, seed=0)
    radii = np.linalg.norm(data.points, axis=1)
    assert np.all(np.abs(radii - 1.0) < 0.3)
    assert set(data.components.tolist()) == set(range(GMM_MODES))
    np.testing.assert_array_equal(data.labels, data.components % 2)


def test_checkerboard():
    data = sample_toy_data("checkerboard", 2000, seed=0)
    assert np.all(np.abs(data.points) <= 2.0)
    col = np.floor(data.points[:, 0]).astype(int)
    row = np.floor(data.points[:, 1]).astype(int)
    # only every other square is populated
    assert len(set(((col + row) % 2).tolist())) == 1
    np.testing.assert_array_equal(data.labels, col % 2)


def test_toy_data_rejects():
    with pytest.raises(ValueError) as exc_info:
        sample_toy_data("swissroll", 10, seed=0)
    assert "swissroll" in str(exc_info.value)
    with pytest.raises(ValueError):
        sample_toy_data("gmm8", 0, seed=0)
    assert (sample_toy_data("gmm8", 10, 0, conditional=False).labels == NULL_LABEL).all()


def test_drop_labels():
    labels = np.zeros(10000, dtype=np.int64)
    dropped = drop_labels(labels, 0.1, np.random.default_rng(0))
    assert (labels == 0).all()
    assert np.mean(dropped == NULL_LABEL) == pytest.approx(0.1, abs=0.02)


def test_sinusoidal_features():
    features = sinusoidal_features(0.0, 3, 4)
    assert features.shape == (3, 8)
    np.testing.assert_array_equal(features[:, :4], 0.0)
    np.testing.assert_array_equal(features[:, 4:], 1.0)


def test_model_shapes(make_model, batch):
    model = make_model()
    v = model(batch.points, 0.5, batch.labels)
    assert v.shape == (32, 2)
    v, hidden = model(batch.points, np.full(32, 0.5), batch.labels, taps=True)
    assert [h.shape for h in hidden] == [(32, 16)] * 3
    assert model.num_parameters() > 0


def test_model_rejects(make_model, batch):
    model = make_model()
    with pytest.raises(ValueError) as exc_info:
        model(batch.points, 0.5, batch.labels, w=2.0)
    assert "guidance" in str(exc_info.value)
    with pytest.raises(ValueError):
        make_model(w_embedded=True)(batch.points, 0.5, batch.labels)
    with pytest.raises(ValueError):
        model(batch.points, 0.5, np.full(32, 2))
    with pytest.raises(ValueError):
        FlowModel(layers=0)


def test_w_embedding_starts_neutral(make_model, batch):
    teacher = make_model()
    student = teacher.with_w_embedding()
    assert not teacher.w_embedded and student.w_embedded
    np.testing.assert_array_equal(
        student(batch.points, 0.3, batch.labels, w=4.0).data,
        teacher(batch.points, 0.3, batch.labels).data,
    )
    with pytest.raises(ValueError):
        student.add_w_embedding()


def test_cfg_velocity_endpoints(make_model, batch):
    model = make_model()
    x, c = batch.points, batch.labels
    np.testing.assert_array_equal(cfg_velocity(model, x, 0.4, c, 1.0).data, model(x, 0.4, c).data)
    np.testing.assert_array_equal(
        cfg_velocity(model, x, 0.4, c, 0.0).data, model(x, 0.4, np.full(32, NULL_LABEL)).data
    )
    with pytest.raises(ValueError):
        cfg_velocity(model, x, 0.4, c, np.inf)


def test_ode_solve_constant_velocity():
    x = np.zeros((4, 2))
    out = ode_solve(lambda x, t: np.ones_like(x), x, 1.0, 0.0, 10)
    # integrating downwards moves against the velocity
    np.testing.assert_allclose(out, -1.0)
    with pytest.raises(ValueError):
        ode_solve(lambda x, t: x, x, 0.0, 1.0, 4)
    with pytest.raises(ValueError):
        ode_solve(lambda x, t: x, x, 1.0, 0.0, 0)


def test_student_predict(make_model, batch):
    student = make_model(w_embedded=True)
    x = batch.points
    same = student_predict(student, x, 0.5, 0.5, batch.labels, w=3.0)
    np.testing.assert_array_equal(same.data, x)

    step = student_predict(student, x, 0.5, 0.25, batch.labels, w=3.0)
    v = student(x, 0.5, batch.labels, 3.0).data
    np.testing.assert_allclose(step.data, x - 0.25 * v)
    with pytest.raises(ValueError):
        student_predict(student, x, 0.25, 0.5, batch.labels, w=3.0)


def test_sample(make_model):
    teacher = make_model()
    points = sample(teacher, 16, 0, nfe=4, w=2.0, seed=1)
    assert points.shape == (16, 2)
    np.testing.assert_array_equal(points, sample(teacher, 16, 0, nfe=4, w=2.0, seed=1))

    student = teacher.with_w_embedding()
    # with a neutral embedding one-step student and one Euler step of the teacher agree
    np.testing.assert_allclose(
        sample(student, 16, 0, nfe=1, w=1.0, seed=1),
        sample(teacher, 16, 0, nfe=1, w=1.0, seed=1),
    )


def test_model_velocity(make_model, batch):
    model = make_model()
    guided = model_velocity(model, batch.labels, w=1.0, guided=True)
    plain = model_velocity(model, batch.labels)
    np.testing.assert_array_equal(guided(batch.points, 0.7), plain(batch.points, 0.7))


def test_energy_distance():
    a = np.zeros((2, 2))
    b = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert energy_distance(a, b) == pytest.approx(2.0)

    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((50, 2)), rng.standard_normal((60, 2)) + 1.0
    assert energy_distance(x, y) == pytest.approx(energy_distance(y, x))
    assert energy_distance(x, x) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        energy_distance(x[:1], y)


def test_pseudo_huber():
    c = 0.5
    a = np.array([[c, 0.0], [0.0, 0.0]])
    loss = pseudo_huber(a, np.zeros((2, 2)), c)
    np.testing.assert_allclose(loss.data, [c * (np.sqrt(2) - 1), 0.0])
    with pytest.raises(ValueError):
        pseudo_huber(a, a, 0.0)

    x = Tensor(np.random.default_rng(3).standard_normal((5, 2)), requires_grad=True)
    assert grad_check(lambda: pseudo_huber(x, 0.1, 1e-3).sum(), [x]) <= 1e-4
    np.testing.assert_allclose(squared_error(a, 0.0).data, [c * c, 0.0])


def test_ema_update(make_model):
    target, online = make_model(seed=1), make_model(seed=2)
    start = target.state_dict()
    decay = 0.9
    ema_update(target, online, decay)
    ema_update(target, online, decay)
    for name, value in target.state_dict().items():
        expected = decay**2 * start[name] + (1 - decay**2) * online.params[name].data
        np.testing.assert_allclose(value, expected)

    with pytest.raises(ValueError):
        ema_update(target, online, 1.5)
    with pytest.raises(ValueError):
        ema_update(target, online.with_w_embedding(), 0.5)


def test_adam_first_step():
    p = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    frozen = Tensor([5.0], requires_grad=True)
    optimizer = Adam({"p": p, "frozen": frozen}, lr=0.1)
    (p * Tensor([2.0, -3.0, 0.5])).sum().backward()
    optimizer.step()
    # the first bias-corrected step moves every coordinate by lr against the gradient sign
    np.testing.assert_allclose(p.data, [0.9, -1.9, 2.9], atol=1e-6)
    assert frozen.data.tolist() == [5.0]
    optimizer.zero_grad()
    assert p.grad is None


def test_adam_minimizes():
    x = Tensor([3.0, -4.0], requires_grad=True)
    optimizer = Adam({"x": x}, lr=0.1)
    for _ in range(300):
        optimizer.zero_grad()
        (x * x).sum().backward()
        optimizer.step()
    assert np.abs(x.data).max() < 0.1


def test_state_dict(make_model):
    model, other = make_model(seed=1), make_model(seed=2)
    other.load_state_dict(model.state_dict())
    for name, value in model.state_dict().items():
        np.testing.assert_array_equal(other.params[name].data, value)

    state = model.state_dict()
    state.pop("out.bias")
    with pytest.raises(ValueError) as exc_info:
        other.load_state_dict(state)
    assert "out.bias" in str(exc_info.value)

    state = model.state_dict()
    state["out.bias"] = np.zeros(3)
    with pytest.raises(ValueError):
        other.load_state_dict(state)
    assert FlowModel.from_config(model.config()).config() == model.config()

from __future__ import annotations

import csv

import numpy as np
import pytest

from src.equidesc.config import Preset, TrainConfig
from src.equidesc.core import PointCloud
from src.equidesc.errors import EmptyDatasetError, InvalidInputError, NonFiniteGradientError
from src.equidesc.network import ModelWeights, init_weights, make_fold_grid
from src.equidesc.signal import build_spherical_signal
from src.equidesc.train import (
    AdamState,
    GradientTape,
    NeighborhoodDataset,
    adam_step,
    chamfer_loss,
    chamfer_loss_and_grad,
    learning_rate_at,
    sample_loss_and_gradients,
    train,
    write_loss_csv,
)

from tests.helpers import as_float64, planar_patch


def _tiny_preset(tiny_support, tiny_encoder, tiny_decoder, **train_overrides):
    options = dict(batch_size=2, max_iterations=3, max_points=64, seed=5)
    options.update(train_overrides)
    return Preset(
        name="tiny",
        support=tiny_support,
        encoder=tiny_encoder,
        decoder=tiny_decoder,
        train=TrainConfig(**options),
    )


def _tiny_dataset(rng, n=4):
    return NeighborhoodDataset([planar_patch(rng, radius=0.3, n=40) for _ in range(n)])


# Chamfer


def test_chamfer_identical_sets_is_zero(rng):
    points = rng.standard_normal((30, 3))
    assert chamfer_loss(points, points) == 0.0


def test_chamfer_two_single_points():
    assert chamfer_loss([[0.0, 0.0, 0.0]], [[1.0, 0.0, 0.0]]) == pytest.approx(2.0)


def test_chamfer_matches_brute_force(rng):
    a, b = rng.standard_normal((50, 3)), rng.standard_normal((60, 3))
    forward = np.mean([min(np.linalg.norm(p - q) for q in b) for p in a])
    reverse = np.mean([min(np.linalg.norm(p - q) for p in a) for q in b])
    assert chamfer_loss(a, b) == pytest.approx(forward + reverse, rel=1e-12)
    assert chamfer_loss(a, b) == pytest.approx(chamfer_loss(b, a), rel=1e-12)


def test_chamfer_accepts_point_clouds(rng):
    a = rng.standard_normal((5, 3))
    assert chamfer_loss(PointCloud(a), a) == 0.0


def test_chamfer_tie_uses_lowest_index():
    predicted = np.zeros((1, 3))
    target = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
    loss, grad = chamfer_loss_and_grad(predicted, target)
    assert loss == pytest.approx(2.0)
    assert np.allclose(grad, [[-1.0, 0.0, 0.0]])


def test_chamfer_rejects_empty_sets():
    with pytest.raises(InvalidInputError):
        chamfer_loss(np.zeros((0, 3)), np.zeros((2, 3)))


def test_chamfer_gradient_matches_finite_differences(rng):
    a, b = rng.standard_normal((8, 3)), rng.standard_normal((11, 3))
    _, grad = chamfer_loss_and_grad(a, b)
    h = 1e-6
    for i, j in [(0, 0), (3, 1), (7, 2)]:
        up, down = a.copy(), a.copy()
        up[i, j] += h
        down[i, j] -= h
        fd = (chamfer_loss(up, b) - chamfer_loss(down, b)) / (2 * h)
        assert grad[i, j] == pytest.approx(fd, abs=1e-6)


# Backward


def _tiny_sample(rng, support):
    patch = planar_patch(rng, radius=0.25, n=20)
    points = patch.points + rng.normal(0.0, 0.02, patch.points.shape)
    values = build_spherical_signal(PointCloud(points), np.zeros(3), support).values
    return values, points / support.radius


def test_gradients_match_finite_differences(tiny_weights, rng):
    weights = as_float64(tiny_weights)
    # non-zero biases so no rectifier sits exactly at its kink
    for name in weights.names():
        if name.endswith(".bias"):
            weights.tensors[name] = rng.normal(0.0, 0.1, weights.tensors[name].shape)
    grid = make_fold_grid(16)
    values, target = _tiny_sample(rng, weights.support)
    _, grads = sample_loss_and_gradients(values, target, weights, grid)

    def loss_with(name, flat_index, delta):
        tensors = {k: v.copy() for k, v in weights.tensors.items()}
        tensors[name].flat[flat_index] += delta
        perturbed = ModelWeights(weights.support, weights.encoder, weights.decoder, tensors)
        return chamfer_loss(GradientTape.record(values, perturbed, grid).output, target)

    names = weights.names()
    h = 1e-4
    for _ in range(50):
        name = names[rng.integers(len(names))]
        flat_index = int(rng.integers(weights.tensors[name].size))
        fd = (loss_with(name, flat_index, h) - loss_with(name, flat_index, -h)) / (2 * h)
        analytic = grads[name].flat[flat_index]
        scale = max(abs(fd), abs(analytic), 1e-4)
        assert abs(fd - analytic) / scale < 1e-3, name


def test_zero_upstream_gives_zero_gradients(tiny_weights, rng):
    values, _ = _tiny_sample(rng, tiny_weights.support)
    tape = GradientTape.record(values, tiny_weights, make_fold_grid(16))
    grads = tape.backward(np.zeros_like(tape.output))
    assert set(grads) == set(tiny_weights.names())
    for name, grad in grads.items():
        assert grad.shape == tiny_weights.tensors[name].shape
        assert not grad.any()


def test_non_finite_gradient_names_the_tensor(tiny_weights, rng):
    values, _ = _tiny_sample(rng, tiny_weights.support)
    tape = GradientTape.record(values, tiny_weights, make_fold_grid(16))
    with pytest.raises(NonFiniteGradientError) as excinfo:
        tape.backward(np.full_like(tape.output, np.nan))
    assert excinfo.value.tensor_name in tiny_weights.names()


# Optimizer


def test_adam_first_step():
    params, state = adam_step({"x": np.array(0.0)}, {"x": np.array(1.0)}, AdamState(), lr=0.001)
    assert float(params["x"]) == pytest.approx(-0.001, rel=1e-6)
    assert state.step == 1


def test_adam_zero_gradient_keeps_parameters():
    params = {"w": np.array([1.5, -2.0], dtype=np.float32)}
    state = AdamState()
    for _ in range(20):
        params, state = adam_step(params, {"w": np.zeros(2)}, state, lr=0.01)
    assert np.array_equal(params["w"], np.array([1.5, -2.0], dtype=np.float32))
    assert params["w"].dtype == np.float32


def test_adam_descends_a_quadratic_bowl():
    params, state = {"x": np.array(1.0)}, AdamState()
    trajectory = []
    for _ in range(500):
        params, state = adam_step(params, {"x": 2.0 * params["x"]}, state, lr=0.01)
        trajectory.append(abs(float(params["x"])))
    assert all(later < earlier for earlier, later in zip(trajectory[:50], trajectory[1:50]))
    assert max(trajectory[-100:]) < 0.01


def test_adam_rejects_misshaped_gradient():
    with pytest.raises(InvalidInputError):
        adam_step({"x": np.zeros(3)}, {"x": np.zeros(2)}, AdamState(), lr=0.1)


def test_learning_rate_decay():
    config = TrainConfig(learning_rate=0.001, decay_interval=100, decay_factor=0.5)
    assert learning_rate_at(0, config) == 0.001
    assert learning_rate_at(99, config) == 0.001
    assert learning_rate_at(100, config) == pytest.approx(0.0005)
    assert learning_rate_at(250, config) == pytest.approx(0.00025)


# Loop


def test_training_is_deterministic(tiny_support, tiny_encoder, tiny_decoder, rng):
    preset = _tiny_preset(tiny_support, tiny_encoder, tiny_decoder)
    dataset = _tiny_dataset(rng)
    runs = []
    for threads in (1, 2):
        weights = init_weights(tiny_support, tiny_encoder, tiny_decoder, np.random.default_rng(0))
        runs.append(train(dataset, preset, weights, threads=threads))
    assert [r.loss for r in runs[0].history] == [r.loss for r in runs[1].history]
    assert [r.iteration for r in runs[0].history] == [0, 1, 2]
    assert runs[0].weights.state == {"iteration": 3}
    for name in runs[0].weights.names():
        assert np.array_equal(runs[0].weights.tensors[name], runs[1].weights.tensors[name])


def test_training_resumes_iteration_count(tiny_support, tiny_encoder, tiny_decoder, tiny_weights, rng):
    preset = _tiny_preset(tiny_support, tiny_encoder, tiny_decoder, max_iterations=5)
    tiny_weights.state["iteration"] = 3
    seen = []
    result = train(_tiny_dataset(rng), preset, tiny_weights, on_iteration=seen.append)
    assert [r.iteration for r in result.history] == [3, 4]
    assert seen == result.history
    assert result.weights.state == {"iteration": 5}


def test_training_changes_weights(tiny_support, tiny_encoder, tiny_decoder, tiny_weights, rng):
    preset = _tiny_preset(tiny_support, tiny_encoder, tiny_decoder, max_iterations=1)
    result = train(_tiny_dataset(rng), preset, tiny_weights)
    assert not np.array_equal(result.weights.tensors["dec3.bias"], tiny_weights.tensors["dec3.bias"])


def test_empty_dataset_is_rejected(tiny_support, tiny_encoder, tiny_decoder, tiny_weights):
    preset = _tiny_preset(tiny_support, tiny_encoder, tiny_decoder)
    with pytest.raises(EmptyDatasetError):
        train(NeighborhoodDataset([]), preset, tiny_weights)


def test_dataset_from_fragments(rng):
    fragment = planar_patch(rng, radius=1.0, n=2000)
    dataset = NeighborhoodDataset.from_fragments([fragment], 0.3, 5, 0.02, rng)
    assert len(dataset) == 5
    for neighborhood in dataset.neighborhoods:
        assert np.all(np.linalg.norm(neighborhood.points, axis=1) <= 0.3)


def test_loss_csv(tmp_path, tiny_support, tiny_encoder, tiny_decoder, tiny_weights, rng):
    preset = _tiny_preset(tiny_support, tiny_encoder, tiny_decoder, max_iterations=2)
    result = train(_tiny_dataset(rng), preset, tiny_weights)
    path = write_loss_csv(result.history, tmp_path / "loss.csv")
    with path.open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["iteration", "lr", "loss"]
    assert [row[0] for row in rows[1:]] == ["0", "1"]


@pytest.mark.slow
def test_overfits_a_single_sample(desk_support, desk_encoder, desk_decoder, desk_weights):
    rng = np.random.default_rng(11)
    preset = Preset(
        name="overfit",
        support=desk_support,
        encoder=desk_encoder,
        decoder=desk_decoder,
        train=TrainConfig(batch_size=1, max_iterations=200, augment_rotation=False, seed=2),
    )
    patch = planar_patch(rng, radius=0.3, n=400)
    bumped = patch.points.copy()
    bumped[:, 2] = 0.1 * np.exp(-(bumped[:, 0] ** 2 + bumped[:, 1] ** 2) / 0.02)
    result = train(NeighborhoodDataset([PointCloud(bumped)]), preset, desk_weights)
    assert result.history[-1].loss < 0.5 * result.history[0].loss

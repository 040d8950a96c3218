"""Unsupervised training of the encoder-decoder by Chamfer reconstruction.

Gradients are computed in reverse mode by hand. Spectral coefficients carry
complex gradients in the convention g = dL/dRe + i dL/dIm; every correlation
layer is linear in its filter, so filter gradients are themselves
correlations of upstream gradients with the layer input.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from .bench import sample_keypoints, voxel_downsample
from .config import Preset, SupportSpec, TrainConfig
from .core import PointCloud, sample_uniform_rotation
from .errors import (
    EmptyDatasetError,
    InvalidInputError,
    NonFiniteGradientError,
    NonFiniteLossError,
)
from .harmonic import (
    s2_analysis_adjoint,
    so3_analysis_adjoint,
    so3_synthesis_adjoint,
)
from .network import (
    DecoderTrace,
    EncoderTrace,
    FoldGrid,
    ModelWeights,
    Spectra,
    decode,
    encode,
    filter_spectra,
    make_fold_grid,
)
from .signal import build_spherical_signal, extract_neighborhood, rotate_point_cloud


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def _as_points(cloud) -> np.ndarray:
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    return points.reshape(-1, 3)


def chamfer_loss_and_grad(predicted: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Symmetric Chamfer distance (unsquared) and its gradient w.r.t. `predicted`.

    Ties go to the lowest-index neighbour; coincident pairs contribute a zero
    subgradient.
    """
    if not len(predicted) or not len(target):
        raise InvalidInputError("Chamfer loss needs two non-empty point sets")
    dist = cdist(predicted, target)
    nn_target = np.argmin(dist, axis=1)
    nn_pred = np.argmin(dist, axis=0)
    rows = np.arange(len(predicted))
    cols = np.arange(len(target))
    d_pred = dist[rows, nn_target]
    d_target = dist[nn_pred, cols]
    loss = float(d_pred.mean() + d_target.mean())

    grad = np.zeros_like(predicted)
    diff = predicted - target[nn_target]
    scale = np.where(d_pred > 0, 1.0 / np.where(d_pred > 0, d_pred, 1.0), 0.0)
    grad += diff * scale[:, None] / len(predicted)
    diff = predicted[nn_pred] - target
    scale = np.where(d_target > 0, 1.0 / np.where(d_target > 0, d_target, 1.0), 0.0)
    np.add.at(grad, nn_pred, diff * scale[:, None] / len(target))
    return loss, grad


def chamfer_loss(s, s_star) -> float:
    loss, _ = chamfer_loss_and_grad(_as_points(s), _as_points(s_star))
    return loss


# ---------------------------------------------------------------------------
# Reverse mode
# ---------------------------------------------------------------------------


@dataclass
class GradientTape:
    """Forward intermediates of one sample, enough to differentiate a loss on
    the decoder output w.r.t. every weight."""

    weights: ModelWeights
    spectra: Spectra
    grid: FoldGrid
    encoder: EncoderTrace
    decoder: DecoderTrace

    @classmethod
    def record(
        cls,
        values: np.ndarray,
        weights: ModelWeights,
        grid: FoldGrid,
        spectra: Optional[Spectra] = None,
    ) -> "GradientTape":
        spectra = filter_spectra(weights) if spectra is None else spectra
        enc = encode(values, weights, spectra)
        dec = decode(enc.layers[-1].output.ravel(), grid, weights)
        return cls(weights, spectra, grid, enc, dec)

    @property
    def output(self) -> np.ndarray:
        return self.decoder.output

    @property
    def descriptor(self) -> np.ndarray:
        return self.encoder.layers[-1].output.ravel()

    def backward(self, grad_output: np.ndarray) -> Dict[str, np.ndarray]:
        grads: Dict[str, np.ndarray] = {}
        grad_descriptor = self._decoder_backward(grad_output, grads)
        self._encoder_backward(grad_descriptor, grads)
        for name in self.weights.names():
            if not np.all(np.isfinite(grads[name])):
                raise NonFiniteGradientError(name)
        return grads

    def _decoder_backward(self, grad_output: np.ndarray, grads: Dict[str, np.ndarray]) -> np.ndarray:
        w = self.weights
        trace = self.decoder
        grad_pre = grad_output * (1.0 - trace.output ** 2)
        for idx in range(len(trace.pre_activations) - 1, 0, -1):
            grads[f"dec{idx}.weight"] = trace.inputs[idx].T @ grad_pre
            grads[f"dec{idx}.bias"] = grad_pre.sum(axis=0)
            grad_act = grad_pre @ w.get(f"dec{idx}.weight").T
            grad_pre = grad_act * (trace.pre_activations[idx - 1] > 0)
        d_len = w.encoder.descriptor_length
        summed = grad_pre.sum(axis=0)
        w0 = w.get("dec0.weight")
        grads["dec0.weight"] = np.concatenate(
            [np.outer(self.descriptor, summed), trace.inputs[0].T @ grad_pre], axis=0
        )
        grads["dec0.bias"] = summed
        return w0[:d_len] @ summed

    def _encoder_backward(self, grad_descriptor: np.ndarray, grads: Dict[str, np.ndarray]) -> None:
        layers = self.encoder.layers
        last = len(layers) - 1
        grad_out = grad_descriptor.reshape(layers[-1].output.shape)
        for idx in range(last, -1, -1):
            layer = layers[idx]
            b_in, b_out = self.weights.encoder.layer_bandwidths[idx]
            grad_pre = grad_out if idx == last else grad_out * (layer.pre_activation > 0)
            grads[f"enc{idx}.bias"] = grad_pre.sum(axis=(1, 2, 3))
            grad_coeffs = so3_synthesis_adjoint(grad_pre, b_out)
            psi_hat = self.spectra[idx]
            x_hat = layer.input_spectrum
            if idx == 0:
                grad_psi = [
                    np.einsum("opm,cp->ocm", np.conj(g), x_hat[l]) / (2 * l + 1)
                    for l, g in enumerate(grad_coeffs)
                ]
                grads["enc0.filter"] = s2_analysis_adjoint(grad_psi, b_in)
                continue
            grad_psi = [
                np.einsum("opm,cpn->ocmn", np.conj(g), x_hat[l]) / (2 * l + 1)
                for l, g in enumerate(grad_coeffs)
            ]
            grads[f"enc{idx}.filter"] = so3_analysis_adjoint(grad_psi, b_in)
            grad_x = [
                np.einsum("opm,ocmn->cpn", g, psi_hat[l]) / (2 * l + 1)
                for l, g in enumerate(grad_coeffs)
            ]
            grad_out = so3_analysis_adjoint(grad_x, b_in)


def backward(tape: GradientTape, grad_output: np.ndarray) -> Dict[str, np.ndarray]:
    return tape.backward(grad_output)


def sample_loss_and_gradients(
    values: np.ndarray,
    target: np.ndarray,
    weights: ModelWeights,
    grid: FoldGrid,
    spectra: Optional[Spectra] = None,
) -> Tuple[float, Dict[str, np.ndarray]]:
    """Chamfer loss of one reconstruction and the gradients of every weight."""
    tape = GradientTape.record(values, weights, grid, spectra)
    loss, grad_points = chamfer_loss_and_grad(tape.output, target)
    return loss, tape.backward(grad_points)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One bias-corrected ADAM update; parameters keep their dtype."""
    t = state.step + 1
    new_params: Dict[str, np.ndarray] = {}
    new_m: Dict[str, np.ndarray] = {}
    new_v: Dict[str, np.ndarray] = {}
    for name, param in params.items():
        grad = np.asarray(grads[name], dtype=np.float64)
        if grad.shape != np.shape(param):
            raise InvalidInputError(f"{name}: gradient shape {grad.shape} != {np.shape(param)}")
        m = ADAM_BETA1 * state.m.get(name, 0.0) + (1 - ADAM_BETA1) * grad
        v = ADAM_BETA2 * state.v.get(name, 0.0) + (1 - ADAM_BETA2) * grad ** 2
        m_hat = m / (1 - ADAM_BETA1 ** t)
        v_hat = v / (1 - ADAM_BETA2 ** t)
        updated = np.asarray(param, dtype=np.float64) - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        new_params[name] = updated.astype(np.asarray(param).dtype)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(new_m, new_v, t)


def learning_rate_at(iteration: int, config: TrainConfig) -> float:
    return config.learning_rate * config.decay_factor ** (iteration // config.decay_interval)


# ---------------------------------------------------------------------------
# Data and loop
# ---------------------------------------------------------------------------


class NeighborhoodDataset:
    """Training neighborhoods, each expressed relative to its keypoint."""

    def __init__(self, neighborhoods: Sequence[PointCloud]):
        self.neighborhoods = [n for n in neighborhoods if len(n)]

    def __len__(self) -> int:
        return len(self.neighborhoods)

    def __getitem__(self, idx: int) -> PointCloud:
        return self.neighborhoods[idx]

    @classmethod
    def from_fragments(
        cls,
        fragments: Iterable[PointCloud],
        radius: float,
        keypoints_per_fragment: int,
        voxel: float,
        rng: np.random.Generator,
    ) -> "NeighborhoodDataset":
        neighborhoods: List[PointCloud] = []
        for fragment in fragments:
            cloud = voxel_downsample(fragment, voxel)
            for idx in sample_keypoints(cloud, keypoints_per_fragment, rng):
                neighborhoods.append(extract_neighborhood(cloud, cloud.points[idx], radius))
        return cls(neighborhoods)


@dataclass(frozen=True)
class TrainRecord:
    iteration: int
    lr: float
    loss: float


@dataclass
class TrainResult:
    weights: ModelWeights
    history: List[TrainRecord]


def total_iterations(n_samples: int, config: TrainConfig) -> int:
    if config.max_iterations is not None:
        return config.max_iterations
    return config.epochs * math.ceil(n_samples / config.batch_size)


def _batches(n_samples: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of batches; each epoch is a fresh permutation."""
    while True:
        order = rng.permutation(n_samples)
        for start in range(0, n_samples, batch_size):
            yield order[start : start + batch_size]


def prepare_sample(
    neighborhood: PointCloud,
    support: SupportSpec,
    config: TrainConfig,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    """Input signal values and normalized reconstruction target for one sample."""
    cloud = neighborhood
    if len(cloud) > config.max_points:
        keep = np.sort(rng.choice(len(cloud), size=config.max_points, replace=False))
        cloud = cloud.subset(keep)
    if config.augment_rotation:
        cloud = rotate_point_cloud(cloud, sample_uniform_rotation(rng), np.zeros(3))
    signal = build_spherical_signal(cloud, np.zeros(3), support)
    return signal.values, cloud.points / support.radius


def train(
    dataset: NeighborhoodDataset,
    preset: Preset,
    weights: ModelWeights,
    threads: int = 1,
    on_iteration: Optional[Callable[[TrainRecord], None]] = None,
) -> TrainResult:
    """Mini-batch ADAM on the Chamfer reconstruction loss.

    Resumes from `weights.state["iteration"]` when present; optimizer moments
    start fresh. Deterministic for a fixed seed regardless of `threads`.
    """
    if not len(dataset):
        raise EmptyDatasetError("Training needs at least one neighborhood")
    config = preset.train
    start = int(weights.state.get("iteration", 0))
    seed = [config.seed, start] if start else config.seed
    rng = np.random.default_rng(seed)
    grid = make_fold_grid(preset.decoder.grid_size)
    state = AdamState()
    history: List[TrainRecord] = []
    batches = _batches(len(dataset), config.batch_size, rng)
    end = total_iterations(len(dataset), config)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        for iteration in range(start, end):
            batch = next(batches)
            samples = [prepare_sample(dataset[i], weights.support, config, rng) for i in batch]
            spectra = filter_spectra(weights)

            def run(sample):
                return sample_loss_and_gradients(sample[0], sample[1], weights, grid, spectra)

            results = list(pool.map(run, samples))
            losses = [loss for loss, _ in results]
            for i, loss in zip(batch, losses):
                if not math.isfinite(loss):
                    raise NonFiniteLossError(
                        f"Loss became {loss} at iteration {iteration} (sample {int(i)})"
                    )
            grads = {
                name: sum(g[name] for _, g in results) / len(results) for name in weights.names()
            }
            lr = learning_rate_at(iteration, config)
            params, state = adam_step(weights.tensors, grads, state, lr)
            weights = ModelWeights(
                weights.support, weights.encoder, weights.decoder, params, {"iteration": iteration + 1}
            )
            record = TrainRecord(iteration, lr, float(np.mean(losses)))
            history.append(record)
            if on_iteration is not None:
                on_iteration(record)
    return TrainResult(weights, history)


def write_loss_csv(history: Sequence[TrainRecord], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "lr", "loss"])
        for record in history:
            writer.writerow([record.iteration, f"{record.lr:.10g}", f"{record.loss:.10g}"])
    return path

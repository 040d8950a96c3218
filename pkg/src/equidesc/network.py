"""Spherical encoder, folding decoder and their parameters.

The encoder is one S2 correlation layer followed by SO(3) correlation layers,
each adding a per-channel bias; every layer but the last applies a ReLU. The
flattened final SO(3) map is the descriptor. The decoder maps
(descriptor, a_x, a_y) for every fold-grid sample through four fully
connected layers (ReLU, ReLU, ReLU, tanh) to a point in [-1, 1]^3, in units
of the support radius.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .config import DecoderConfig, EncoderConfig, SupportSpec
from .core import PointCloud, make_dh_grid, make_so3_grid
from .errors import InvalidInputError, ShapeMismatchError
from .harmonic import (
    Backend,
    So3Signal,
    s2_analysis,
    s2_correlate_direct,
    s2_spectral_product,
    so3_analysis,
    so3_correlate_direct,
    so3_spectral_product,
    so3_synthesis,
)
from .signal import SphericalSignal


DECODER_LAYERS = 4
POINT_DIM = 3

# per encoder layer, per degree l: filter coefficient blocks
Spectra = List[List[np.ndarray]]


@dataclass
class ModelWeights:
    """Named tensors plus the configuration that fixes their shapes.

    Tensors are stored as float32 unless given as float64 (gradient checks
    keep double precision).

    Encoder layer i stores `enc{i}.filter` with shape (C_out, C_in, 2b, 2b)
    for the S2 layer or (C_out, C_in, 2b, 2b, 2b) for SO(3) layers, and
    `enc{i}.bias` (C_out,). Decoder layer j stores `dec{j}.weight`
    (in, out) and `dec{j}.bias` (out,).
    """

    support: SupportSpec
    encoder: EncoderConfig
    decoder: DecoderConfig
    tensors: Dict[str, np.ndarray]
    state: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        expected = expected_shapes(self.encoder, self.decoder)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ShapeMismatchError(f"Tensor names differ (missing {missing}, unexpected {extra})")
        for name, shape in expected.items():
            tensor = np.asarray(self.tensors[name])
            if tensor.dtype != np.float64:
                tensor = tensor.astype(np.float32)
            if tensor.shape != shape:
                raise ShapeMismatchError(f"{name}: expected {shape}, got {tensor.shape}")
            if not np.all(np.isfinite(tensor)):
                raise InvalidInputError(f"{name} contains non-finite values")
            self.tensors[name] = tensor

    def names(self) -> List[str]:
        return list(expected_shapes(self.encoder, self.decoder))

    def get(self, name: str) -> np.ndarray:
        """Tensor promoted to float64 for computation."""
        return self.tensors[name].astype(np.float64)

    def parameter_count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))


@dataclass(frozen=True)
class Descriptor:
    values: np.ndarray
    bandwidth: int
    channels: int = 1

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).ravel()
        if values.size != self.channels * (2 * self.bandwidth) ** 3:
            raise ShapeMismatchError(
                f"Descriptor of length {values.size} does not fit bandwidth {self.bandwidth}"
            )
        if not np.all(np.isfinite(values)):
            raise InvalidInputError("Descriptor contains non-finite values")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.size

    def feature_map(self) -> So3Signal:
        n = 2 * self.bandwidth
        return So3Signal(self.values.reshape(self.channels, n, n, n))

    @classmethod
    def from_feature_map(cls, feature_map: So3Signal) -> "Descriptor":
        return cls(feature_map.values.ravel(), feature_map.bandwidth, feature_map.channels)


@dataclass(frozen=True)
class FoldGrid:
    samples: np.ndarray  # (M, 2) in [0, 1]^2

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64).reshape(-1, 2)
        if not len(samples):
            raise InvalidInputError("Fold grid needs at least one sample")
        if np.any(samples < 0.0) or np.any(samples > 1.0):
            raise InvalidInputError("Fold grid samples must lie in the unit square")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return len(self.samples)


def make_fold_grid(m: int) -> FoldGrid:
    """Regular lattice over the unit square, row-major, truncated to m samples."""
    if m < 1:
        raise InvalidInputError(f"Fold grid size must be positive, got {m}")
    side = math.ceil(math.sqrt(m))
    ticks = np.linspace(0.0, 1.0, side) if side > 1 else np.array([0.5])
    ax, ay = np.meshgrid(ticks, ticks, indexing="ij")
    return FoldGrid(np.stack([ax.ravel(), ay.ravel()], axis=1)[:m])


def decoder_widths(encoder: EncoderConfig, decoder: DecoderConfig) -> List[int]:
    return [encoder.descriptor_length + 2, *decoder.hidden, POINT_DIM]


def expected_shapes(encoder: EncoderConfig, decoder: DecoderConfig) -> Dict[str, tuple]:
    shapes: Dict[str, tuple] = {}
    c_in = encoder.input_shells
    for idx, ((b_in, _), c_out) in enumerate(zip(encoder.layer_bandwidths, encoder.channels)):
        n = 2 * b_in
        grid = (n, n) if idx == 0 else (n, n, n)
        shapes[f"enc{idx}.filter"] = (c_out, c_in, *grid)
        shapes[f"enc{idx}.bias"] = (c_out,)
        c_in = c_out
    widths = decoder_widths(encoder, decoder)
    for idx in range(DECODER_LAYERS):
        shapes[f"dec{idx}.weight"] = (widths[idx], widths[idx + 1])
        shapes[f"dec{idx}.bias"] = (widths[idx + 1],)
    return shapes


def fan_in(name: str, shape: tuple) -> float:
    """Effective fan-in of a layer.

    Correlation outputs are quadrature-weighted sums over C_in x grid cells,
    so the fan-in of a filter is C_in * sum(w_cell^2); a dense layer uses its
    input width.
    """
    if name.endswith(".weight"):
        return float(shape[0])
    c_in = shape[1]
    b = shape[-1] // 2
    if len(shape) == 4:
        weights = make_dh_grid(b).cell_weights()
    else:
        weights = make_so3_grid(b).cell_weights()
    return float(c_in * np.sum(weights ** 2))


def init_weights(
    support: SupportSpec,
    encoder: EncoderConfig,
    decoder: DecoderConfig,
    rng: np.random.Generator,
) -> ModelWeights:
    """He-style init: N(0, 2 / fan_in) for filters and matrices, zero biases."""
    if support.shells != encoder.input_shells or support.bandwidth != encoder.input_bandwidth:
        raise ShapeMismatchError("Support spec does not match the encoder's input layer")
    tensors: Dict[str, np.ndarray] = {}
    for name, shape in expected_shapes(encoder, decoder).items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
            continue
        std = math.sqrt(2.0 / fan_in(name, shape))
        tensors[name] = (std * rng.standard_normal(shape)).astype(np.float32)
    return ModelWeights(support, encoder, decoder, tensors)


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------


@dataclass
class LayerTrace:
    """Saved intermediates of one correlation layer."""

    input_spectrum: List[np.ndarray]  # input coefficients for l < b_out
    pre_activation: np.ndarray
    output: np.ndarray


@dataclass
class EncoderTrace:
    layers: List[LayerTrace]


def filter_spectra(weights: ModelWeights) -> Spectra:
    """Filter coefficients of every encoder layer, truncated to the layer's
    output bandwidth. Compute once per weight update and pass to the forward."""
    spectra = []
    for idx, (_, b_out) in enumerate(weights.encoder.layer_bandwidths):
        psi = weights.get(f"enc{idx}.filter")
        analysis = s2_analysis if idx == 0 else so3_analysis
        spectra.append(analysis(psi, degrees=b_out))
    return spectra


def _check_signal(signal: SphericalSignal, encoder: EncoderConfig) -> None:
    if signal.bandwidth != encoder.input_bandwidth or signal.channels != encoder.input_shells:
        raise ShapeMismatchError(
            f"Signal (b={signal.bandwidth}, K={signal.channels}) does not match encoder "
            f"(b={encoder.input_bandwidth}, K={encoder.input_shells})"
        )


def encode(
    values: np.ndarray,
    weights: ModelWeights,
    spectra: Optional[Spectra] = None,
    backend: Backend = "spectral",
) -> EncoderTrace:
    """Run the encoder on raw (K, 2b, 2b) values and keep what backward needs."""
    if spectra is None and backend == "spectral":
        spectra = filter_spectra(weights)
    layers: List[LayerTrace] = []
    current = values
    last = len(weights.encoder.layer_bandwidths) - 1
    for idx, (_, b_out) in enumerate(weights.encoder.layer_bandwidths):
        is_s2 = idx == 0
        if backend == "direct":
            correlate = s2_correlate_direct if is_s2 else so3_correlate_direct
            psi = weights.get(f"enc{idx}.filter")
            correlated = correlate(current, psi, b_out)
            input_spectrum: List[np.ndarray] = []
        else:
            analysis = s2_analysis if is_s2 else so3_analysis
            product = s2_spectral_product if is_s2 else so3_spectral_product
            input_spectrum = analysis(current, degrees=b_out)
            correlated = so3_synthesis(product(input_spectrum, spectra[idx], b_out), b_out)
        bias = weights.get(f"enc{idx}.bias")
        pre = correlated + bias[:, None, None, None]
        out = pre if idx == last else np.maximum(pre, 0.0)
        layers.append(LayerTrace(input_spectrum, pre, out))
        current = out
    return EncoderTrace(layers)


def encoder_forward(
    signal: SphericalSignal,
    weights: ModelWeights,
    spectra: Optional[Spectra] = None,
    backend: Backend = "spectral",
):
    """Descriptor and the post-activation map of every layer."""
    _check_signal(signal, weights.encoder)
    trace = encode(signal.values, weights, spectra, backend)
    intermediates = [So3Signal(layer.output) for layer in trace.layers]
    return Descriptor.from_feature_map(intermediates[-1]), intermediates


# ---------------------------------------------------------------------------
# Decoder
# ---------------------------------------------------------------------------


@dataclass
class DecoderTrace:
    inputs: List[np.ndarray]  # activation entering each layer; entry 0 is the fold grid
    pre_activations: List[np.ndarray]
    output: np.ndarray


def decode(descriptor: np.ndarray, grid: FoldGrid, weights: ModelWeights) -> DecoderTrace:
    d_len = weights.encoder.descriptor_length
    if descriptor.size != d_len:
        raise ShapeMismatchError(f"Descriptor length {descriptor.size}, decoder expects {d_len}")
    w0 = weights.get("dec0.weight")
    # concat(d, a) @ W0 split into the shared descriptor part and the grid part
    shared = descriptor @ w0[:d_len]
    pre = shared[None, :] + grid.samples @ w0[d_len:] + weights.get("dec0.bias")
    inputs = [grid.samples]
    pres = [pre]
    for idx in range(1, DECODER_LAYERS):
        act = np.maximum(pres[-1], 0.0)
        inputs.append(act)
        pres.append(act @ weights.get(f"dec{idx}.weight") + weights.get(f"dec{idx}.bias"))
    return DecoderTrace(inputs, pres, np.tanh(pres[-1]))


def decoder_forward(d: Descriptor, grid: FoldGrid, weights: ModelWeights) -> PointCloud:
    return PointCloud(decode(d.values, grid, weights).output)


def reconstruct(
    signal: SphericalSignal, grid: FoldGrid, weights: ModelWeights
) -> PointCloud:
    """Encode then decode; output in support-normalized coordinates."""
    descriptor, _ = encoder_forward(signal, weights)
    return decoder_forward(descriptor, grid, weights)

"""Harmonic analysis on the sphere and the rotation group.

Signals are real and sampled on Driscoll-Healy grids. Spectral coefficients
use the basis D^l_{mn}(R) = exp(-i m alpha) d^l_{mn}(beta) exp(-i n gamma)
(and D^l_{m0} on the sphere) with the normalized measure, so that

    h(R) = sum_l sum_{mn} h^l_{mn} D^l_{mn}(R),
    h^l_{mn} = (2l + 1) * integral h(R) conj(D^l_{mn}(R)) dR.

With this convention the correlations reduce to per-degree products:

    S2:   out^l_{pm} = f^l_p conj(psi^l_m) / (2l + 1)
    SO3:  out^l = h^l @ conj(psi^l).T / (2l + 1)

and rotating a signal by R (f -> f(R^-1 .)) multiplies each block on the left
by conj(D^l(R)).

Two backends compute the correlations: "spectral" (the fast path above) and
"direct" (quadrature over the input grid, with the filter evaluated at every
rotated sample from its expansion at the input bandwidth). The spectral path
truncates to the output bandwidth, while the direct path samples the full
correlation on the coarser output grid; they agree when the filter has no
content at or above the output bandwidth. Array-level functions carry a
leading channel axis; the public functions wrap them in signal types.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Literal, Optional, Sequence

import numpy as np

from .core import (
    TWO_PI,
    RotationZYZ,
    make_dh_grid,
    make_so3_grid,
    matrices_to_zyz,
)
from .errors import InvalidInputError, ShapeMismatchError
from .signal import SphericalSignal
from .wigner import grid_wigner_table, wigner_d_table


Backend = Literal["spectral", "direct"]
RotationBackend = Literal["spectral", "interp"]

DIRECT_CHUNK = 16
Z_ROTATION_TOL = 1e-12


@dataclass(frozen=True)
class So3Signal:
    """C-channel function on the SO(3) grid, values indexed (channel, alpha, beta, gamma)."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 3:
            values = values[None]
        n = values.shape[1] if values.ndim == 4 else 0
        if values.ndim != 4 or n % 2 or values.shape[1:] != (n, n, n):
            raise InvalidInputError(f"SO(3) signal must be C x 2b x 2b x 2b, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise InvalidInputError("SO(3) signal contains non-finite values")
        object.__setattr__(self, "values", values)

    @property
    def bandwidth(self) -> int:
        return self.values.shape[1] // 2

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    def energy(self) -> float:
        """Quadrature of the squared signal, summed over channels."""
        weights = make_so3_grid(self.bandwidth).cell_weights()
        return float(np.sum(weights[None] * self.values ** 2))


@dataclass(frozen=True)
class SpectralS2:
    bandwidth: int
    blocks: List[np.ndarray]  # degree l -> (C, 2l+1)

    @property
    def channels(self) -> int:
        return self.blocks[0].shape[0]

    def energy(self) -> float:
        return float(sum(np.sum(np.abs(b) ** 2) / (2 * l + 1) for l, b in enumerate(self.blocks)))


@dataclass(frozen=True)
class SpectralSo3:
    bandwidth: int
    blocks: List[np.ndarray]  # degree l -> (C, 2l+1, 2l+1)

    def __post_init__(self):
        for l, block in enumerate(self.blocks):
            if block.shape[-2:] != (2 * l + 1, 2 * l + 1):
                raise ShapeMismatchError(f"Block {l} has shape {block.shape}")

    @property
    def channels(self) -> int:
        return self.blocks[0].shape[0]

    def energy(self) -> float:
        return float(sum(np.sum(np.abs(b) ** 2) / (2 * l + 1) for l, b in enumerate(self.blocks)))


def _orders(l: int, n: int) -> np.ndarray:
    return np.arange(-l, l + 1) % n


def _grid_bandwidth(values: np.ndarray, ndim: int) -> int:
    size = values.shape[-1]
    if size % 2 or values.shape[-ndim:] != (size,) * ndim:
        raise ShapeMismatchError(f"Grid axes must be equal and even, got {values.shape}")
    return size // 2


# ---------------------------------------------------------------------------
# Transforms on arrays. Grid axes are last: (alpha, beta) or (alpha, beta, gamma).
# ---------------------------------------------------------------------------


def s2_analysis(
    values: np.ndarray,
    degrees: Optional[int] = None,
    weighted: bool = True,
) -> List[np.ndarray]:
    """Spherical coefficients for l < degrees. With weighted=False the
    quadrature weights and (2l+1) factors are dropped, which is the adjoint of
    `s2_synthesis` (real part taken)."""
    b = _grid_bandwidth(values, 2)
    degrees = b if degrees is None else degrees
    n = 2 * b
    table = grid_wigner_table(b)
    weights = make_dh_grid(b).weights if weighted else np.ones(n)
    raw = n * np.fft.ifft(values, axis=-2)  # (..., m, beta)
    coeffs = []
    for l in range(degrees):
        d_m0 = table[l][:, :, l]  # (beta, m)
        scale = (2 * l + 1) if weighted else 1.0
        block = np.einsum("...mk,km,k->...m", raw[..., _orders(l, n), :], d_m0, weights)
        coeffs.append(scale * block)
    return coeffs


def s2_synthesis(coeffs: Sequence[np.ndarray], bandwidth: int) -> np.ndarray:
    """Real grid values at the given bandwidth from coefficients (l < len(coeffs))."""
    if len(coeffs) > bandwidth:
        raise ShapeMismatchError("More degrees than the output grid can hold")
    n = 2 * bandwidth
    table = grid_wigner_table(bandwidth)
    lead = coeffs[0].shape[:-1]
    acc = np.zeros(lead + (n, n), dtype=np.complex128)  # (..., m, beta)
    for l, block in enumerate(coeffs):
        d_m0 = table[l][:, :, l]
        acc[..., _orders(l, n), :] += np.einsum("...m,km->...mk", block, d_m0)
    return np.fft.fft(acc, axis=-2).real


def so3_analysis(
    values: np.ndarray,
    degrees: Optional[int] = None,
    weighted: bool = True,
) -> List[np.ndarray]:
    """SO(3) coefficients for l < degrees; weighted=False gives the adjoint of
    `so3_synthesis`."""
    b = _grid_bandwidth(values, 3)
    degrees = b if degrees is None else degrees
    n = 2 * b
    table = grid_wigner_table(b)
    weights = make_so3_grid(b).weights if weighted else np.ones(n)
    raw = (n * n) * np.fft.ifft2(values, axes=(-3, -1))  # (..., m, beta, n)
    raw = np.swapaxes(raw, -3, -2)  # (..., beta, m, n)
    coeffs = []
    for l in range(degrees):
        idx = _orders(l, n)
        sub = raw[..., :, idx[:, None], idx[None, :]]
        scale = (2 * l + 1) if weighted else 1.0
        coeffs.append(scale * np.einsum("...kmn,kmn,k->...mn", sub, table[l], weights))
    return coeffs


def so3_synthesis(coeffs: Sequence[np.ndarray], bandwidth: int) -> np.ndarray:
    if len(coeffs) > bandwidth:
        raise ShapeMismatchError("More degrees than the output grid can hold")
    n = 2 * bandwidth
    table = grid_wigner_table(bandwidth)
    lead = coeffs[0].shape[:-2]
    acc = np.zeros(lead + (n, n, n), dtype=np.complex128)  # (..., beta, m, n)
    for l, block in enumerate(coeffs):
        idx = _orders(l, n)
        acc[..., :, idx[:, None], idx[None, :]] += np.einsum("...mn,kmn->...kmn", block, table[l])
    grid = np.fft.fft2(acc, axes=(-2, -1))  # (..., beta, alpha, gamma)
    return np.swapaxes(grid, -3, -2).real


def s2_analysis_adjoint(grads: Sequence[np.ndarray], bandwidth: int) -> np.ndarray:
    """Gradient w.r.t. real grid values given gradients of `s2_analysis` output."""
    scaled = [(2 * l + 1) * g for l, g in enumerate(grads)]
    weights = make_dh_grid(bandwidth).weights
    return weights * s2_synthesis(scaled, bandwidth)


def so3_analysis_adjoint(grads: Sequence[np.ndarray], bandwidth: int) -> np.ndarray:
    scaled = [(2 * l + 1) * g for l, g in enumerate(grads)]
    weights = make_so3_grid(bandwidth).weights
    return weights[:, None] * so3_synthesis(scaled, bandwidth)


def so3_synthesis_adjoint(grad: np.ndarray, degrees: int) -> List[np.ndarray]:
    return so3_analysis(grad, degrees=degrees, weighted=False)


# ---------------------------------------------------------------------------
# Per-degree spectral products
# ---------------------------------------------------------------------------


def s2_spectral_product(f_hat, psi_hat, degrees: int) -> List[np.ndarray]:
    """f_hat[l]: (..., K, 2l+1); psi_hat[l]: (O, K, 2l+1) -> (..., O, 2l+1, 2l+1)."""
    return [
        np.einsum("...cp,ocm->...opm", f_hat[l], np.conj(psi_hat[l])) / (2 * l + 1)
        for l in range(degrees)
    ]


def so3_spectral_product(h_hat, psi_hat, degrees: int) -> List[np.ndarray]:
    """h_hat[l]: (..., C, 2l+1, 2l+1); psi_hat[l]: (O, C, 2l+1, 2l+1)."""
    return [
        np.einsum("...cpn,ocmn->...opm", h_hat[l], np.conj(psi_hat[l])) / (2 * l + 1)
        for l in range(degrees)
    ]


# ---------------------------------------------------------------------------
# Direct (quadrature) evaluation
# ---------------------------------------------------------------------------


def _wigner_big_d(alpha, beta, gamma, degrees: int) -> List[np.ndarray]:
    """D^l_{mn} at arbitrary flat arrays of Euler angles, each (P, 2l+1, 2l+1)."""
    table = wigner_d_table(degrees, beta)
    blocks = []
    for l in range(degrees):
        orders = np.arange(-l, l + 1)
        left = np.exp(-1j * np.outer(alpha, orders))
        right = np.exp(-1j * np.outer(gamma, orders))
        blocks.append(left[:, :, None] * table[l] * right[:, None, :])
    return blocks


def so3_evaluate(coeffs: Sequence[np.ndarray], rotations: np.ndarray) -> np.ndarray:
    """Expansion with blocks coeffs[l] (2l+1, 2l+1) evaluated at arbitrary
    rotation matrices (..., 3, 3); the result has their leading shape."""
    rotations = np.asarray(rotations, dtype=np.float64)
    lead = rotations.shape[:-2]
    alpha, beta, gamma = matrices_to_zyz(rotations.reshape(-1, 3, 3))
    blocks = _wigner_big_d(alpha, beta, gamma, len(coeffs))
    total = np.zeros(len(alpha), dtype=np.complex128)
    for block, coeff in zip(blocks, coeffs):
        total += np.einsum("pmn,mn->p", block, coeff)
    return total.real.reshape(lead)


def _check_out_bandwidth(b_in: int, out_bandwidth: Optional[int]) -> int:
    b_out = b_in if out_bandwidth is None else int(out_bandwidth)
    if not 1 <= b_out <= b_in:
        raise InvalidInputError(f"Output bandwidth must be in [1, {b_in}], got {b_out}")
    return b_out


def s2_correlate_direct(f: np.ndarray, psi: np.ndarray, out_bandwidth: int) -> np.ndarray:
    """Reference S2 correlation. f: (K, N, N); psi: (O, K, N, N) -> (O, M, M, M)."""
    b_in = _grid_bandwidth(f, 2)
    grid = make_dh_grid(b_in)
    psi_hat = s2_analysis(psi)
    points = grid.points().reshape(-1, 3)
    weighted_f = (f * grid.cell_weights()[None]).reshape(f.shape[0], -1)
    rotations = make_so3_grid(out_bandwidth).rotations().reshape(-1, 3, 3)
    out = np.zeros((psi.shape[0], len(rotations)))
    for start in range(0, len(rotations), DIRECT_CHUNK):
        chunk = rotations[start : start + DIRECT_CHUNK]
        # R^-1 x for every (rotation, grid point) pair
        local = np.einsum("rji,pj->rpi", chunk, points)
        alpha = np.arctan2(local[..., 1], local[..., 0]).ravel()
        beta = np.arccos(np.clip(local[..., 2], -1.0, 1.0)).ravel()
        table = wigner_d_table(b_in, beta)
        acc = np.zeros((psi.shape[0], len(chunk)), dtype=np.complex128)
        for l in range(b_in):
            orders = np.arange(-l, l + 1)
            basis = np.exp(-1j * np.outer(alpha, orders)) * table[l][:, :, l]
            basis = basis.reshape(len(chunk), -1, 2 * l + 1)  # (r, p, m)
            projected = np.einsum("cp,rpm->crm", weighted_f, basis)
            acc += np.einsum("ocm,crm->or", psi_hat[l], projected)
        out[:, start : start + len(chunk)] = acc.real
    n = 2 * out_bandwidth
    return out.reshape(psi.shape[0], n, n, n)


def so3_correlate_direct(h: np.ndarray, psi: np.ndarray, out_bandwidth: int) -> np.ndarray:
    """Reference SO(3) correlation. h: (C, N, N, N); psi: (O, C, N, N, N)."""
    b_in = _grid_bandwidth(h, 3)
    grid = make_so3_grid(b_in)
    psi_hat = so3_analysis(psi)
    samples = grid.rotations().reshape(-1, 3, 3)
    weighted_h = (h * grid.cell_weights()[None]).reshape(h.shape[0], -1)
    rotations = make_so3_grid(out_bandwidth).rotations().reshape(-1, 3, 3)
    out = np.zeros((psi.shape[0], len(rotations)))
    for start in range(0, len(rotations), DIRECT_CHUNK):
        chunk = rotations[start : start + DIRECT_CHUNK]
        relative = np.einsum("rji,qjk->rqik", chunk, samples)  # R^-1 Q
        alpha, beta, gamma = matrices_to_zyz(relative.reshape(-1, 3, 3))
        blocks = _wigner_big_d(alpha, beta, gamma, b_in)
        acc = np.zeros((psi.shape[0], len(chunk)), dtype=np.complex128)
        for l, block in enumerate(blocks):
            block = block.reshape(len(chunk), -1, 2 * l + 1, 2 * l + 1)
            projected = np.einsum("cq,rqmn->crmn", weighted_h, block)
            acc += np.einsum("ocmn,crmn->or", psi_hat[l], projected)
        out[:, start : start + len(chunk)] = acc.real
    n = 2 * out_bandwidth
    return out.reshape(psi.shape[0], n, n, n)


def s2_correlate(
    f: np.ndarray, psi: np.ndarray, out_bandwidth: Optional[int] = None, backend: Backend = "spectral"
) -> np.ndarray:
    if f.shape[0] != psi.shape[1] or f.shape[1:] != psi.shape[2:]:
        raise ShapeMismatchError(f"Signal {f.shape} and filters {psi.shape} do not match")
    b_out = _check_out_bandwidth(_grid_bandwidth(f, 2), out_bandwidth)
    if backend == "direct":
        return s2_correlate_direct(f, psi, b_out)
    product = s2_spectral_product(
        s2_analysis(f, degrees=b_out), s2_analysis(psi, degrees=b_out), b_out
    )
    return so3_synthesis(product, b_out)


def so3_correlate(
    h: np.ndarray, psi: np.ndarray, out_bandwidth: Optional[int] = None, backend: Backend = "spectral"
) -> np.ndarray:
    if h.shape[0] != psi.shape[1] or h.shape[1:] != psi.shape[2:]:
        raise ShapeMismatchError(f"Signal {h.shape} and filters {psi.shape} do not match")
    b_out = _check_out_bandwidth(_grid_bandwidth(h, 3), out_bandwidth)
    if backend == "direct":
        return so3_correlate_direct(h, psi, b_out)
    product = so3_spectral_product(
        so3_analysis(h, degrees=b_out), so3_analysis(psi, degrees=b_out), b_out
    )
    return so3_synthesis(product, b_out)


# ---------------------------------------------------------------------------
# Public signal-level operations
# ---------------------------------------------------------------------------


def s2_fft(f: SphericalSignal) -> SpectralS2:
    return SpectralS2(f.bandwidth, s2_analysis(f.values))


def s2_ifft(s: SpectralS2) -> SphericalSignal:
    return SphericalSignal(s2_synthesis(s.blocks, s.bandwidth))


def so3_fft(h: So3Signal) -> SpectralSo3:
    return SpectralSo3(h.bandwidth, so3_analysis(h.values))


def so3_ifft(s: SpectralSo3) -> So3Signal:
    return So3Signal(so3_synthesis(s.blocks, s.bandwidth))


def band_limit(signal):
    """Project a grid signal onto its band-limited subspace."""
    if isinstance(signal, So3Signal):
        return so3_ifft(so3_fft(signal))
    return s2_ifft(s2_fft(signal))


def s2_correlation(
    f: SphericalSignal,
    psi: SphericalSignal,
    out_bandwidth: Optional[int] = None,
    backend: Backend = "spectral",
) -> So3Signal:
    """out(R) = sum_k integral psi_k(R^-1 x) f_k(x) dx, one output channel."""
    if f.bandwidth != psi.bandwidth or f.channels != psi.channels:
        raise ShapeMismatchError(
            f"Signal (b={f.bandwidth}, K={f.channels}) and filter "
            f"(b={psi.bandwidth}, K={psi.channels}) must match"
        )
    return So3Signal(s2_correlate(f.values, psi.values[None], out_bandwidth, backend))


def so3_correlation(
    h: So3Signal,
    psi: So3Signal,
    out_bandwidth: Optional[int] = None,
    backend: Backend = "spectral",
) -> So3Signal:
    """out(R) = sum_k integral psi_k(R^-1 Q) h_k(Q) dQ, one output channel."""
    if h.values.shape != psi.values.shape:
        raise ShapeMismatchError(f"Signal {h.values.shape} and filter {psi.values.shape} must match")
    return So3Signal(so3_correlate(h.values, psi.values[None], out_bandwidth, backend))


# ---------------------------------------------------------------------------
# Rotation of signals
# ---------------------------------------------------------------------------


def _grid_shift(r: RotationZYZ, n: int) -> Optional[int]:
    """Number of alpha columns if r is a z-rotation by a multiple of the grid step."""
    m = r.to_matrix()
    if abs(m[2, 2] - 1.0) > Z_ROTATION_TOL:
        return None
    steps = np.arctan2(m[1, 0], m[0, 0]) / (TWO_PI / n)
    shift = int(np.round(steps))
    if abs(steps - shift) > 1e-9:
        return None
    return shift % n


def _rotation_blocks(r: RotationZYZ, degrees: int) -> List[np.ndarray]:
    blocks = _wigner_big_d(
        np.array([r.alpha]), np.array([r.beta]), np.array([r.gamma]), degrees
    )
    return [block[0] for block in blocks]


def rotate_s2_values(values: np.ndarray, r: RotationZYZ, backend: RotationBackend = "interp") -> np.ndarray:
    b = _grid_bandwidth(values, 2)
    n = 2 * b
    shift = _grid_shift(r, n)
    if shift is not None:
        return np.roll(values, shift, axis=-2)
    if backend == "spectral":
        rot = _rotation_blocks(r, b)
        coeffs = s2_analysis(values)
        rotated = [np.einsum("pm,...m->...p", np.conj(rot[l]), c) for l, c in enumerate(coeffs)]
        return s2_synthesis(rotated, b)
    grid = make_dh_grid(b)
    local = grid.points() @ r.to_matrix()  # rows: R^-1 x
    alpha = np.mod(np.arctan2(local[..., 1], local[..., 0]), TWO_PI)
    beta = np.arccos(np.clip(local[..., 2], -1.0, 1.0))
    a_pos = alpha / (TWO_PI / n)
    b_pos = np.clip((beta - grid.betas[0]) / (np.pi / n), 0.0, n - 1)
    a0 = np.floor(a_pos).astype(np.int64)
    b0 = np.minimum(np.floor(b_pos).astype(np.int64), n - 1)
    ta = a_pos - a0
    tb = b_pos - b0
    a0 %= n
    a1 = (a0 + 1) % n
    b1 = np.minimum(b0 + 1, n - 1)
    v = values
    return (
        (1 - ta) * (1 - tb) * v[..., a0, b0]
        + ta * (1 - tb) * v[..., a1, b0]
        + (1 - ta) * tb * v[..., a0, b1]
        + ta * tb * v[..., a1, b1]
    )


def rotate_so3_values(values: np.ndarray, r: RotationZYZ, backend: RotationBackend = "spectral") -> np.ndarray:
    b = _grid_bandwidth(values, 3)
    n = 2 * b
    shift = _grid_shift(r, n)
    if shift is not None:
        return np.roll(values, shift, axis=-3)
    if backend == "spectral":
        rot = _rotation_blocks(r, b)
        coeffs = so3_analysis(values)
        rotated = [np.einsum("pm,...mn->...pn", np.conj(rot[l]), c) for l, c in enumerate(coeffs)]
        return so3_synthesis(rotated, b)
    grid = make_so3_grid(b)
    local = np.einsum("ji,...jk->...ik", r.to_matrix(), grid.rotations())  # R^-1 Q
    alpha, beta, gamma = matrices_to_zyz(local)
    step = TWO_PI / n
    a_pos = alpha / step
    g_pos = gamma / step
    b_pos = np.clip((beta - grid.betas[0]) / (np.pi / n), 0.0, n - 1)
    a0 = np.floor(a_pos).astype(np.int64)
    g0 = np.floor(g_pos).astype(np.int64)
    b0 = np.minimum(np.floor(b_pos).astype(np.int64), n - 1)
    ta, tg, tb = a_pos - a0, g_pos - g0, b_pos - b0
    a0 %= n
    g0 %= n
    a1, g1, b1 = (a0 + 1) % n, (g0 + 1) % n, np.minimum(b0 + 1, n - 1)
    out = np.zeros(values.shape[:-3] + alpha.shape)
    for ai, wa in ((a0, 1 - ta), (a1, ta)):
        for bi, wb in ((b0, 1 - tb), (b1, tb)):
            for gi, wg in ((g0, 1 - tg), (g1, tg)):
                out += wa * wb * wg * values[..., ai, bi, gi]
    return out


def rotate_s2_signal(f: SphericalSignal, r: RotationZYZ, backend: RotationBackend = "interp") -> SphericalSignal:
    """output(x) = f(R^-1 x)."""
    return SphericalSignal(rotate_s2_values(f.values, r, backend))


def rotate_so3_signal(h: So3Signal, r: RotationZYZ, backend: RotationBackend = "spectral") -> So3Signal:
    """output(Q) = h(R^-1 Q)."""
    return So3Signal(rotate_so3_values(h.values, r, backend))

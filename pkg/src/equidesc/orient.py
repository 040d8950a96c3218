"""Turning equivariant descriptors into rotation-invariant ones.

Two sources of a canonicalizing rotation are supported: the descriptor's own
SO(3) feature map (self-orientation over its top-valued bins) and an external
FLARE-style local reference frame computed from the point cloud. Either way
the rotation is applied to the descriptor, never to the input cloud.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from .config import OrientConfig
from .core import PointCloud, RotationZYZ, check_rotation, inverse, make_so3_grid, matrix_to_zyz
from .errors import (
    AmbiguousNormalError,
    AmbiguousTangentError,
    DegenerateFeatureMapError,
    InvalidInputError,
    ShapeMismatchError,
    TooFewPointsError,
)
from .harmonic import rotate_so3_signal, so3_analysis, so3_evaluate
from .network import Descriptor, ModelWeights, Spectra, encoder_forward
from .signal import build_spherical_signal


DescriptorMode = Literal["raw", "self", "lrf"]

MIN_LRF_POINTS = 6
NORMAL_SUPPORT = 0.3
ANNULUS_INNER = 0.85
EIGEN_RATIO_LIMIT = 0.99
TANGENT_FLOOR = 1e-9
REFINE_STEP = 0.2
REFINE_XTOL = 1e-8
REFINE_FTOL = 1e-12
REFINE_ITERATIONS = 2000


@dataclass(frozen=True)
class LocalFrame:
    """Rows are the frame axes (x, y, z) in world coordinates."""

    rotation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", check_rotation(self.rotation).copy())

    @property
    def x(self) -> np.ndarray:
        return self.rotation[0]

    @property
    def y(self) -> np.ndarray:
        return self.rotation[1]

    @property
    def z(self) -> np.ndarray:
        return self.rotation[2]


# ---------------------------------------------------------------------------
# Self-orientation
# ---------------------------------------------------------------------------


def _score_map(d: Descriptor) -> np.ndarray:
    """(alpha, beta, gamma) map scored for orientation; channels are summed."""
    values = d.feature_map().values.sum(axis=0)
    if np.ptp(values) == 0.0:
        raise DegenerateFeatureMapError("Feature map is constant; no orientation can be read from it")
    return values


def _neighbors(index: np.ndarray, n: int) -> np.ndarray:
    """Flat indices of the 3x3x3 neighborhood, periodic in alpha and gamma,
    clamped (truncated) in beta."""
    a, b, g = index
    steps = np.arange(-1, 2)
    betas = b + steps
    betas = betas[(betas >= 0) & (betas < n)]
    aa, bb, gg = np.meshgrid((a + steps) % n, betas, (g + steps) % n, indexing="ij")
    return np.ravel_multi_index((aa.ravel(), bb.ravel(), gg.ravel()), (n, n, n))


def chordal_mean(rotations: np.ndarray) -> np.ndarray:
    """Rotation nearest (Frobenius) to the sum of the given matrices."""
    total = np.sum(np.asarray(rotations, dtype=np.float64).reshape(-1, 3, 3), axis=0)
    u, _, vt = np.linalg.svd(total)
    fix = np.diag([1.0, 1.0, np.sign(np.linalg.det(u @ vt)) or 1.0])
    return u @ fix @ vt


def _winning_neighborhood(values: np.ndarray, top_k: int) -> np.ndarray:
    n = values.shape[0]
    flat = values.ravel()
    order = np.argsort(-flat, kind="stable")[:top_k]
    in_top = np.zeros(flat.size, dtype=bool)
    in_top[order] = True
    best = None
    for center in np.sort(order):
        members = _neighbors(np.unravel_index(center, values.shape), n)
        members = members[in_top[members]]
        key = (len(members), flat[members].max())
        if best is None or key > best[0]:
            best = (key, members)
    return best[1]


def refine_peak(values: np.ndarray, seed: np.ndarray) -> np.ndarray:
    """Nearest local maximum of the band-limited interpolant of an (alpha,
    beta, gamma) map, climbed from the seed rotation matrix."""
    coeffs = so3_analysis(values)

    def negative(omega: np.ndarray) -> float:
        return -float(so3_evaluate(coeffs, seed @ Rotation.from_rotvec(omega).as_matrix()))

    simplex = np.vstack([np.zeros(3), REFINE_STEP * np.eye(3)])
    result = minimize(
        negative,
        np.zeros(3),
        method="Nelder-Mead",
        options={"initial_simplex": simplex, "xatol": REFINE_XTOL, "fatol": REFINE_FTOL, "maxiter": REFINE_ITERATIONS},
    )
    return seed @ Rotation.from_rotvec(result.x).as_matrix()


def self_orient(d: Descriptor, cfg: Optional[OrientConfig] = None) -> RotationZYZ:
    """Rotation read off the densest cluster of top-k bins (or the single
    maximum bin with strategy="argmax"), refined off the grid unless
    cfg.refine is False."""
    cfg = cfg or OrientConfig()
    values = _score_map(d)
    if cfg.top_k > values.size:
        raise InvalidInputError(f"top_k={cfg.top_k} exceeds the {values.size} bins of the map")
    rotations = make_so3_grid(d.bandwidth).rotations().reshape(-1, 3, 3)
    if cfg.strategy == "argmax":
        chosen = rotations[int(np.argmax(values))]
    else:
        chosen = chordal_mean(rotations[_winning_neighborhood(values, cfg.top_k)])
    if cfg.refine:
        chosen = refine_peak(values, chosen)
    return matrix_to_zyz(chosen)


def canonicalize(d: Descriptor, r: RotationZYZ) -> Descriptor:
    rotated = rotate_so3_signal(d.feature_map(), inverse(r))
    return Descriptor.from_feature_map(rotated)


# ---------------------------------------------------------------------------
# Local reference frame
# ---------------------------------------------------------------------------


def compute_lrf(cloud: PointCloud, center, radius: float) -> LocalFrame:
    center = np.asarray(center, dtype=np.float64).reshape(3)
    offsets = cloud.points - center
    dist = np.linalg.norm(offsets, axis=1)
    inside = dist <= radius
    if int(inside.sum()) < MIN_LRF_POINTS:
        raise TooFewPointsError(
            f"LRF needs at least {MIN_LRF_POINTS} points within {radius}, found {int(inside.sum())}"
        )
    offsets, dist = offsets[inside], dist[inside]

    near = offsets[dist <= NORMAL_SUPPORT * radius]
    if len(near) < 3:
        raise AmbiguousNormalError("Too few points near the keypoint to fit a plane")
    evals, evecs = np.linalg.eigh(np.cov(near.T, bias=True))
    if evals[1] <= 0.0 or evals[0] / evals[1] > EIGEN_RATIO_LIMIT:
        raise AmbiguousNormalError(
            f"Smallest covariance eigenvalues are not separated ({evals[0]:.3e}, {evals[1]:.3e})"
        )
    z = evecs[:, 0]
    if cloud.sensor_origin is not None:
        if np.dot(z, cloud.sensor_origin - center) < 0:
            z = -z
    elif np.dot(z, offsets.mean(axis=0)) > 0:
        # away from the support centroid
        z = -z

    signed = offsets @ z
    annulus = dist >= ANNULUS_INNER * radius
    if annulus.any():
        candidates = np.flatnonzero(annulus)
    else:
        candidates = np.arange(len(offsets))
        if np.all(signed < TANGENT_FLOOR * radius):
            raise AmbiguousTangentError("No in-support point lies above the tangent plane")
    pick = candidates[int(np.argmax(signed[candidates]))]
    tangent = offsets[pick] - signed[pick] * z
    norm = np.linalg.norm(tangent)
    if norm < TANGENT_FLOOR * radius:
        raise AmbiguousTangentError("Selected point projects onto the keypoint")
    x = tangent / norm
    y = np.cross(z, x)
    return LocalFrame(np.stack([x, y, z]))


def frame_to_rotation(frame: LocalFrame) -> RotationZYZ:
    """Canonicalizing rotation of a frame: axes as columns.

    A view rotated by Q has frame F @ Q.T, and the rotation F.T maps to
    Q @ F.T, so both views canonicalize to the same pose.
    """
    return matrix_to_zyz(frame.rotation.T)


# ---------------------------------------------------------------------------
# Descriptors
# ---------------------------------------------------------------------------


def invariant_descriptor(
    cloud: PointCloud,
    center,
    weights: ModelWeights,
    mode: DescriptorMode = "self",
    cfg: Optional[OrientConfig] = None,
    frame: Optional[LocalFrame] = None,
    spectra: Optional[Spectra] = None,
) -> Descriptor:
    """Encode the keypoint's neighborhood and canonicalize it.

    `frame` overrides the computed LRF in lrf mode. Pass `spectra` (from
    `filter_spectra`) when describing many keypoints with the same weights.
    """
    signal = build_spherical_signal(cloud, center, weights.support)
    descriptor, _ = encoder_forward(signal, weights, spectra)
    if mode == "raw":
        return descriptor
    if mode == "self":
        return canonicalize(descriptor, self_orient(descriptor, cfg))
    if mode == "lrf":
        frame = frame or compute_lrf(cloud, center, weights.support.radius)
        return canonicalize(descriptor, frame_to_rotation(frame))
    raise InvalidInputError(f"Unknown descriptor mode: {mode}")


def descriptor_distance(a: Descriptor, b: Descriptor) -> float:
    if len(a) != len(b):
        raise ShapeMismatchError(f"Descriptor lengths differ ({len(a)} vs {len(b)})")
    return float(np.linalg.norm(a.values - b.values))

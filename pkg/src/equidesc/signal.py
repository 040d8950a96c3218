"""Spherical density signals built from keypoint neighborhoods.

Each in-support point is binned by its azimuth, inclination and distance
shell; a cell stores its point count divided by the number of in-support
points and by the cell's share of the full solid angle, so uniform data gives
equal expected density near the poles and at the equator.

With a positive kernel concentration each point is instead spread over every
cell of its shell under the same normalization. The result is close to
band-limited, so rotating the cloud rotates the signal's spectrum instead of
re-binning its points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import SupportSpec
from .core import TWO_PI, PointCloud, RotationZYZ, make_dh_grid
from .errors import InvalidInputError


CENTER_EPS = 1e-9
KERNEL_CHUNK = 2048


@dataclass(frozen=True)
class SphericalSignal:
    """K-channel function on the Driscoll-Healy grid, values indexed
    (channel, alpha_j, beta_k). Filters share this type, so values may be
    negative; densities produced by `build_spherical_signal` never are."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 2:
            values = values[None]
        if values.ndim != 3 or values.shape[1] != values.shape[2] or values.shape[1] % 2:
            raise InvalidInputError(
                f"Spherical signal must be K x 2b x 2b, got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise InvalidInputError("Spherical signal contains non-finite values")
        object.__setattr__(self, "values", values)

    @property
    def bandwidth(self) -> int:
        return self.values.shape[1] // 2

    @property
    def channels(self) -> int:
        return self.values.shape[0]


def cell_solid_angle_fractions(bandwidth: int) -> np.ndarray:
    """Share of the sphere covered by one cell of each beta row (length 2b)."""
    n = 2 * bandwidth
    edges = np.pi * np.arange(n + 1) / n
    return (np.cos(edges[:-1]) - np.cos(edges[1:])) / (2.0 * n)


def _check_finite(points: np.ndarray, center: np.ndarray) -> None:
    if not np.all(np.isfinite(center)):
        raise InvalidInputError("Keypoint center is not finite")
    if not np.all(np.isfinite(points)):
        raise InvalidInputError("Cloud contains non-finite points")


def bin_indices(offsets: np.ndarray, spec: SupportSpec):
    """(shell, alpha, beta) indices of points given relative to the keypoint."""
    n = 2 * spec.bandwidth
    dist = np.linalg.norm(offsets, axis=1)
    alpha = np.mod(np.arctan2(offsets[:, 1], offsets[:, 0]), TWO_PI)
    beta = np.arctan2(np.hypot(offsets[:, 0], offsets[:, 1]), offsets[:, 2])
    a_idx = np.floor(alpha / (TWO_PI / n) + 0.5).astype(np.int64) % n
    b_idx = np.clip(np.floor(beta / (np.pi / n)).astype(np.int64), 0, n - 1)
    shell = np.minimum(
        np.floor(spec.shells * dist / spec.radius).astype(np.int64), spec.shells - 1
    )
    at_center = dist < CENTER_EPS * spec.radius
    a_idx[at_center] = 0
    b_idx[at_center] = 0
    shell[at_center] = 0
    return shell, a_idx, b_idx


def kernel_weights(directions: np.ndarray, spec: SupportSpec) -> np.ndarray:
    """von Mises-Fisher weights of unit directions at every grid cell, flat
    (P, 2b * 2b) in (alpha, beta) order. Each row sums to one when weighted by
    the cells' solid-angle fractions."""
    n = 2 * spec.bandwidth
    cells = make_dh_grid(spec.bandwidth).points().reshape(-1, 3)
    fractions = np.tile(cell_solid_angle_fractions(spec.bandwidth), n)
    weights = np.exp(spec.concentration * (directions @ cells.T - 1.0))
    return weights / (weights @ fractions)[:, None]


def _spread_density(offsets: np.ndarray, spec: SupportSpec) -> np.ndarray:
    n = 2 * spec.bandwidth
    shell, _, _ = bin_indices(offsets, spec)
    dist = np.linalg.norm(offsets, axis=1)
    at_center = dist < CENTER_EPS * spec.radius
    density = np.zeros((spec.shells, n * n))
    # no direction at the keypoint: spread evenly over shell 0
    density[0] += np.count_nonzero(at_center)
    away = np.flatnonzero(~at_center)
    for start in range(0, len(away), KERNEL_CHUNK):
        chunk = away[start : start + KERNEL_CHUNK]
        weights = kernel_weights(offsets[chunk] / dist[chunk, None], spec)
        density += np.eye(spec.shells)[shell[chunk]].T @ weights
    return density.reshape(spec.shells, n, n) / len(offsets)


def build_spherical_signal(
    cloud: PointCloud, center, spec: SupportSpec
) -> SphericalSignal:
    center = np.asarray(center, dtype=np.float64).reshape(3)
    _check_finite(cloud.points, center)
    n = 2 * spec.bandwidth
    counts = np.zeros((spec.shells, n, n))
    if len(cloud):
        offsets = cloud.points - center
        inside = np.linalg.norm(offsets, axis=1) <= spec.radius
        offsets = offsets[inside]
        if len(offsets) and spec.concentration > 0:
            counts = _spread_density(offsets, spec)
        elif len(offsets):
            shell, a_idx, b_idx = bin_indices(offsets, spec)
            np.add.at(counts, (shell, a_idx, b_idx), 1.0)
            fractions = cell_solid_angle_fractions(spec.bandwidth)
            counts /= len(offsets) * fractions[None, None, :]
    return SphericalSignal(counts)


def extract_neighborhood(cloud: PointCloud, center, radius: float) -> PointCloud:
    """In-support points (closed ball) expressed relative to the keypoint."""
    center = np.asarray(center, dtype=np.float64).reshape(3)
    _check_finite(cloud.points, center)
    offsets = cloud.points - center
    inside = np.linalg.norm(offsets, axis=1) <= radius
    normals = cloud.normals[inside] if cloud.normals is not None else None
    return PointCloud(offsets[inside], normals)


def rotate_point_cloud(cloud: PointCloud, r: RotationZYZ, pivot) -> PointCloud:
    pivot = np.asarray(pivot, dtype=np.float64).reshape(3)
    rot = r.to_matrix()
    points = (cloud.points - pivot) @ rot.T + pivot
    normals = cloud.normals @ rot.T if cloud.normals is not None else None
    origin = None
    if cloud.sensor_origin is not None:
        origin = rot @ (cloud.sensor_origin - pivot) + pivot
    return PointCloud(points, normals, origin)

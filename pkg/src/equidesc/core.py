"""Geometry primitives shared by every other module.

Rotations are parameterized by intrinsic ZYZ Euler angles,
R = Rz(alpha) @ Ry(beta) @ Rz(gamma). Grids sample the sphere and the rotation
group on the equiangular Driscoll-Healy layout, and their quadrature weights
are normalized to a total mass of 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import InvalidInputError, NotARotationError


TWO_PI = 2.0 * math.pi
GIMBAL_EPS = 1e-9
ROTATION_TOL = 1e-6


def _wrap_angle(angle):
    wrapped = np.mod(angle, TWO_PI)
    return np.where(wrapped >= TWO_PI, 0.0, wrapped)


def zyz_to_matrices(alpha, beta, gamma) -> np.ndarray:
    """Vectorized ZYZ -> matrix. Inputs broadcast; output has shape (..., 3, 3)."""
    alpha, beta, gamma = np.broadcast_arrays(
        np.asarray(alpha, dtype=np.float64),
        np.asarray(beta, dtype=np.float64),
        np.asarray(gamma, dtype=np.float64),
    )
    ca, sa = np.cos(alpha), np.sin(alpha)
    cb, sb = np.cos(beta), np.sin(beta)
    cg, sg = np.cos(gamma), np.sin(gamma)
    out = np.empty(alpha.shape + (3, 3))
    out[..., 0, 0] = ca * cb * cg - sa * sg
    out[..., 0, 1] = -ca * cb * sg - sa * cg
    out[..., 0, 2] = ca * sb
    out[..., 1, 0] = sa * cb * cg + ca * sg
    out[..., 1, 1] = -sa * cb * sg + ca * cg
    out[..., 1, 2] = sa * sb
    out[..., 2, 0] = -sb * cg
    out[..., 2, 1] = sb * sg
    out[..., 2, 2] = cb
    return out


def matrices_to_zyz(m: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized matrix -> ZYZ with the gimbal-lock canonical form gamma = 0.

    No orthogonality check is made here; `matrix_to_zyz` is the validating
    scalar entry point.
    """
    m = np.asarray(m, dtype=np.float64)
    sin_beta = np.hypot(m[..., 0, 2], m[..., 1, 2])
    beta = np.arctan2(sin_beta, m[..., 2, 2])
    locked = sin_beta < GIMBAL_EPS

    alpha_free = np.arctan2(m[..., 1, 2], m[..., 0, 2])
    gamma_free = np.arctan2(m[..., 2, 1], -m[..., 2, 0])

    # with gamma folded to zero the upper-left block is Rz(alpha) scaled by cos(beta)
    flip = np.where(m[..., 2, 2] >= 0.0, 1.0, -1.0)
    alpha_locked = np.arctan2(flip * m[..., 1, 0], flip * m[..., 0, 0])

    alpha = np.where(locked, alpha_locked, alpha_free)
    gamma = np.where(locked, 0.0, gamma_free)
    return _wrap_angle(alpha), beta, _wrap_angle(gamma)


def rotation_residual(m: np.ndarray) -> float:
    m = np.asarray(m, dtype=np.float64)
    return float(np.max(np.abs(m.T @ m - np.eye(3))))


def check_rotation(m: np.ndarray, tol: float = ROTATION_TOL) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        raise NotARotationError(f"Expected a finite 3x3 matrix, got shape {m.shape}")
    residual = rotation_residual(m)
    if residual > tol:
        raise NotARotationError(f"Matrix is not orthogonal (residual {residual:.3e})")
    if np.linalg.det(m) < 0:
        raise NotARotationError("Matrix is a reflection (det = -1)")
    return m


@dataclass(frozen=True)
class RotationZYZ:
    alpha: float
    beta: float
    gamma: float

    @classmethod
    def identity(cls) -> "RotationZYZ":
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RotationZYZ":
        return matrix_to_zyz(m)

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> "RotationZYZ":
        axis = np.asarray(axis, dtype=np.float64)
        norm = np.linalg.norm(axis)
        if norm == 0.0:
            raise InvalidInputError("Rotation axis must be non-zero")
        rotvec = axis / norm * float(angle)
        return matrix_to_zyz(Rotation.from_rotvec(rotvec).as_matrix())

    def to_matrix(self) -> np.ndarray:
        return zyz_to_matrix(self)

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.alpha, self.beta, self.gamma)


def zyz_to_matrix(r: RotationZYZ) -> np.ndarray:
    return zyz_to_matrices(r.alpha, r.beta, r.gamma)


def matrix_to_zyz(m: np.ndarray) -> RotationZYZ:
    m = check_rotation(m)
    alpha, beta, gamma = matrices_to_zyz(m)
    return RotationZYZ(float(alpha), float(beta), float(gamma))


def compose(a: RotationZYZ, b: RotationZYZ) -> RotationZYZ:
    return matrix_to_zyz(a.to_matrix() @ b.to_matrix())


def inverse(a: RotationZYZ) -> RotationZYZ:
    return matrix_to_zyz(a.to_matrix().T)


def sample_uniform_rotation(rng: np.random.Generator) -> RotationZYZ:
    """Haar-uniform rotation: normalized 4D Gaussian quaternion."""
    return matrix_to_zyz(Rotation.random(random_state=rng).as_matrix())


def rotation_about_z(angle: float) -> RotationZYZ:
    return RotationZYZ(float(_wrap_angle(angle)), 0.0, 0.0)


def driscoll_healy_weights(bandwidth: int) -> np.ndarray:
    """Unnormalized weights q_k with sum_k q_k f(beta_k) = int_0^pi f sin(beta) dbeta."""
    betas = np.pi * (2 * np.arange(2 * bandwidth) + 1) / (4 * bandwidth)
    p = np.arange(bandwidth)
    series = np.sin(np.outer(betas, 2 * p + 1)) / (2 * p + 1)
    return (2.0 / bandwidth) * np.sin(betas) * series.sum(axis=1)


def _check_bandwidth(bandwidth: int) -> int:
    if int(bandwidth) != bandwidth or bandwidth < 1:
        raise InvalidInputError(f"Bandwidth must be a positive integer, got {bandwidth}")
    return int(bandwidth)


@dataclass(frozen=True)
class DhGrid:
    """Equiangular sphere grid. `weights[k]` is the normalized weight of one
    cell in beta row k; the full (alpha, beta) grid sums to 1."""

    bandwidth: int
    alphas: np.ndarray
    betas: np.ndarray
    weights: np.ndarray

    @property
    def size(self) -> int:
        return 2 * self.bandwidth

    def cell_weights(self) -> np.ndarray:
        """Weights broadcast to the (alpha, beta) grid."""
        return np.broadcast_to(self.weights[None, :], (self.size, self.size))

    def points(self) -> np.ndarray:
        """Unit vectors of the grid, shape (2b, 2b, 3) indexed (alpha, beta)."""
        a, b = np.meshgrid(self.alphas, self.betas, indexing="ij")
        return np.stack(
            [np.sin(b) * np.cos(a), np.sin(b) * np.sin(a), np.cos(b)], axis=-1
        )


@dataclass(frozen=True)
class So3Grid:
    """Equiangular Euler-angle grid on SO(3), indexed (alpha_j, beta_k, gamma_l)."""

    bandwidth: int
    alphas: np.ndarray
    betas: np.ndarray
    gammas: np.ndarray
    weights: np.ndarray

    @property
    def size(self) -> int:
        return 2 * self.bandwidth

    @property
    def samples(self) -> np.ndarray:
        a, b, g = np.meshgrid(self.alphas, self.betas, self.gammas, indexing="ij")
        return np.stack([a, b, g], axis=-1).reshape(-1, 3)

    def cell_weights(self) -> np.ndarray:
        n = self.size
        return np.broadcast_to(self.weights[None, :, None], (n, n, n))

    def rotations(self) -> np.ndarray:
        """Rotation matrices of every bin, shape (2b, 2b, 2b, 3, 3)."""
        a, b, g = np.meshgrid(self.alphas, self.betas, self.gammas, indexing="ij")
        return zyz_to_matrices(a, b, g)


def _freeze(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


@lru_cache(maxsize=None)
def make_dh_grid(bandwidth: int) -> DhGrid:
    b = _check_bandwidth(bandwidth)
    n = 2 * b
    alphas = TWO_PI * np.arange(n) / n
    betas = np.pi * (2 * np.arange(n) + 1) / (4 * b)
    weights = driscoll_healy_weights(b) / (2.0 * n)
    return DhGrid(b, _freeze(alphas), _freeze(betas), _freeze(weights))


@lru_cache(maxsize=None)
def make_so3_grid(bandwidth: int) -> So3Grid:
    b = _check_bandwidth(bandwidth)
    n = 2 * b
    alphas = TWO_PI * np.arange(n) / n
    betas = np.pi * (2 * np.arange(n) + 1) / (4 * b)
    weights = driscoll_healy_weights(b) / (2.0 * n * n)
    return So3Grid(
        b, _freeze(alphas), _freeze(betas), _freeze(alphas.copy()), _freeze(weights)
    )


@dataclass(frozen=True)
class PointCloud:
    """Points in meters with optional unit normals and sensor origin."""

    points: np.ndarray
    normals: Optional[np.ndarray] = None
    sensor_origin: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64, copy=True).reshape(-1, 3)
        object.__setattr__(self, "points", _freeze(points))
        if self.normals is not None:
            normals = np.array(self.normals, dtype=np.float64, copy=True).reshape(-1, 3)
            if normals.shape != points.shape:
                raise InvalidInputError(
                    f"Expected one normal per point ({len(points)}), got {len(normals)}"
                )
            if len(normals) and np.max(np.abs(np.linalg.norm(normals, axis=1) - 1.0)) > 1e-6:
                raise InvalidInputError("Normals must have unit norm")
            object.__setattr__(self, "normals", _freeze(normals))
        if self.sensor_origin is not None:
            origin = np.array(self.sensor_origin, dtype=np.float64, copy=True).reshape(3)
            object.__setattr__(self, "sensor_origin", _freeze(origin))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def centroid(self) -> np.ndarray:
        if not len(self):
            raise InvalidInputError("Empty cloud has no centroid")
        return self.points.mean(axis=0)

    def subset(self, indices) -> "PointCloud":
        indices = np.asarray(indices, dtype=np.int64)
        normals = self.normals[indices] if self.normals is not None else None
        return PointCloud(self.points[indices], normals, self.sensor_origin)

    def with_normals(self, normals: np.ndarray) -> "PointCloud":
        return PointCloud(self.points, normals, self.sensor_origin)

    def transform(self, pose: np.ndarray) -> "PointCloud":
        """Apply a 4x4 rigid transform to points, normals and sensor origin."""
        pose = np.asarray(pose, dtype=np.float64)
        rot, trans = pose[:3, :3], pose[:3, 3]
        normals = self.normals @ rot.T if self.normals is not None else None
        origin = rot @ self.sensor_origin + trans if self.sensor_origin is not None else None
        return PointCloud(self.points @ rot.T + trans, normals, origin)


def rigid_transform(rotation: np.ndarray, translation) -> np.ndarray:
    pose = np.eye(4)
    pose[:3, :3] = rotation
    pose[:3, 3] = np.asarray(translation, dtype=np.float64)
    return pose


def invert_rigid(pose: np.ndarray) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    rot = pose[:3, :3]
    return rigid_transform(rot.T, -rot.T @ pose[:3, 3])

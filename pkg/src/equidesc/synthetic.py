"""Synthetic fragment pairs over smooth height-field surfaces.

Each pair cuts two overlapping windows out of one densely sampled surface
(a base plane plus Gaussian bumps). Points in the shared region are the same
samples in both fragments before noise. The target fragment is then moved
into its own frame by a random yaw and translation, which becomes the
ground-truth pose.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from .bench import FragmentPair, compute_overlap
from .config import SceneSpec
from .core import PointCloud, rigid_transform, rotation_about_z


MAX_SHIFT = 0.5


@dataclass(frozen=True)
class BumpSurface:
    centers: np.ndarray  # (B, 2)
    heights: np.ndarray  # (B,)
    widths: np.ndarray  # (B,)

    def height(self, xy: np.ndarray) -> np.ndarray:
        return self._terms(xy).sum(axis=1)

    def gradient(self, xy: np.ndarray) -> np.ndarray:
        terms = self._terms(xy)
        delta = xy[:, None, :] - self.centers[None]
        return -np.einsum("nb,nbi->ni", terms / self.widths ** 2, delta)

    def _terms(self, xy: np.ndarray) -> np.ndarray:
        sq = np.sum((xy[:, None, :] - self.centers[None]) ** 2, axis=2)
        return self.heights * np.exp(-sq / (2.0 * self.widths ** 2))


def random_surface(rng: np.random.Generator, spec: SceneSpec, length: float) -> BumpSurface:
    centers = np.column_stack(
        [rng.uniform(0.0, length, spec.bumps), rng.uniform(0.0, spec.extent, spec.bumps)]
    )
    heights = rng.uniform(0.05, 0.25, spec.bumps) * rng.choice([-1.0, 1.0], spec.bumps)
    widths = rng.uniform(0.08, 0.25, spec.bumps)
    return BumpSurface(centers, heights, widths)


def _sample(surface: BumpSurface, xy: np.ndarray) -> PointCloud:
    grad = surface.gradient(xy)
    normals = np.column_stack([-grad, np.ones(len(xy))])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(np.column_stack([xy, surface.height(xy)]), normals)


def _add_noise(cloud: PointCloud, sigma: float, rng: np.random.Generator) -> PointCloud:
    if sigma <= 0:
        return cloud
    noisy = cloud.points + sigma * rng.standard_normal(cloud.points.shape)
    return PointCloud(noisy, cloud.normals)


def generate_pair(rng: np.random.Generator, spec: SceneSpec, name: str = "") -> FragmentPair:
    width = spec.extent
    shift = (1.0 - spec.overlap) * width
    length = width + shift
    surface = random_surface(rng, spec, length)
    count = int(round(spec.points * length / width))
    xy = np.column_stack([rng.uniform(0.0, length, count), rng.uniform(0.0, width, count)])
    master = _sample(surface, xy)

    in_source = xy[:, 0] <= width
    in_target = xy[:, 0] >= shift
    source = _add_noise(master.subset(np.flatnonzero(in_source)), spec.noise, rng)
    target_world = _add_noise(master.subset(np.flatnonzero(in_target)), spec.noise, rng)

    yaw = rotation_about_z(rng.uniform(0.0, 2.0 * np.pi))
    offset = rng.uniform(-MAX_SHIFT, MAX_SHIFT, 3)
    pose = rigid_transform(yaw.to_matrix(), offset)
    target = target_world.transform(pose)
    pair = FragmentPair(source, target, pose, name=name)
    pair.overlap = compute_overlap(pair)
    return pair


def generate_synthetic_scene(rng: np.random.Generator, spec: SceneSpec) -> List[FragmentPair]:
    return [generate_pair(rng, spec, name=f"pair_{idx:03d}") for idx in range(spec.pairs)]

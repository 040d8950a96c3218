"""Fragment-pair benchmark: preprocessing, matching and registration recall."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .cloud_io import load_cloud, load_pose, save_cloud, save_pose
from .config import EvalConfig
from .core import (
    PointCloud,
    RotationZYZ,
    check_rotation,
    invert_rigid,
    rigid_transform,
    sample_uniform_rotation,
)
from .errors import InvalidInputError, NoQualifyingPairsError


MATCH_CHUNK = 1024
DEGENERATE_EIG = 1e-12
TAU2_SWEEP = tuple(round(0.01 * i, 2) for i in range(1, 21))


@dataclass
class FragmentPair:
    """Two fragments and the pose mapping source coordinates into the target frame."""

    source: PointCloud
    target: PointCloud
    gt_pose: np.ndarray
    overlap: Optional[float] = None
    name: str = ""

    def __post_init__(self):
        pose = np.asarray(self.gt_pose, dtype=np.float64)
        if pose.shape != (4, 4):
            raise InvalidInputError(f"gt_pose must be 4x4, got {pose.shape}")
        check_rotation(pose[:3, :3])
        self.gt_pose = pose
        if self.overlap is not None and not 0.0 <= self.overlap <= 1.0:
            raise InvalidInputError(f"Overlap must lie in [0, 1], got {self.overlap}")


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """Centroid of every occupied voxel, ordered by voxel index. Normals are dropped."""
    if voxel <= 0:
        raise InvalidInputError(f"Voxel size must be positive, got {voxel}")
    if not len(cloud):
        return PointCloud(np.zeros((0, 3)), sensor_origin=cloud.sensor_origin)
    keys = np.floor(cloud.points / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, cloud.points)
    return PointCloud(sums / counts[:, None], sensor_origin=cloud.sensor_origin)


def _fallback_normal(direction: np.ndarray) -> np.ndarray:
    """Unit vector orthogonal to a line, built from the least-aligned axis."""
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(direction)))] = 1.0
    normal = np.cross(direction, axis)
    return normal / np.linalg.norm(normal)


def estimate_normals(cloud: PointCloud, k: int, viewpoint=None) -> PointCloud:
    """PCA normals over the k nearest neighbours (the point included).

    Signs face `viewpoint` (or the cloud's sensor origin); without either they
    point away from the cloud centroid.
    """
    if k < 3:
        raise InvalidInputError(f"Normal estimation needs k >= 3, got {k}")
    if k > len(cloud):
        raise InvalidInputError(f"k={k} exceeds the {len(cloud)} points of the cloud")
    points = cloud.points
    _, idx = cKDTree(points).query(points, k=k)
    neighbors = points[idx.reshape(len(points), k)]
    centered = neighbors - neighbors.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()
    degenerate = evals[:, 1] <= DEGENERATE_EIG * np.maximum(evals[:, 2], np.finfo(float).tiny)
    for i in np.flatnonzero(degenerate):
        if evals[i, 2] <= 0.0:
            normals[i] = (0.0, 0.0, 1.0)
        else:
            normals[i] = _fallback_normal(evecs[i, :, 2])

    if viewpoint is None:
        viewpoint = cloud.sensor_origin
    if viewpoint is not None:
        toward = np.asarray(viewpoint, dtype=np.float64).reshape(3) - points
    else:
        toward = points - points.mean(axis=0)
    flip = np.einsum("ni,ni->n", normals, toward) < 0
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return cloud.with_normals(normals)


def preprocess_cloud(cloud: PointCloud, cfg: EvalConfig) -> PointCloud:
    down = voxel_downsample(cloud, cfg.voxel)
    if len(down) < cfg.normal_k:
        return down
    return estimate_normals(down, cfg.normal_k)


def sample_keypoints(cloud: PointCloud, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample without replacement, returned in ascending order."""
    if n > len(cloud):
        raise InvalidInputError(f"Cannot sample {n} keypoints from {len(cloud)} points")
    if n < 0:
        raise InvalidInputError(f"Keypoint count must be non-negative, got {n}")
    return np.sort(rng.choice(len(cloud), size=n, replace=False))


# ---------------------------------------------------------------------------
# Overlap and matching
# ---------------------------------------------------------------------------


def compute_overlap(pair: FragmentPair, inlier_dist: float = 0.05) -> float:
    """Mean of the two directed inlier fractions after aligning the source."""
    if not len(pair.source) or not len(pair.target):
        raise InvalidInputError("Overlap of an empty fragment is undefined")
    moved = pair.source.transform(pair.gt_pose).points
    target = pair.target.points
    d_source, _ = cKDTree(target).query(moved, k=1)
    d_target, _ = cKDTree(moved).query(target, k=1)
    return float(0.5 * (np.mean(d_source <= inlier_dist) + np.mean(d_target <= inlier_dist)))


def _as_matrix(descriptors) -> np.ndarray:
    if isinstance(descriptors, np.ndarray):
        return descriptors.astype(np.float64).reshape(len(descriptors), -1)
    return np.stack([np.asarray(d.values, dtype=np.float64) for d in descriptors])


def match_keypoints(desc_a, desc_b, mutual: bool = False) -> np.ndarray:
    """(i, j) pairs: j is the nearest descriptor in b to a[i]; ties take the lowest j."""
    a, b = _as_matrix(desc_a), _as_matrix(desc_b)
    if not len(a) or not len(b):
        raise InvalidInputError("Matching needs two non-empty descriptor lists")
    if a.shape[1] != b.shape[1]:
        raise InvalidInputError(f"Descriptor dims differ ({a.shape[1]} vs {b.shape[1]})")
    forward = np.empty(len(a), dtype=np.int64)
    best_back = np.full(len(b), np.inf)
    backward = np.zeros(len(b), dtype=np.int64)
    for start in range(0, len(a), MATCH_CHUNK):
        dist = cdist(a[start : start + MATCH_CHUNK], b)
        forward[start : start + len(dist)] = np.argmin(dist, axis=1)
        rows = np.argmin(dist, axis=0)
        vals = dist[rows, np.arange(len(b))]
        better = vals < best_back
        best_back[better] = vals[better]
        backward[better] = rows[better] + start
    pairs = np.stack([np.arange(len(a)), forward], axis=1)
    if mutual:
        pairs = pairs[backward[forward] == pairs[:, 0]]
    return pairs


# ---------------------------------------------------------------------------
# Registration recall
# ---------------------------------------------------------------------------


@dataclass
class DescribedPair:
    """A fragment pair with keypoints and their descriptors on both sides."""

    pair: FragmentPair
    source_keypoints: np.ndarray
    source_descriptors: np.ndarray
    target_keypoints: np.ndarray
    target_descriptors: np.ndarray


@dataclass(frozen=True)
class PairResult:
    name: str
    overlap: float
    evaluated: bool
    n_matches: int
    n_correct: int
    inlier_ratio: float
    registered: bool


@dataclass
class RecallReport:
    recall: float
    tau1: float
    tau2: float
    evaluated: int
    registered: int
    pairs: List[PairResult]
    curve: List[Tuple[float, float]] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "recall": self.recall,
            "tau1": self.tau1,
            "tau2": self.tau2,
            "evaluated_pairs": self.evaluated,
            "registered_pairs": self.registered,
        }


def inlier_ratio(described: DescribedPair, tau1: float, mutual: bool = False) -> Tuple[int, int]:
    """(matches, correct matches) of one pair."""
    if not len(described.source_descriptors) or not len(described.target_descriptors):
        return 0, 0
    pairs = match_keypoints(described.source_descriptors, described.target_descriptors, mutual)
    if not len(pairs):
        return 0, 0
    pose = described.pair.gt_pose
    moved = described.source_keypoints[pairs[:, 0]] @ pose[:3, :3].T + pose[:3, 3]
    errors = np.linalg.norm(moved - described.target_keypoints[pairs[:, 1]], axis=1)
    return len(pairs), int(np.sum(errors < tau1))


def registration_recall(described: Sequence[DescribedPair], cfg: EvalConfig) -> RecallReport:
    results: List[PairResult] = []
    for idx, item in enumerate(described):
        overlap = item.pair.overlap
        if overlap is None:
            overlap = compute_overlap(item.pair, cfg.overlap_inlier_dist)
        name = item.pair.name or f"pair_{idx:03d}"
        if overlap < cfg.min_overlap:
            results.append(PairResult(name, overlap, False, 0, 0, 0.0, False))
            continue
        n_matches, n_correct = inlier_ratio(item, cfg.tau1, cfg.mutual)
        ratio = n_correct / n_matches if n_matches else 0.0
        results.append(PairResult(name, overlap, True, n_matches, n_correct, ratio, ratio > cfg.tau2))

    evaluated = [r for r in results if r.evaluated]
    if not evaluated:
        raise NoQualifyingPairsError(
            f"No pair reaches the minimum overlap {cfg.min_overlap} ({len(results)} pairs checked)"
        )
    ratios = np.array([r.inlier_ratio for r in evaluated])
    curve = [(tau2, float(np.mean(ratios > tau2))) for tau2 in TAU2_SWEEP]
    registered = sum(r.registered for r in evaluated)
    return RecallReport(
        recall=registered / len(evaluated),
        tau1=cfg.tau1,
        tau2=cfg.tau2,
        evaluated=len(evaluated),
        registered=registered,
        pairs=results,
        curve=curve,
    )


# ---------------------------------------------------------------------------
# Rotated benchmark and scene files
# ---------------------------------------------------------------------------


RotationSampler = Callable[[np.random.Generator], RotationZYZ]


def rotate_about_centroid(cloud: PointCloud, r: RotationZYZ) -> Tuple[PointCloud, np.ndarray]:
    rot = r.to_matrix()
    center = cloud.centroid()
    pose = rigid_transform(rot, center - rot @ center)
    return cloud.transform(pose), pose


def make_rotated_benchmark(
    pairs: Sequence[FragmentPair],
    rng: np.random.Generator,
    sampler: RotationSampler = sample_uniform_rotation,
) -> List[FragmentPair]:
    """Rotate every fragment about its own centroid; gt becomes A_t @ gt @ inv(A_s)."""
    rotated = []
    for pair in pairs:
        source, a_s = rotate_about_centroid(pair.source, sampler(rng))
        target, a_t = rotate_about_centroid(pair.target, sampler(rng))
        gt = a_t @ pair.gt_pose @ invert_rigid(a_s)
        rotated.append(replace(pair, source=source, target=target, gt_pose=gt))
    return rotated


def pair_paths(directory: Path, idx: int) -> Tuple[Path, Path, Path]:
    stem = Path(directory) / f"pair_{idx:03d}"
    return (
        stem.with_name(stem.name + "_source.ply"),
        stem.with_name(stem.name + "_target.ply"),
        stem.with_name(stem.name + "_pose.txt"),
    )


def save_scene(directory: Path, pairs: Sequence[FragmentPair]) -> List[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []
    for idx, pair in enumerate(pairs):
        source_path, target_path, pose_path = pair_paths(directory, idx)
        written.append(save_cloud(pair.source, source_path))
        written.append(save_cloud(pair.target, target_path))
        written.append(save_pose(pair.gt_pose, pose_path))
    return written


def load_scene(directory: Path) -> List[FragmentPair]:
    directory = Path(directory)
    pose_files = sorted(directory.glob("pair_*_pose.txt"))
    if not pose_files:
        raise InvalidInputError(f"{directory}: no pair_XXX_pose.txt files found")
    pairs = []
    for pose_path in pose_files:
        stem = pose_path.name[: -len("_pose.txt")]
        pairs.append(
            FragmentPair(
                source=load_cloud(directory / f"{stem}_source.ply"),
                target=load_cloud(directory / f"{stem}_target.ply"),
                gt_pose=load_pose(pose_path),
                name=stem,
            )
        )
    return pairs

"""End-to-end flows shared by the command-line surface: describing keypoints,
evaluating scenes and the rotation-equivariance sweep."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import spearmanr

from .bench import DescribedPair, FragmentPair, RecallReport, preprocess_cloud, registration_recall, sample_keypoints
from .cloud_io import DescriptorSet
from .config import EvalConfig, OrientConfig
from .core import PointCloud, RotationZYZ
from .errors import AmbiguousNormalError, AmbiguousTangentError, TooFewPointsError
from .logging_utils import ConsolePalette, log_status
from .network import ModelWeights, encoder_forward, filter_spectra
from .orient import MIN_LRF_POINTS, canonicalize, descriptor_distance, invariant_descriptor
from .signal import build_spherical_signal, rotate_point_cloud


SWEEP_ANGLES = 12
SWEEP_AXES = 10
ORIENTED_LIMIT = 0.10
SEPARATION_FACTOR = 3.0
SPEARMAN_LIMIT = 0.5


def describe_keypoints(
    cloud: PointCloud,
    indices: Sequence[int],
    weights: ModelWeights,
    mode: str = "self",
    orient: Optional[OrientConfig] = None,
    threads: int = 1,
    centers: Optional[np.ndarray] = None,
) -> DescriptorSet:
    """Descriptors of the given keypoints. Keypoints whose support holds fewer
    than six points, or whose LRF is ambiguous, are skipped and logged.

    `centers` overrides the keypoint positions (default: the indexed points).
    """
    radius = weights.support.radius
    indices = [int(i) for i in indices]
    if centers is None:
        centers = cloud.points[indices]
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    spectra = filter_spectra(weights)

    def run(position: int):
        index, center = indices[position], centers[position]
        support = int(np.sum(np.linalg.norm(cloud.points - center, axis=1) <= radius))
        if support < MIN_LRF_POINTS:
            return index, None, f"support of {support} points"
        try:
            return index, invariant_descriptor(cloud, center, weights, mode, orient, spectra=spectra), ""
        except (TooFewPointsError, AmbiguousNormalError, AmbiguousTangentError) as exc:
            return index, None, str(exc)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(run, range(len(indices))))

    kept, positions, rows = [], [], []
    for position, (index, descriptor, reason) in enumerate(results):
        if descriptor is None:
            log_status("skip", f"keypoint {index}: {reason}", ConsolePalette.WARNING)
            continue
        kept.append(index)
        positions.append(position)
        rows.append(descriptor.values)
    dim = weights.encoder.descriptor_length
    values = np.array(rows, dtype=np.float32).reshape(len(rows), dim)
    return DescriptorSet(
        values, centers[positions].reshape(-1, 3), kept, mode, weights.encoder.descriptor_bandwidth
    )


def describe_pair(
    pair: FragmentPair,
    weights: ModelWeights,
    cfg: EvalConfig,
    rng: np.random.Generator,
    mode: str,
    orient: Optional[OrientConfig] = None,
    threads: int = 1,
) -> Tuple[DescriptorSet, DescriptorSet]:
    sides = []
    for cloud in (pair.source, pair.target):
        cloud = preprocess_cloud(cloud, cfg)
        indices = sample_keypoints(cloud, min(cfg.n_keypoints, len(cloud)), rng)
        sides.append(describe_keypoints(cloud, indices, weights, mode, orient, threads))
    return sides[0], sides[1]


def as_described(pair: FragmentPair, source: DescriptorSet, target: DescriptorSet) -> DescribedPair:
    return DescribedPair(pair, source.keypoints, source.values, target.keypoints, target.values)


def evaluate_pairs(
    pairs: Sequence[FragmentPair],
    weights: ModelWeights,
    cfg: EvalConfig,
    rng: np.random.Generator,
    mode: str,
    orient: Optional[OrientConfig] = None,
    threads: int = 1,
) -> RecallReport:
    described = []
    for pair in pairs:
        source, target = describe_pair(pair, weights, cfg, rng, mode, orient, threads)
        log_status("describe", f"{pair.name}: {len(source)} + {len(target)} descriptors")
        described.append(as_described(pair, source, target))
    return registration_recall(described, cfg)


def write_pair_rows(report: RecallReport, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pair", "overlap", "evaluated", "matches", "correct", "inlier_ratio", "registered"])
        for row in report.pairs:
            writer.writerow(
                [row.name, f"{row.overlap:.6f}", int(row.evaluated), row.n_matches,
                 row.n_correct, f"{row.inlier_ratio:.6f}", int(row.registered)]
            )
    return path


def write_curve(report: RecallReport, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tau2", "recall"])
        for tau2, recall in report.curve:
            writer.writerow([f"{tau2:.2f}", f"{recall:.6f}"])
    return path


# ---------------------------------------------------------------------------
# Equivariance sweep
# ---------------------------------------------------------------------------


def smooth_patch(rng: np.random.Generator, radius: float, n_points: int = 4000) -> Tuple[PointCloud, np.ndarray]:
    """Dense samples of a bumpy height field around the origin and its keypoint."""
    xy = rng.uniform(-radius, radius, (n_points, 2))
    centers = rng.uniform(-radius, radius, (3, 2))
    heights = rng.uniform(0.3, 0.6, 3) * radius * rng.choice([-1.0, 1.0], 3)
    widths = rng.uniform(0.3, 0.6, 3) * radius
    sq = np.sum((xy[:, None, :] - centers[None]) ** 2, axis=2)
    z = np.sum(heights * np.exp(-sq / (2.0 * widths ** 2)), axis=1)
    center_sq = np.sum(centers ** 2, axis=1)
    center = np.array([0.0, 0.0, np.sum(heights * np.exp(-center_sq / (2.0 * widths ** 2)))])
    return PointCloud(np.column_stack([xy, z])), center


@dataclass
class SweepRow:
    angle: float
    oriented: float
    unoriented: float


@dataclass
class SweepReport:
    rows: List[SweepRow]
    median_oriented: float
    spearman: float
    separation: float
    passed: bool
    checks: dict = field(default_factory=dict)


def equivariance_sweep(
    weights: ModelWeights,
    rng: np.random.Generator,
    angles: int = SWEEP_ANGLES,
    axes: int = SWEEP_AXES,
) -> SweepReport:
    """Relative descriptor distance to the unrotated patch, with and without
    re-orienting by the known inverse rotation, over angles in [0, pi]."""
    patch, center = smooth_patch(rng, weights.support.radius)
    spectra = filter_spectra(weights)

    def describe(cloud: PointCloud):
        descriptor, _ = encoder_forward(build_spherical_signal(cloud, center, weights.support), weights, spectra)
        return descriptor

    reference = describe(patch)
    scale = float(np.linalg.norm(reference.values)) or 1.0
    rows: List[SweepRow] = []
    for angle in np.linspace(0.0, np.pi, angles):
        for _ in range(axes):
            axis = rng.standard_normal(3)
            r = RotationZYZ.from_axis_angle(axis, float(angle))
            rotated = describe(rotate_point_cloud(patch, r, center))
            rows.append(
                SweepRow(
                    float(angle),
                    descriptor_distance(canonicalize(rotated, r), reference) / scale,
                    descriptor_distance(rotated, reference) / scale,
                )
            )
    oriented = np.array([row.oriented for row in rows])
    unoriented = np.array([row.unoriented for row in rows])
    at_pi = np.array([row.angle for row in rows]) == rows[-1].angle
    median_oriented = float(np.median(oriented))
    separation = float(np.median(unoriented[at_pi]) / max(np.median(oriented[at_pi]), 1e-12))
    rho = float(spearmanr([row.angle for row in rows], unoriented)[0])
    checks = {
        "median_oriented": median_oriented <= ORIENTED_LIMIT,
        "separation_at_pi": separation >= SEPARATION_FACTOR,
        "unoriented_spearman": rho > SPEARMAN_LIMIT,
    }
    return SweepReport(rows, median_oriented, rho, separation, all(checks.values()), checks)


def write_sweep(report: SweepReport, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["angle", "oriented", "unoriented"])
        for row in report.rows:
            writer.writerow([f"{row.angle:.6f}", f"{row.oriented:.6f}", f"{row.unoriented:.6f}"])
    return path


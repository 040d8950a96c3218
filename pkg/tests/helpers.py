from __future__ import annotations

import numpy as np

from src.equidesc.core import PointCloud
from src.equidesc.harmonic import s2_analysis, s2_synthesis, so3_analysis, so3_synthesis
from src.equidesc.network import ModelWeights


def as_float64(weights: ModelWeights) -> ModelWeights:
    tensors = {name: t.astype(np.float64) for name, t in weights.tensors.items()}
    return ModelWeights(weights.support, weights.encoder, weights.decoder, tensors)


def band_limited_s2(rng, bandwidth, channels=1, max_degree=None):
    """Real spherical signal with no content at degree > max_degree."""
    degrees = bandwidth if max_degree is None else max_degree + 1
    n = 2 * bandwidth
    raw = rng.standard_normal((channels, n, n))
    return s2_synthesis(s2_analysis(raw, degrees=degrees), bandwidth)


def band_limited_so3(rng, bandwidth, channels=1, max_degree=None):
    degrees = bandwidth if max_degree is None else max_degree + 1
    n = 2 * bandwidth
    raw = rng.standard_normal((channels, n, n, n))
    return so3_synthesis(so3_analysis(raw, degrees=degrees), bandwidth)


def planar_patch(rng, radius=0.3, n=600, extra=None):
    """Points of the z=0 disk of the given radius around the origin."""
    r = radius * np.sqrt(rng.uniform(0.0, 1.0, n))
    t = rng.uniform(0.0, 2.0 * np.pi, n)
    points = np.column_stack([r * np.cos(t), r * np.sin(t), np.zeros(n)])
    if extra is not None:
        points = np.vstack([points, np.atleast_2d(extra)])
    return PointCloud(points)


def relative_error(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / np.linalg.norm(np.asarray(b)))

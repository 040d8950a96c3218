"""Reading and writing clouds, poses and descriptor files."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple

import numpy as np

from .container import read_manifest, read_tensors, write_container
from .core import PointCloud, check_rotation
from .errors import (
    CloudFormatError,
    CorruptManifestError,
    ElementCountMismatchError,
    InvalidInputError,
    ShapeMismatchError,
    UnsupportedPropertyError,
)


PLY_FLOAT_TYPES = {"float", "float32"}
PLY_PROPERTIES = ("x", "y", "z", "nx", "ny", "nz")
PLY_FORMATS = {"ascii", "binary_little_endian"}
DESCRIPTOR_TAG = "equidesc-desc-v1"


@dataclass
class PlyHeader:
    fmt: str
    count: int
    properties: List[str]
    length: int  # bytes up to and including the end_header line


def _parse_ply_header(raw: bytes, path: Path) -> PlyHeader:
    marker = b"end_header"
    end = raw.find(marker)
    if end < 0:
        raise CloudFormatError(f"{path}: PLY header has no end_header")
    newline = raw.find(b"\n", end)
    length = len(raw) if newline < 0 else newline + 1
    try:
        lines = raw[:end].decode("ascii").splitlines()
    except UnicodeDecodeError as exc:
        raise CloudFormatError(f"{path}: PLY header is not ASCII", f"byte {exc.start}") from exc
    if not lines or lines[0].strip() != "ply":
        raise CloudFormatError(f"{path}: missing 'ply' magic", "line 1")

    fmt = None
    count = None
    properties: List[str] = []
    element = None
    for lineno, line in enumerate(lines[1:], start=2):
        tokens = line.split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        where = f"line {lineno}"
        if tokens[0] == "format":
            if len(tokens) != 3 or tokens[1] not in PLY_FORMATS:
                raise CloudFormatError(f"{path}: unsupported PLY format {' '.join(tokens[1:])!r}", where)
            fmt = tokens[1]
        elif tokens[0] == "element":
            if len(tokens) != 3 or not tokens[2].isdigit():
                raise CloudFormatError(f"{path}: malformed element line", where)
            element = tokens[1]
            if element == "vertex":
                count = int(tokens[2])
            elif int(tokens[2]) != 0:
                raise UnsupportedPropertyError(f"{path}: unsupported element {element!r}", where)
        elif tokens[0] == "property":
            if element != "vertex":
                continue
            if len(tokens) != 3 or tokens[1] not in PLY_FLOAT_TYPES:
                raise UnsupportedPropertyError(
                    f"{path}: vertex properties must be 32-bit floats, got {' '.join(tokens[1:])!r}",
                    where,
                )
            if tokens[2] not in PLY_PROPERTIES or tokens[2] in properties:
                raise UnsupportedPropertyError(f"{path}: unexpected property {tokens[2]!r}", where)
            properties.append(tokens[2])
        else:
            raise CloudFormatError(f"{path}: unexpected header keyword {tokens[0]!r}", where)
    if fmt is None:
        raise CloudFormatError(f"{path}: PLY header declares no format")
    if count is None:
        raise CloudFormatError(f"{path}: PLY header declares no vertex element")
    if properties[:3] != ["x", "y", "z"]:
        raise UnsupportedPropertyError(f"{path}: vertex properties must start with x, y, z")
    if len(properties) not in (3, 6) or (len(properties) == 6 and properties[3:] != ["nx", "ny", "nz"]):
        raise UnsupportedPropertyError(f"{path}: normals must be declared as nx, ny, nz")
    return PlyHeader(fmt, count, properties, length)


def _cloud_from_columns(data: np.ndarray, path: Path) -> PointCloud:
    points = data[:, :3].astype(np.float64)
    if data.shape[1] == 3:
        return PointCloud(points)
    normals = data[:, 3:6].astype(np.float64)
    norms = np.linalg.norm(normals, axis=1)
    if np.any(norms == 0.0):
        raise CloudFormatError(f"{path}: zero-length normal at vertex {int(np.argmin(norms))}")
    return PointCloud(points, normals / norms[:, None])


def load_ply(path: Path) -> PointCloud:
    path = Path(path)
    raw = path.read_bytes()
    header = _parse_ply_header(raw, path)
    width = len(header.properties)
    body = raw[header.length :]
    if header.fmt == "binary_little_endian":
        needed = header.count * width * 4
        if len(body) < needed:
            raise ElementCountMismatchError(
                f"{path}: header declares {header.count} vertices, payload holds "
                f"{len(body) // (width * 4)}",
                f"byte {header.length + len(body)}",
            )
        data = np.frombuffer(body, dtype="<f4", count=header.count * width)
        return _cloud_from_columns(data.reshape(header.count, width), path)

    header_lines = raw[: header.length].count(b"\n")
    rows = []
    for offset, line in enumerate(body.decode("ascii", errors="replace").splitlines()):
        tokens = line.split()
        if not tokens:
            continue
        if len(rows) == header.count:
            raise ElementCountMismatchError(
                f"{path}: more vertex lines than the {header.count} declared",
                f"line {header_lines + offset + 1}",
            )
        if len(tokens) != width:
            raise CloudFormatError(
                f"{path}: expected {width} values, got {len(tokens)}",
                f"line {header_lines + offset + 1}",
            )
        try:
            rows.append([np.float32(t) for t in tokens])
        except ValueError as exc:
            raise CloudFormatError(f"{path}: {exc}", f"line {header_lines + offset + 1}") from exc
    if len(rows) != header.count:
        raise ElementCountMismatchError(
            f"{path}: header declares {header.count} vertices, found {len(rows)}",
            f"line {header_lines + len(body.splitlines()) + 1}",
        )
    data = np.array(rows, dtype=np.float32).reshape(-1, width)
    return _cloud_from_columns(data, path)


def save_ply(cloud: PointCloud, path: Path, binary: bool = True) -> Path:
    path = Path(path)
    columns = [cloud.points]
    props = ["x", "y", "z"]
    if cloud.normals is not None:
        columns.append(cloud.normals)
        props += ["nx", "ny", "nz"]
    data = np.hstack(columns).astype("<f4")
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0"]
    header.append(f"element vertex {len(data)}")
    header += [f"property float {name}" for name in props]
    header.append("end_header")
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(data.tobytes())
        else:
            for row in data:
                fh.write((" ".join(repr(float(v)) for v in row) + "\n").encode("ascii"))
    return path


def load_xyz(path: Path) -> PointCloud:
    path = Path(path)
    rows = []
    width = None
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        tokens = line.split()
        if not tokens or tokens[0].startswith("#"):
            continue
        if len(tokens) not in (3, 6) or (width is not None and len(tokens) != width):
            raise CloudFormatError(f"{path}: expected 3 or 6 columns, got {len(tokens)}", f"line {lineno}")
        width = len(tokens)
        try:
            rows.append([float(t) for t in tokens])
        except ValueError as exc:
            raise CloudFormatError(f"{path}: {exc}", f"line {lineno}") from exc
    data = np.array(rows, dtype=np.float64).reshape(-1, width or 3)
    return _cloud_from_columns(data, path)


def save_xyz(cloud: PointCloud, path: Path) -> Path:
    path = Path(path)
    data = cloud.points if cloud.normals is None else np.hstack([cloud.points, cloud.normals])
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, data, fmt="%.9g")
    return path


def load_cloud(path: Path) -> PointCloud:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".ply":
        return load_ply(path)
    if suffix in (".xyz", ".txt"):
        return load_xyz(path)
    raise CloudFormatError(f"{path}: unknown cloud format {suffix or '(no suffix)'!r}")


def save_cloud(cloud: PointCloud, path: Path, binary: bool = True) -> Path:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".ply":
        return save_ply(cloud, path, binary=binary)
    if suffix in (".xyz", ".txt"):
        return save_xyz(cloud, path)
    raise CloudFormatError(f"{path}: unknown cloud format {suffix or '(no suffix)'!r}")


# ---------------------------------------------------------------------------
# Poses
# ---------------------------------------------------------------------------


def load_pose(path: Path) -> np.ndarray:
    """4x4 row-major rigid transform in meters."""
    path = Path(path)
    try:
        pose = np.loadtxt(path, dtype=np.float64)
    except ValueError as exc:
        raise InvalidInputError(f"{path}: pose file is not numeric ({exc})") from exc
    if pose.shape != (4, 4):
        raise InvalidInputError(f"{path}: expected 4 rows of 4 values, got shape {pose.shape}")
    if not np.allclose(pose[3], [0.0, 0.0, 0.0, 1.0]):
        raise InvalidInputError(f"{path}: last pose row must be 0 0 0 1")
    check_rotation(pose[:3, :3])
    return pose


def save_pose(pose: np.ndarray, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.asarray(pose, dtype=np.float64).reshape(4, 4), fmt="%.17g")
    return path


# ---------------------------------------------------------------------------
# Descriptor files
# ---------------------------------------------------------------------------


@dataclass
class DescriptorSet:
    """Descriptors of one cloud, row i belonging to keypoint i."""

    values: np.ndarray  # (count, dim) float32
    keypoints: np.ndarray  # (count, 3)
    indices: np.ndarray  # (count,) indices into the described cloud
    mode: str
    bandwidth: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        self.values = values if values.ndim == 2 else values.reshape(len(values), -1)
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 3)
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        if not len(self.values) == len(self.keypoints) == len(self.indices):
            raise ShapeMismatchError(
                f"{len(self.values)} descriptors for {len(self.keypoints)} keypoints"
            )

    def __len__(self) -> int:
        return len(self.values)

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def save_descriptors(descriptors: DescriptorSet, path: Path) -> Path:
    manifest = {
        "count": len(descriptors),
        "dim": descriptors.dim,
        "mode": descriptors.mode,
        "bandwidth": descriptors.bandwidth,
        "keypoints": descriptors.keypoints.tolist(),
        "indices": descriptors.indices.tolist(),
    }
    return write_container(path, DESCRIPTOR_TAG, manifest, [("descriptors", descriptors.values)])


def load_descriptors(path: Path) -> DescriptorSet:
    manifest, start = read_manifest(path, DESCRIPTOR_TAG)
    try:
        count, dim = int(manifest["count"]), int(manifest["dim"])
        entries = manifest["tensors"]
        mode, bandwidth = manifest["mode"], int(manifest["bandwidth"])
        keypoints, indices = manifest["keypoints"], manifest["indices"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptManifestError(f"{path}: descriptor manifest is incomplete ({exc})") from exc
    if len(entries) != 1 or tuple(entries[0]["shape"]) != (count, dim):
        raise ShapeMismatchError(f"{path}: payload shape does not match count={count}, dim={dim}")
    values = read_tensors(path, manifest, start)["descriptors"]
    return DescriptorSet(values, np.array(keypoints).reshape(-1, 3), indices, mode, bandwidth)


def cloud_bounds(cloud: PointCloud) -> Tuple[np.ndarray, np.ndarray]:
    return cloud.points.min(axis=0), cloud.points.max(axis=0)

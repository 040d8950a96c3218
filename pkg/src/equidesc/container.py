"""Binary artifact container shared by checkpoints and descriptor files.

Layout: 8-byte little-endian header length, a UTF-8 JSON manifest, then the
tensors as little-endian float32 in manifest order. The manifest lists every
tensor as {"name", "shape", "offset", "nbytes"} with offsets relative to the
start of the payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .errors import CorruptManifestError, TruncatedPayloadError


HEADER = struct.Struct("<Q")
PAYLOAD_DTYPE = np.dtype("<f4")


def write_container(path: Path, tag: str, manifest: Dict, tensors: List[Tuple[str, np.ndarray]]) -> Path:
    path = Path(path)
    entries = []
    offset = 0
    blobs = []
    for name, tensor in tensors:
        blob = np.ascontiguousarray(tensor, dtype=PAYLOAD_DTYPE).tobytes()
        entries.append(
            {"name": name, "shape": list(np.shape(tensor)), "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    body = dict(manifest)
    body["format"] = tag
    body["tensors"] = entries
    header = json.dumps(body, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(HEADER.pack(len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    return path


def read_manifest(path: Path, tag: str) -> Tuple[Dict, int]:
    """Manifest and the byte offset where the payload starts."""
    path = Path(path)
    with path.open("rb") as fh:
        raw = fh.read(HEADER.size)
        if len(raw) != HEADER.size:
            raise CorruptManifestError(f"{path}: file too short for a header")
        (length,) = HEADER.unpack(raw)
        header = fh.read(length)
    if len(header) != length:
        raise CorruptManifestError(f"{path}: manifest cut short ({len(header)} of {length} bytes)")
    try:
        manifest = json.loads(header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptManifestError(f"{path}: manifest is not valid JSON ({exc})") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != tag:
        raise CorruptManifestError(f"{path}: expected format tag {tag!r}")
    entries = manifest.get("tensors")
    if not isinstance(entries, list):
        raise CorruptManifestError(f"{path}: manifest has no tensor table")
    for entry in entries:
        if not isinstance(entry, dict) or not {"name", "shape", "offset", "nbytes"} <= set(entry):
            raise CorruptManifestError(f"{path}: malformed tensor entry {entry!r}")
    return manifest, HEADER.size + length


def read_tensors(path: Path, manifest: Dict, start: int) -> Dict[str, np.ndarray]:
    """Tensors named in the manifest. Shapes must already be validated."""
    payload = Path(path).read_bytes()[start:]
    tensors: Dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        shape = tuple(int(s) for s in entry["shape"])
        offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        if nbytes != int(np.prod(shape, dtype=np.int64)) * PAYLOAD_DTYPE.itemsize:
            raise CorruptManifestError(f"{entry['name']}: byte count does not match shape {shape}")
        if offset + nbytes > len(payload):
            raise TruncatedPayloadError(
                f"{entry['name']}: needs bytes {offset}..{offset + nbytes}, payload has {len(payload)}"
            )
        data = np.frombuffer(payload, dtype=PAYLOAD_DTYPE, count=nbytes // 4, offset=offset)
        tensors[entry["name"]] = data.astype(np.float32).reshape(shape)
    return tensors

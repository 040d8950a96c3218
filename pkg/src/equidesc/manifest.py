"""Run manifests written next to every command's outputs."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence

from src import __version__


MANIFEST_NAME = "manifest.json"


def file_digest(path: Path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _build_manifest(base_dir: Path) -> List[str]:
    manifest: List[str] = []
    for path in sorted(Path(base_dir).rglob("*")):
        if path.is_dir():
            continue
        manifest.append(str(path.relative_to(base_dir)))
    return manifest


def input_digests(paths: Sequence[Path]) -> Dict[str, str]:
    """sha256 of every input file; directories contribute each file they hold."""
    digests: Dict[str, str] = {}
    for path in paths:
        path = Path(path)
        if path.is_dir():
            for rel in _build_manifest(path):
                digests[str(path / rel)] = file_digest(path / rel)
        elif path.exists():
            digests[str(path)] = file_digest(path)
    return digests


@dataclass
class RunManifest:
    command: str
    config: Dict
    seed: int
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict = field(default_factory=dict)
    version: str = __version__
    wall_clock_seconds: float = 0.0
    started_at: float = field(default_factory=time.time)

    def finish(self) -> "RunManifest":
        self.wall_clock_seconds = round(time.time() - self.started_at, 3)
        return self

    def to_dict(self) -> Dict:
        payload = asdict(self)
        payload.pop("started_at")
        return payload

    def write(self, path: Path) -> Path:
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, default=str) + "\n")
        return path

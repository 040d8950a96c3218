from __future__ import annotations

from pathlib import Path
from typing import Dict, Optional

from pydantic import ValidationError

from .config import DecoderConfig, EncoderConfig, SupportSpec
from .container import read_manifest, read_tensors, write_container
from .errors import CorruptManifestError, ShapeMismatchError
from .network import ModelWeights, expected_shapes


CHECKPOINT_TAG = "equidesc-ckpt-v1"


def save_checkpoint(weights: ModelWeights, path: Path, state: Optional[Dict[str, int]] = None) -> Path:
    manifest = {
        "config": {
            "support": weights.support.model_dump(mode="json"),
            "encoder": weights.encoder.model_dump(mode="json"),
            "decoder": weights.decoder.model_dump(mode="json"),
        },
        "state": dict(weights.state if state is None else state),
    }
    tensors = [(name, weights.tensors[name]) for name in weights.names()]
    return write_container(path, CHECKPOINT_TAG, manifest, tensors)


def inspect_checkpoint(path: Path) -> Dict:
    """Manifest only; the tensor payload is not read."""
    manifest, _ = read_manifest(path, CHECKPOINT_TAG)
    return manifest


def _configs(manifest: Dict):
    config = manifest.get("config")
    if not isinstance(config, dict):
        raise CorruptManifestError("Checkpoint manifest has no config block")
    try:
        return (
            SupportSpec.model_validate(config["support"]),
            EncoderConfig.model_validate(config["encoder"]),
            DecoderConfig.model_validate(config["decoder"]),
        )
    except (KeyError, ValidationError) as exc:
        raise CorruptManifestError(f"Checkpoint config is invalid: {exc}") from exc


def load_checkpoint(path: Path) -> ModelWeights:
    manifest, start = read_manifest(path, CHECKPOINT_TAG)
    support, encoder, decoder = _configs(manifest)
    expected = expected_shapes(encoder, decoder)
    listed = {entry["name"]: tuple(entry["shape"]) for entry in manifest["tensors"]}
    if set(listed) != set(expected):
        raise ShapeMismatchError(
            f"Checkpoint tensors {sorted(listed)} do not match the configured model"
        )
    for name, shape in expected.items():
        if listed[name] != shape:
            raise ShapeMismatchError(f"{name}: manifest shape {listed[name]}, config implies {shape}")
    tensors = read_tensors(path, manifest, start)
    state = {key: int(value) for key, value in (manifest.get("state") or {}).items()}
    return ModelWeights(support, encoder, decoder, tensors, state)

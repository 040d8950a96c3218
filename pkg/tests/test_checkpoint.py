from __future__ import annotations

import json
import struct

import numpy as np
import pytest

from src.equidesc.checkpoint import inspect_checkpoint, load_checkpoint, save_checkpoint
from src.equidesc.errors import CorruptManifestError, ShapeMismatchError, TruncatedPayloadError


def _rewrite_manifest(path, edit):
    raw = path.read_bytes()
    (length,) = struct.unpack("<Q", raw[:8])
    manifest = json.loads(raw[8 : 8 + length])
    edit(manifest)
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path.write_bytes(struct.pack("<Q", len(header)) + header + raw[8 + length :])


def test_round_trip_is_bitwise(tiny_weights, tmp_path):
    path = save_checkpoint(tiny_weights, tmp_path / "model.bin", state={"iteration": 7})
    loaded = load_checkpoint(path)
    assert loaded.names() == tiny_weights.names()
    for name in tiny_weights.names():
        assert loaded.tensors[name].tobytes() == tiny_weights.tensors[name].tobytes()
    assert loaded.state == {"iteration": 7}
    assert loaded.encoder == tiny_weights.encoder
    assert loaded.support == tiny_weights.support


def test_saving_twice_gives_identical_bytes(tiny_weights, tmp_path):
    a = save_checkpoint(tiny_weights, tmp_path / "a.bin").read_bytes()
    b = save_checkpoint(tiny_weights, tmp_path / "b.bin").read_bytes()
    assert a == b


def test_inspect_reads_manifest_only(tiny_weights, tmp_path):
    path = save_checkpoint(tiny_weights, tmp_path / "model.bin")
    manifest = inspect_checkpoint(path)
    assert manifest["format"] == "equidesc-ckpt-v1"
    assert manifest["config"]["encoder"]["channels"] == [3, 1]
    names = [entry["name"] for entry in manifest["tensors"]]
    assert names == tiny_weights.names()


def test_truncated_payload(tiny_weights, tmp_path):
    path = save_checkpoint(tiny_weights, tmp_path / "model.bin")
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(TruncatedPayloadError):
        load_checkpoint(path)


def test_edited_shape_is_a_mismatch(tiny_weights, tmp_path):
    path = save_checkpoint(tiny_weights, tmp_path / "model.bin")

    def edit(manifest):
        for entry in manifest["tensors"]:
            if entry["name"] == "dec1.bias":
                entry["shape"] = [5]

    _rewrite_manifest(path, edit)
    with pytest.raises(ShapeMismatchError):
        load_checkpoint(path)


def test_missing_tensor_is_a_mismatch(tiny_weights, tmp_path):
    path = save_checkpoint(tiny_weights, tmp_path / "model.bin")
    _rewrite_manifest(path, lambda m: m["tensors"].pop())
    with pytest.raises(ShapeMismatchError):
        load_checkpoint(path)


@pytest.mark.parametrize(
    "payload",
    [b"", b"\x01\x02", struct.pack("<Q", 4) + b"nope", struct.pack("<Q", 100) + b"{}"],
)
def test_garbage_is_a_corrupt_manifest(tmp_path, payload):
    path = tmp_path / "bad.bin"
    path.write_bytes(payload)
    with pytest.raises(CorruptManifestError):
        load_checkpoint(path)


def test_wrong_format_tag(tiny_weights, tmp_path):
    path = save_checkpoint(tiny_weights, tmp_path / "model.bin")
    _rewrite_manifest(path, lambda m: m.update(format="equidesc-desc-v1"))
    with pytest.raises(CorruptManifestError):
        inspect_checkpoint(path)


def test_invalid_config_is_corrupt(tiny_weights, tmp_path):
    path = save_checkpoint(tiny_weights, tmp_path / "model.bin")
    _rewrite_manifest(path, lambda m: m["config"]["encoder"].update(channels=[3]))
    with pytest.raises(CorruptManifestError):
        load_checkpoint(path)


def test_float64_weights_are_stored_as_float32(tiny_weights, tmp_path):
    from tests.helpers import as_float64

    path = save_checkpoint(as_float64(tiny_weights), tmp_path / "model.bin")
    loaded = load_checkpoint(path)
    assert loaded.tensors["dec0.weight"].dtype == np.float32
    assert np.array_equal(loaded.tensors["dec0.weight"], tiny_weights.tensors["dec0.weight"])

from __future__ import annotations

import json

import numpy as np
import pytest
from typer.testing import CliRunner

from src.cli import app
from src.equidesc.bench import FragmentPair, save_scene
from src.equidesc.checkpoint import load_checkpoint, save_checkpoint
from src.equidesc.cloud_io import DescriptorSet, load_descriptors, save_cloud, save_descriptors
from src.equidesc.config import SceneSpec
from src.equidesc.core import PointCloud, rigid_transform, sample_uniform_rotation
from src.equidesc.synthetic import generate_synthetic_scene
from tests.helpers import planar_patch


runner = CliRunner()


def _last_json(output: str) -> dict:
    lines = [line for line in output.splitlines() if line.strip().startswith("{")]
    return json.loads(lines[-1])


@pytest.fixture
def checkpoint(tmp_path, tiny_weights):
    return save_checkpoint(tiny_weights, tmp_path / "model" / "checkpoint.bin")


@pytest.fixture
def oracle_scene(tmp_path, rng):
    """Pairs whose target is exactly the moved source, with coordinate descriptors."""
    scene_dir, desc_dir = tmp_path / "scene", tmp_path / "desc"
    pairs = []
    for _ in range(2):
        source = PointCloud(rng.uniform(-1.0, 1.0, (150, 3)))
        pose = rigid_transform(sample_uniform_rotation(rng).to_matrix(), rng.uniform(-0.5, 0.5, 3))
        pairs.append(FragmentPair(source, source.transform(pose), pose))
    save_scene(scene_dir, pairs)
    for idx, pair in enumerate(pairs):
        name = f"pair_{idx:03d}"
        # PLY stores float32 coordinates
        src = pair.source.points.astype(np.float32).astype(np.float64)
        tgt = pair.target.points.astype(np.float32).astype(np.float64)
        moved = src @ pair.gt_pose[:3, :3].T + pair.gt_pose[:3, 3]
        save_descriptors(DescriptorSet(moved, src, np.arange(150), "raw", 1), desc_dir / f"{name}_source.desc")
        save_descriptors(DescriptorSet(tgt, tgt, np.arange(150), "raw", 1), desc_dir / f"{name}_target.desc")
    return scene_dir, desc_dir


def test_synth_writes_scene_and_manifest(tmp_path):
    out = tmp_path / "scene"
    result = runner.invoke(app, ["synth", "--out-dir", str(out), "--pairs", "2", "--points", "300", "--seed", "4"])
    assert result.exit_code == 0, result.output
    assert len(list(out.glob("pair_*.ply"))) == 4
    assert len(list(out.glob("pair_*_pose.txt"))) == 2
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "synth"
    assert manifest["seed"] == 4
    assert set(manifest["outputs"]["overlaps"]) == {"pair_000", "pair_001"}
    assert len(list((out / "logs").glob("synth_*.json"))) == 1


def test_synth_rejects_bad_overlap(tmp_path):
    result = runner.invoke(app, ["synth", "--out-dir", str(tmp_path), "--overlap", "1.2"])
    assert result.exit_code == 2
    assert "ValidationError" in result.output


def test_unknown_preset_is_invalid_input(tmp_path):
    result = runner.invoke(app, ["synth", "--out-dir", str(tmp_path), "--preset", "nope"])
    assert result.exit_code == 2


def test_inspect_checkpoint(checkpoint):
    result = runner.invoke(app, ["inspect-checkpoint", str(checkpoint)])
    assert result.exit_code == 0, result.output
    manifest = json.loads(result.stdout)
    assert manifest["config"]["support"]["bandwidth"] == 2
    assert "enc0.filter" in [entry["name"] for entry in manifest["tensors"]]


def test_inspect_garbage_is_a_runtime_failure(tmp_path):
    path = tmp_path / "garbage.bin"
    path.write_bytes(b"\x05\x00\x00\x00\x00\x00\x00\x00hello")
    result = runner.invoke(app, ["inspect-checkpoint", str(path)])
    assert result.exit_code == 1
    assert "CorruptManifestError" in result.output


def test_evaluate_from_descriptor_files(tmp_path, oracle_scene):
    scene_dir, desc_dir = oracle_scene
    out = tmp_path / "eval"
    result = runner.invoke(
        app, ["evaluate", "--scene", str(scene_dir), "--descriptors", str(desc_dir), "--out-dir", str(out)]
    )
    assert result.exit_code == 0, result.output
    summary = _last_json(result.stdout)
    assert summary["recall"] == 1.0
    assert summary["evaluated_pairs"] == 2
    assert json.loads((out / "metrics.json").read_text()) == summary
    assert (out / "curve.csv").read_text().splitlines()[0] == "tau2,recall"
    assert (out / "pairs.csv").exists()
    assert (out / "manifest.json").exists()


def test_evaluate_needs_exactly_one_source(tmp_path, oracle_scene, checkpoint):
    scene_dir, desc_dir = oracle_scene
    neither = runner.invoke(app, ["evaluate", "--scene", str(scene_dir), "--out-dir", str(tmp_path / "a")])
    both = runner.invoke(
        app,
        ["evaluate", "--scene", str(scene_dir), "--out-dir", str(tmp_path / "b"),
         "--descriptors", str(desc_dir), "--checkpoint", str(checkpoint)],
    )
    assert neither.exit_code == 2
    assert both.exit_code == 2


def test_min_overlap_is_inclusive(tmp_path, oracle_scene):
    scene_dir, desc_dir = oracle_scene
    result = runner.invoke(
        app,
        ["evaluate", "--scene", str(scene_dir), "--descriptors", str(desc_dir),
         "--out-dir", str(tmp_path / "eval"), "--min-overlap", "1.0"],
    )
    assert result.exit_code == 0, result.output
    assert _last_json(result.stdout)["evaluated_pairs"] == 2


def test_describe_samples_keypoints(tmp_path, rng, checkpoint):
    cloud_path = save_cloud(planar_patch(rng, n=800), tmp_path / "cloud.ply")
    out = tmp_path / "desc" / "cloud.desc"
    result = runner.invoke(
        app,
        ["describe", "--cloud", str(cloud_path), "--checkpoint", str(checkpoint), "--out", str(out),
         "--sample-n", "5", "--mode", "raw", "--no-preprocess"],
    )
    assert result.exit_code == 0, result.output
    descriptors = load_descriptors(out)
    assert len(descriptors) == 5
    assert descriptors.dim == 64
    manifest = json.loads(out.with_suffix(".manifest.json").read_text())
    assert manifest["outputs"]["count"] == 5


def test_describe_argument_errors(tmp_path, rng, checkpoint):
    cloud_path = save_cloud(planar_patch(rng), tmp_path / "cloud.ply")
    base = ["describe", "--cloud", str(cloud_path), "--checkpoint", str(checkpoint), "--out", str(tmp_path / "x.desc")]
    assert runner.invoke(app, base).exit_code == 2
    assert runner.invoke(app, base + ["--sample-n", "3", "--mode", "sideways"]).exit_code == 2
    assert runner.invoke(app, base + ["--sample-n", "100000"]).exit_code == 2


def test_rotate_benchmark_keeps_pairs(tmp_path, oracle_scene):
    scene_dir, _ = oracle_scene
    out = tmp_path / "rotated"
    result = runner.invoke(app, ["rotate-benchmark", "--scene", str(scene_dir), "--out-dir", str(out), "--seed", "3"])
    assert result.exit_code == 0, result.output
    assert sorted(p.name for p in out.glob("pair_*")) == sorted(p.name for p in scene_dir.glob("pair_*"))


def test_check_reports_sweep(tmp_path, checkpoint):
    out = tmp_path / "check"
    result = runner.invoke(app, ["check", "--checkpoint", str(checkpoint), "--out-dir", str(out)])
    assert result.exit_code == 0, result.output
    summary = _last_json(result.stdout)
    assert set(summary["checks"]) == {"median_oriented", "separation_at_pi", "unoriented_spearman"}
    assert len((out / "sweep.csv").read_text().splitlines()) == 1 + 12 * 10


def test_describe_rejects_keypoints_outside_the_cloud(tmp_path, rng, checkpoint):
    cloud_path = save_cloud(planar_patch(rng), tmp_path / "cloud.ply")
    keypoints = save_cloud(PointCloud([[0.0, 0.0, 0.0], [5.0, 5.0, 5.0]]), tmp_path / "keypoints.xyz")
    result = runner.invoke(
        app,
        ["describe", "--cloud", str(cloud_path), "--checkpoint", str(checkpoint), "--out", str(tmp_path / "x.desc"),
         "--keypoints", str(keypoints), "--no-preprocess"],
    )
    assert result.exit_code == 2
    assert "Keypoint 1" in result.output


def test_key_error_inside_a_command_is_a_runtime_failure(tmp_path, monkeypatch):
    import src.cli as cli

    def broken(directory):
        raise KeyError("pair_000")

    monkeypatch.setattr(cli, "load_scene", broken)
    result = runner.invoke(app, ["rotate-benchmark", "--scene", str(tmp_path), "--out-dir", str(tmp_path / "out")])
    assert result.exit_code == 1
    assert "KeyError" in result.output


def test_train_rejects_zero_epochs(tmp_path):
    out = tmp_path / "model"
    result = runner.invoke(app, ["train", "--data", str(tmp_path), "--out-dir", str(out), "--epochs", "0"])
    assert result.exit_code == 2
    assert "ValidationError" in result.output
    assert not out.exists()


TRAIN_ARGS = ["--preset", "desk", "--batch", "1", "--keypoints-per-fragment", "2", "--seed", "5"]


@pytest.fixture
def small_scene(tmp_path):
    """A one-pair scene on disk, plus its fragments as a training directory."""
    scene = generate_synthetic_scene(np.random.default_rng(6), SceneSpec(pairs=1, points=1500, noise=0.002))
    data = tmp_path / "clouds"
    data.mkdir()
    save_cloud(scene[0].source, data / "a.ply")
    save_cloud(scene[0].target, data / "b.ply")
    save_scene(tmp_path / "scene", scene)
    return data, tmp_path / "scene"


def _train(data, out, *extra):
    result = runner.invoke(app, ["train", "--data", str(data), "--out-dir", str(out), *TRAIN_ARGS, *extra])
    assert result.exit_code == 0, result.output
    return out / "checkpoint.bin"


@pytest.mark.slow
def test_resume_continues_the_iteration_count(tmp_path, small_scene):
    data, _ = small_scene
    first = _train(data, tmp_path / "first", "--max-iterations", "2")
    second = _train(data, tmp_path / "second", "--max-iterations", "4", "--resume", str(first))
    assert load_checkpoint(first).state["iteration"] == 2
    assert load_checkpoint(second).state["iteration"] == 4
    rows = (tmp_path / "second" / "loss.csv").read_text().splitlines()
    assert [row.split(",")[0] for row in rows[1:]] == ["2", "3"]
    manifest = json.loads((tmp_path / "second" / "manifest.json").read_text())
    assert manifest["outputs"]["iterations"] == 4


@pytest.mark.slow
def test_fixed_seed_runs_are_byte_identical(tmp_path, small_scene):
    data, scene_dir = small_scene
    roots = []
    for idx, threads in enumerate(("1", "2")):
        root = tmp_path / f"run{idx}"
        checkpoint = _train(data, root / "model", "--max-iterations", "2", "--threads", threads)
        shared = ["--checkpoint", str(checkpoint), "--preset", "desk", "--seed", "3", "--threads", threads]
        described = runner.invoke(
            app,
            ["describe", "--cloud", str(data / "a.ply"), "--out", str(root / "desc" / "a.desc"),
             "--sample-n", "6", "--mode", "self", *shared],
        )
        assert described.exit_code == 0, described.output
        evaluated = runner.invoke(
            app,
            ["evaluate", "--scene", str(scene_dir), "--out-dir", str(root / "eval"),
             "--n-keypoints", "20", "--rotate", *shared],
        )
        assert evaluated.exit_code == 0, evaluated.output
        roots.append(root)
    for name in ("model/checkpoint.bin", "model/loss.csv", "desc/a.desc",
                 "eval/metrics.json", "eval/pairs.csv", "eval/curve.csv"):
        assert (roots[0] / name).read_bytes() == (roots[1] / name).read_bytes(), name


@pytest.mark.slow
def test_rotating_the_benchmark_keeps_lrf_recall(tmp_path, desk_preset, desk_weights):
    scene_dir = tmp_path / "scene"
    save_scene(scene_dir, generate_synthetic_scene(np.random.default_rng(8), desk_preset.scene))
    checkpoint = save_checkpoint(desk_weights, tmp_path / "desk" / "checkpoint.bin")
    summaries = {}
    for name, extra in (("plain", []), ("rotated", ["--rotate"])):
        result = runner.invoke(
            app,
            ["evaluate", "--scene", str(scene_dir), "--checkpoint", str(checkpoint), "--out-dir",
             str(tmp_path / name), "--preset", "desk", "--mode", "lrf", "--n-keypoints", "120", *extra],
        )
        assert result.exit_code == 0, result.output
        summaries[name] = _last_json(result.stdout)
    assert summaries["rotated"]["rotated"] is True
    assert abs(summaries["rotated"]["recall"] - summaries["plain"]["recall"]) <= 0.05

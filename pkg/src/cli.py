"""Command-line surface: synth, train, describe, evaluate, check,
rotate-benchmark and inspect-checkpoint."""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import typer
from pydantic import BaseModel, ValidationError
from scipy.spatial import cKDTree

from src.equidesc import (
    ConsolePalette,
    DescribedPair,
    EquidescRuntimeError,
    InvalidInputError,
    NeighborhoodDataset,
    RunManifest,
    equivariance_sweep,
    evaluate_pairs,
    generate_synthetic_scene,
    init_weights,
    input_digests,
    inspect_checkpoint,
    load_checkpoint,
    load_cloud,
    load_descriptors,
    load_preset,
    load_scene,
    log_run_result,
    log_status,
    log_text_block,
    make_rotated_benchmark,
    preprocess_cloud,
    registration_recall,
    sample_keypoints,
    save_checkpoint,
    save_descriptors,
    save_scene,
    train,
    write_curve,
    write_loss_csv,
    write_pair_rows,
    write_sweep,
)
from src.equidesc.cloud_io import cloud_bounds
from src.equidesc.manifest import MANIFEST_NAME
from src.equidesc.pipeline import describe_keypoints


app = typer.Typer(help="Rotation-equivariant local 3D descriptors from spherical CNNs")


def _fail(command: str, exc: BaseException, code: int) -> None:
    record = {"error": type(exc).__name__, "message": str(exc), "command": command}
    log_status("error", str(exc), ConsolePalette.ERROR)
    print(json.dumps(record), file=sys.stderr)
    raise typer.Exit(code)


def guarded(command: str):
    """Map library errors to exit codes: 2 for invalid input, 1 otherwise."""

    def decorate(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except typer.Exit:
                raise
            except (InvalidInputError, ValidationError, typer.BadParameter) as exc:
                _fail(command, exc, 2)
            except Exception as exc:  # noqa: BLE001
                _fail(command, exc, 1)

        return wrapper

    return decorate


def _override(model: BaseModel, **updates) -> BaseModel:
    """Validated copy with every non-None update applied."""
    data = model.model_dump()
    data.update({key: value for key, value in updates.items() if value is not None})
    return type(model).model_validate(data)


def _finish(manifest: RunManifest, out_dir: Path, manifest_path: Optional[Path] = None) -> None:
    manifest.finish()
    written = manifest.write(manifest_path or out_dir / MANIFEST_NAME)
    log_run_result(out_dir / "logs", manifest.command, manifest.to_dict())
    log_status("manifest", str(written), ConsolePalette.DIM)


PresetOption = typer.Option("full", "--preset", help="Configuration preset (full or desk)")
SeedOption = typer.Option(0, "--seed", help="Seed for every random draw of the command")
ThreadsOption = typer.Option(1, "--threads", min=1, help="Worker threads for per-keypoint work")


@app.command()
@guarded("synth")
def synth(
    out_dir: Path = typer.Option(..., "--out-dir"),
    pairs: Optional[int] = typer.Option(None, "--pairs"),
    points: Optional[int] = typer.Option(None, "--points"),
    noise: Optional[float] = typer.Option(None, "--noise"),
    overlap: Optional[float] = typer.Option(None, "--overlap"),
    seed: int = SeedOption,
    preset: str = PresetOption,
):
    """Write a synthetic scene of fragment pairs with ground-truth poses."""
    cfg = load_preset(preset)
    spec = _override(cfg.scene, pairs=pairs, points=points, noise=noise, overlap=overlap)
    manifest = RunManifest("synth", {"scene": spec.model_dump()}, seed)
    scene = generate_synthetic_scene(np.random.default_rng(seed), spec)
    written = save_scene(out_dir, scene)
    for pair in scene:
        log_status("pair", f"{pair.name}: overlap {pair.overlap:.3f}", ConsolePalette.INFO)
    manifest.outputs = {
        "files": [str(path) for path in written],
        "overlaps": {pair.name: pair.overlap for pair in scene},
    }
    _finish(manifest, out_dir)
    log_status("synth", f"{len(scene)} pairs in {out_dir}", ConsolePalette.SUCCESS)


@app.command("train")
@guarded("train")
def train_command(
    data: Path = typer.Option(..., "--data", help="Directory of training clouds (.ply/.xyz)"),
    out_dir: Path = typer.Option(..., "--out-dir"),
    lr: Optional[float] = typer.Option(None, "--lr"),
    batch: Optional[int] = typer.Option(None, "--batch"),
    decay_every: Optional[int] = typer.Option(None, "--decay-every"),
    epochs: Optional[int] = typer.Option(None, "--epochs"),
    max_iterations: Optional[int] = typer.Option(None, "--max-iterations"),
    keypoints_per_fragment: int = typer.Option(50, "--keypoints-per-fragment", min=1),
    augment: bool = typer.Option(True, "--augment/--no-augment"),
    resume: Optional[Path] = typer.Option(None, "--resume", help="Checkpoint to continue from"),
    seed: int = SeedOption,
    threads: int = ThreadsOption,
    preset: str = PresetOption,
):
    """Train the encoder-decoder on unoriented neighborhoods."""
    cfg = load_preset(preset)
    train_cfg = _override(
        cfg.train,
        learning_rate=lr,
        batch_size=batch,
        decay_interval=decay_every,
        epochs=epochs,
        max_iterations=max_iterations,
        augment_rotation=augment,
        seed=seed,
    )
    cfg = cfg.model_copy(update={"train": train_cfg})
    files = sorted(p for p in Path(data).iterdir() if p.suffix.lower() in (".ply", ".xyz"))
    if not files:
        raise InvalidInputError(f"{data}: no training clouds found")
    rng = np.random.default_rng(seed)
    dataset = NeighborhoodDataset.from_fragments(
        [load_cloud(path) for path in files],
        cfg.support.radius,
        keypoints_per_fragment,
        cfg.eval.voxel,
        rng,
    )
    log_status("train", f"{len(dataset)} neighborhoods from {len(files)} clouds")
    if resume is not None:
        weights = load_checkpoint(resume)
        log_status("resume", f"continuing at iteration {weights.state.get('iteration', 0)}")
    else:
        weights = init_weights(cfg.support, cfg.encoder, cfg.decoder, rng)

    def report(record):
        if record.iteration % 50 == 0:
            log_status("iter", f"{record.iteration:6d}  lr {record.lr:.2e}  loss {record.loss:.5f}")

    manifest = RunManifest("train", cfg.model_dump(), seed, input_digests([data]))
    result = train(dataset, cfg, weights, threads=threads, on_iteration=report)
    checkpoint = save_checkpoint(result.weights, out_dir / "checkpoint.bin")
    losses = write_loss_csv(result.history, out_dir / "loss.csv")
    manifest.outputs = {
        "checkpoint": str(checkpoint),
        "loss_csv": str(losses),
        "iterations": result.weights.state.get("iteration", 0),
    }
    _finish(manifest, out_dir)
    if result.history:
        log_status(
            "train",
            f"loss {result.history[0].loss:.5f} -> {result.history[-1].loss:.5f}",
            ConsolePalette.SUCCESS,
        )


@app.command()
@guarded("describe")
def describe(
    cloud_path: Path = typer.Option(..., "--cloud"),
    checkpoint: Path = typer.Option(..., "--checkpoint"),
    out: Path = typer.Option(..., "--out", help="Descriptor file to write"),
    keypoints: Optional[Path] = typer.Option(None, "--keypoints", help="XYZ file of keypoint coordinates"),
    sample_n: Optional[int] = typer.Option(None, "--sample-n"),
    mode: str = typer.Option("self", "--mode", help="raw, self or lrf"),
    preprocess: bool = typer.Option(True, "--preprocess/--no-preprocess"),
    seed: int = SeedOption,
    threads: int = ThreadsOption,
    preset: str = PresetOption,
):
    """Compute descriptors for keypoints of one cloud."""
    if mode not in ("raw", "self", "lrf"):
        raise InvalidInputError(f"Unknown mode {mode!r}; expected raw, self or lrf")
    if (keypoints is None) == (sample_n is None):
        raise InvalidInputError("Give exactly one of --keypoints or --sample-n")
    cfg = load_preset(preset)
    weights = load_checkpoint(checkpoint)
    cloud = load_cloud(cloud_path)
    if preprocess:
        cloud = preprocess_cloud(cloud, cfg.eval)
    centers = None
    if keypoints is not None:
        centers = load_cloud(keypoints).points
        low, high = cloud_bounds(cloud)
        outside = np.any((centers < low) | (centers > high), axis=1)
        if outside.any():
            raise InvalidInputError(
                f"Keypoint {int(np.argmax(outside))} lies outside the cloud bounds"
            )
        _, indices = cKDTree(cloud.points).query(centers, k=1)
    else:
        indices = sample_keypoints(cloud, sample_n, np.random.default_rng(seed))
    result = describe_keypoints(cloud, indices, weights, mode, cfg.orient, threads, centers)
    save_descriptors(result, out)
    manifest = RunManifest(
        "describe",
        {"mode": mode, "orient": cfg.orient.model_dump(), "eval": cfg.eval.model_dump()},
        seed,
        input_digests([cloud_path, checkpoint] + ([keypoints] if keypoints else [])),
        {"descriptors": str(out), "count": len(result), "dim": result.dim},
    )
    _finish(manifest, out.parent, out.with_suffix(".manifest.json"))
    log_status("describe", f"{len(result)} descriptors of length {result.dim} -> {out}", ConsolePalette.SUCCESS)


def _described_from_files(scene, directory: Path):
    described = []
    for pair in scene:
        source = load_descriptors(directory / f"{pair.name}_source.desc")
        target = load_descriptors(directory / f"{pair.name}_target.desc")
        described.append(
            DescribedPair(pair, source.keypoints, source.values, target.keypoints, target.values)
        )
    return described


@app.command()
@guarded("evaluate")
def evaluate(
    scene_dir: Path = typer.Option(..., "--scene"),
    out_dir: Path = typer.Option(..., "--out-dir"),
    checkpoint: Optional[Path] = typer.Option(None, "--checkpoint"),
    descriptors: Optional[Path] = typer.Option(
        None, "--descriptors", help="Directory of pair_XXX_{source,target}.desc files"
    ),
    mode: str = typer.Option("lrf", "--mode", help="raw, self or lrf"),
    rotate: bool = typer.Option(False, "--rotate", help="Haar-rotate every fragment first"),
    tau1: Optional[float] = typer.Option(None, "--tau1"),
    tau2: Optional[float] = typer.Option(None, "--tau2"),
    min_overlap: Optional[float] = typer.Option(None, "--min-overlap"),
    n_keypoints: Optional[int] = typer.Option(None, "--n-keypoints"),
    mutual: Optional[bool] = typer.Option(None, "--mutual/--no-mutual"),
    seed: int = SeedOption,
    threads: int = ThreadsOption,
    preset: str = PresetOption,
):
    """Registration recall of a scene, with the tau2 sweep."""
    if (checkpoint is None) == (descriptors is None):
        raise InvalidInputError("Give exactly one of --checkpoint or --descriptors")
    if rotate and descriptors is not None:
        raise InvalidInputError("--rotate needs --checkpoint; stored descriptors cannot be rotated")
    cfg = load_preset(preset)
    eval_cfg = _override(
        cfg.eval, tau1=tau1, tau2=tau2, min_overlap=min_overlap, n_keypoints=n_keypoints, mutual=mutual
    )
    rng = np.random.default_rng(seed)
    scene = load_scene(scene_dir)
    if rotate:
        scene = make_rotated_benchmark(scene, rng)
        log_status("rotate", f"{len(scene)} pairs rotated about their centroids", ConsolePalette.DIM)
    if descriptors is not None:
        report = registration_recall(_described_from_files(scene, descriptors), eval_cfg)
    else:
        weights = load_checkpoint(checkpoint)
        report = evaluate_pairs(scene, weights, eval_cfg, rng, mode, cfg.orient, threads)

    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {**report.summary(), "mode": mode, "rotated": rotate}
    (out_dir / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_pair_rows(report, out_dir / "pairs.csv")
    write_curve(report, out_dir / "curve.csv")
    inputs = [scene_dir] + [p for p in (checkpoint, descriptors) if p is not None]
    manifest = RunManifest(
        "evaluate",
        {"eval": eval_cfg.model_dump(), "orient": cfg.orient.model_dump(), "mode": mode, "rotate": rotate},
        seed,
        input_digests(inputs),
        {**summary, "overlaps": {row.name: row.overlap for row in report.pairs}},
    )
    _finish(manifest, out_dir)
    log_text_block("curve", "\n".join(f"tau2={t:.2f}  recall={r:.3f}" for t, r in report.curve))
    log_status("recall", f"{report.recall:.3f} ({report.registered}/{report.evaluated})", ConsolePalette.RESULT)
    print(json.dumps(summary, sort_keys=True))


@app.command()
@guarded("check")
def check(
    out_dir: Path = typer.Option(..., "--out-dir"),
    checkpoint: Optional[Path] = typer.Option(None, "--checkpoint"),
    strict: bool = typer.Option(False, "--strict", help="Exit 1 when a threshold fails"),
    seed: int = SeedOption,
    preset: str = PresetOption,
):
    """Rotation-equivariance sweep of the encoder (untrained by default)."""
    cfg = load_preset(preset)
    rng = np.random.default_rng(seed)
    if checkpoint is not None:
        weights = load_checkpoint(checkpoint)
    else:
        weights = init_weights(cfg.support, cfg.encoder, cfg.decoder, rng)
    report = equivariance_sweep(weights, rng)
    sweep_csv = write_sweep(report, out_dir / "sweep.csv")
    summary = {
        "median_oriented": report.median_oriented,
        "spearman_unoriented": report.spearman,
        "separation_at_pi": report.separation,
        "checks": report.checks,
        "passed": report.passed,
    }
    manifest = RunManifest(
        "check",
        {"support": cfg.support.model_dump(), "encoder": cfg.encoder.model_dump()},
        seed,
        input_digests([checkpoint] if checkpoint else []),
        {"sweep_csv": str(sweep_csv), **summary},
    )
    _finish(manifest, out_dir)
    color = ConsolePalette.SUCCESS if report.passed else ConsolePalette.WARNING
    log_status("check", "passed" if report.passed else "failed", color)
    print(json.dumps(summary, sort_keys=True))
    if strict and not report.passed:
        raise EquidescRuntimeError(f"Equivariance checks failed: {report.checks}")


@app.command("rotate-benchmark")
@guarded("rotate-benchmark")
def rotate_benchmark(
    scene_dir: Path = typer.Option(..., "--scene"),
    out_dir: Path = typer.Option(..., "--out-dir"),
    seed: int = SeedOption,
):
    """Write a copy of a scene with every fragment Haar-rotated."""
    scene = make_rotated_benchmark(load_scene(scene_dir), np.random.default_rng(seed))
    written = save_scene(out_dir, scene)
    manifest = RunManifest(
        "rotate-benchmark", {}, seed, input_digests([scene_dir]), {"files": [str(p) for p in written]}
    )
    _finish(manifest, out_dir)
    log_status("rotate", f"{len(scene)} pairs -> {out_dir}", ConsolePalette.SUCCESS)


@app.command("inspect-checkpoint")
@guarded("inspect-checkpoint")
def inspect_checkpoint_command(path: Path):
    """Print a checkpoint's manifest without reading its tensors."""
    print(json.dumps(inspect_checkpoint(path), indent=2, sort_keys=True))

from .bench import (
    DescribedPair,
    FragmentPair,
    RecallReport,
    compute_overlap,
    estimate_normals,
    load_scene,
    make_rotated_benchmark,
    match_keypoints,
    preprocess_cloud,
    registration_recall,
    sample_keypoints,
    save_scene,
    voxel_downsample,
)
from .checkpoint import inspect_checkpoint, load_checkpoint, save_checkpoint
from .cloud_io import (
    DescriptorSet,
    load_cloud,
    load_descriptors,
    load_pose,
    save_cloud,
    save_descriptors,
    save_pose,
)
from .config import (
    DecoderConfig,
    EncoderConfig,
    EvalConfig,
    OrientConfig,
    Preset,
    SceneSpec,
    SupportSpec,
    TrainConfig,
    load_preset,
)
from .core import PointCloud, RotationZYZ, compose, inverse, sample_uniform_rotation
from .errors import EquidescError, EquidescRuntimeError, InvalidInputError, UnknownPresetError
from .harmonic import So3Signal, rotate_s2_signal, rotate_so3_signal, s2_correlation, so3_correlation
from .logging_utils import ConsolePalette, log_run_result, log_status, log_text_block
from .manifest import RunManifest, input_digests
from .network import Descriptor, ModelWeights, decoder_forward, encoder_forward, init_weights, make_fold_grid
from .orient import LocalFrame, canonicalize, compute_lrf, descriptor_distance, invariant_descriptor, self_orient
from .pipeline import equivariance_sweep, evaluate_pairs, write_curve, write_pair_rows, write_sweep
from .signal import SphericalSignal, build_spherical_signal
from .synthetic import generate_synthetic_scene
from .train import NeighborhoodDataset, chamfer_loss, train, write_loss_csv

__all__ = [
    "DescribedPair",
    "FragmentPair",
    "RecallReport",
    "compute_overlap",
    "estimate_normals",
    "load_scene",
    "make_rotated_benchmark",
    "match_keypoints",
    "preprocess_cloud",
    "registration_recall",
    "sample_keypoints",
    "save_scene",
    "voxel_downsample",
    "inspect_checkpoint",
    "load_checkpoint",
    "save_checkpoint",
    "DescriptorSet",
    "load_cloud",
    "load_descriptors",
    "load_pose",
    "save_cloud",
    "save_descriptors",
    "save_pose",
    "DecoderConfig",
    "EncoderConfig",
    "EvalConfig",
    "OrientConfig",
    "Preset",
    "SceneSpec",
    "SupportSpec",
    "TrainConfig",
    "load_preset",
    "PointCloud",
    "RotationZYZ",
    "compose",
    "inverse",
    "sample_uniform_rotation",
    "EquidescError",
    "EquidescRuntimeError",
    "InvalidInputError",
    "UnknownPresetError",
    "So3Signal",
    "rotate_s2_signal",
    "rotate_so3_signal",
    "s2_correlation",
    "so3_correlation",
    "ConsolePalette",
    "log_run_result",
    "log_status",
    "log_text_block",
    "RunManifest",
    "input_digests",
    "Descriptor",
    "ModelWeights",
    "decoder_forward",
    "encoder_forward",
    "init_weights",
    "make_fold_grid",
    "LocalFrame",
    "canonicalize",
    "compute_lrf",
    "descriptor_distance",
    "invariant_descriptor",
    "self_orient",
    "equivariance_sweep",
    "evaluate_pairs",
    "write_curve",
    "write_pair_rows",
    "write_sweep",
    "SphericalSignal",
    "build_spherical_signal",
    "generate_synthetic_scene",
    "NeighborhoodDataset",
    "chamfer_loss",
    "train",
    "write_loss_csv",
]

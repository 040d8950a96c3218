from __future__ import annotations

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import UnknownPresetError


PRESET_ROOT = Path(__file__).resolve().parent / "presets"


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class SupportSpec(_Frozen):
    """Neighborhood support and the spherical grid it is binned onto.

    `concentration` > 0 spreads every point over its shell with a von
    Mises-Fisher kernel of that concentration; 0 puts it in a single cell.
    """

    radius: float = Field(0.30, gt=0)
    shells: int = Field(4, ge=1)
    bandwidth: int = Field(24, ge=1)
    concentration: float = Field(0.0, ge=0, le=1e4)


class EncoderConfig(_Frozen):
    layer_bandwidths: List[Tuple[int, int]] = Field(
        default_factory=lambda: [(24, 24), (24, 24), (24, 24), (24, 4)]
    )
    channels: List[int] = Field(default_factory=lambda: [40, 40, 40, 1])
    input_shells: int = Field(4, ge=1)

    @model_validator(mode="after")
    def _check_layers(self) -> "EncoderConfig":
        if not self.layer_bandwidths:
            raise ValueError("Encoder needs at least one layer")
        if len(self.layer_bandwidths) != len(self.channels):
            raise ValueError("layer_bandwidths and channels must have the same length")
        for idx, (b_in, b_out) in enumerate(self.layer_bandwidths):
            if b_in < 1 or b_out < 1 or b_out > b_in:
                raise ValueError(f"Layer {idx}: need 1 <= output bandwidth <= input bandwidth")
            if idx and self.layer_bandwidths[idx - 1][1] != b_in:
                raise ValueError(f"Layer {idx}: input bandwidth does not chain from layer {idx - 1}")
        if any(c < 1 for c in self.channels):
            raise ValueError("Channel counts must be positive")
        return self

    @property
    def input_bandwidth(self) -> int:
        return self.layer_bandwidths[0][0]

    @property
    def descriptor_bandwidth(self) -> int:
        return self.layer_bandwidths[-1][1]

    @property
    def descriptor_length(self) -> int:
        return self.channels[-1] * (2 * self.descriptor_bandwidth) ** 3


class DecoderConfig(_Frozen):
    hidden: List[int] = Field(default_factory=lambda: [256, 128, 64])
    grid_size: int = Field(256, ge=1)

    @model_validator(mode="after")
    def _check_hidden(self) -> "DecoderConfig":
        if len(self.hidden) != 3 or any(width < 1 for width in self.hidden):
            raise ValueError("Decoder has exactly three positive hidden widths")
        return self


class TrainConfig(_Frozen):
    batch_size: int = Field(32, ge=1)
    learning_rate: float = Field(0.001, gt=0)
    decay_interval: int = Field(4000, ge=1)
    decay_factor: float = Field(0.5, gt=0, le=1)
    epochs: int = Field(14, ge=1)
    max_iterations: Optional[int] = Field(None, ge=1)
    max_points: int = Field(1024, ge=1)
    augment_rotation: bool = True
    seed: int = 0


class OrientConfig(_Frozen):
    """`refine` climbs from the chosen bin rotation to the nearest maximum of
    the map's band-limited interpolant."""

    top_k: int = Field(32, ge=1)
    strategy: Literal["density", "argmax"] = "density"
    neighborhood: Literal[3] = 3
    refine: bool = True


class EvalConfig(_Frozen):
    tau1: float = Field(0.10, gt=0)
    tau2: float = Field(0.05, gt=0, le=1)
    min_overlap: float = Field(0.30, gt=0, le=1)
    n_keypoints: int = Field(5000, ge=1)
    voxel: float = Field(0.02, gt=0)
    normal_k: int = Field(17, ge=3)
    overlap_inlier_dist: float = Field(0.05, gt=0)
    mutual: bool = False


class SceneSpec(_Frozen):
    pairs: int = Field(4, ge=1)
    points: int = Field(4000, ge=10)
    noise: float = Field(0.0, ge=0)
    overlap: float = Field(0.6, gt=0, le=1)
    extent: float = Field(1.5, gt=0)
    bumps: int = Field(6, ge=0)


class Preset(_Frozen):
    name: str
    support: SupportSpec = SupportSpec()
    encoder: EncoderConfig = EncoderConfig()
    decoder: DecoderConfig = DecoderConfig()
    train: TrainConfig = TrainConfig()
    orient: OrientConfig = OrientConfig()
    eval: EvalConfig = EvalConfig()
    scene: SceneSpec = SceneSpec()

    @model_validator(mode="after")
    def _check_input_layer(self) -> "Preset":
        if self.support.bandwidth != self.encoder.input_bandwidth:
            raise ValueError("support.bandwidth must equal the encoder's input bandwidth")
        if self.support.shells != self.encoder.input_shells:
            raise ValueError("support.shells must equal encoder.input_shells")
        return self


def list_presets() -> List[str]:
    return sorted(path.stem for path in PRESET_ROOT.glob("*.toml"))


def load_preset(name: str) -> Preset:
    path = PRESET_ROOT / f"{name}.toml"
    if not path.exists():
        raise UnknownPresetError(f"Unknown preset: {name} (available: {', '.join(list_presets())})")
    with path.open("rb") as fh:
        data = tomllib.load(fh)
    data.setdefault("name", name)
    return Preset.model_validate(data)

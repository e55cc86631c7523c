"""Configuration dataclasses and YAML/JSON round-tripping.

Every hyperparameter that the training loops, renderer or service consume
lives here so that a single structured file can drive a run. Defaults follow
the full-scale recipe (region 128, 28 depth steps, batch 8, lr 1e-4 / 2e-5,
anneal 0.9 -> 0.06 over 200k steps); `toy_*` helpers shrink everything to
desk scale.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import yaml

from .errors import ConfigurationError


@dataclass
class FieldConfig:
    """Shape of the FiLM-conditioned sinusoidal generator.

    `n_layers` counts FiLM layers in total: the last one conditions the color
    branch on the viewing direction, the preceding ones form the positional
    trunk. The style code therefore carries `n_layers` (freq, phase) pairs of
    width `hidden_width`.
    """

    n_layers: int = 5
    hidden_width: int = 64
    latent_dim: int = 64           # n_z; full scale uses 256
    mapping_layers: int = 3
    mapping_hidden: int = 64
    base_frequency: float = 30.0   # folded into first-layer weight init
    density_shift: float = -1.0    # softplus(raw + shift) keeps early density low
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_layers < 2:
            raise ConfigurationError(f"n_layers must be >= 2, got {self.n_layers}")
        if self.hidden_width < 8:
            raise ConfigurationError(f"hidden_width must be >= 8, got {self.hidden_width}")

    @property
    def style_size(self) -> int:
        """Flattened style-code length: one (freq, phase) pair per layer."""
        return 2 * self.n_layers * self.hidden_width


@dataclass
class EncoderConfig:
    """Patch-attention encoder that maps mask channels to latent offsets."""

    resolution: int = 224
    in_channels: int = 21          # n_labels + contour + distance field
    patch_size: int = 16
    embed_width: int = 128
    n_blocks: int = 4
    n_heads: int = 4
    output_size: int = 2 * 5 * 64  # must equal decoder FieldConfig.style_size
    zero_init_head: bool = True    # start exactly at the average codes
    seed: int = 0

    def __post_init__(self) -> None:
        if self.resolution % self.patch_size != 0:
            raise ConfigurationError(
                f"resolution {self.resolution} not divisible by patch size {self.patch_size}"
            )
        if self.embed_width % self.n_heads != 0:
            raise ConfigurationError(
                f"embed_width {self.embed_width} not divisible by n_heads {self.n_heads}"
            )


@dataclass
class RenderOptions:
    """Knobs for a single render call."""

    n_coarse: int = 28             # per-ray depth steps during training
    n_fine: int = 44               # extra importance samples when hierarchical
    hierarchical: bool = False
    deterministic: bool = True     # bin midpoints instead of stratified jitter
    near: float = 0.8
    far: float = 1.2
    seed: int = 0
    chunk_rays: int = 16384
    keep_transmittance: bool = False


@dataclass
class PosePriorConfig:
    """Gaussian pose prior: yaw/pitch in radians, roll fixed."""

    yaw_mean: float = 1.5707963267948966   # pi/2 is frontal
    yaw_std: float = 0.3
    pitch_mean: float = 1.5707963267948966
    pitch_std: float = 0.1
    roll: float = 0.0
    fov_deg: float = 18.0
    distance: float = 1.0


@dataclass
class SceneSamplerConfig:
    """Ranges for the procedural blob-face scenes (all in scene units)."""

    head_radius_xy: tuple[float, float] = (0.10, 0.14)
    head_radius_z: tuple[float, float] = (0.08, 0.12)
    head_jitter: float = 0.015
    eye_radius: tuple[float, float] = (0.018, 0.030)
    mouth_radius: tuple[float, float] = (0.025, 0.045)
    falloff_width: float = 0.01
    sigma_max: float = 120.0
    n_labels: int = 4              # background, head, eye, mouth


@dataclass
class DatasetConfig:
    """What `dataset build` writes to disk."""

    n_train: int = 512
    n_test: int = 64
    image_size: int = 64
    n_depth: int = 48
    seed: int = 0
    scene: SceneSamplerConfig = dc_field(default_factory=SceneSamplerConfig)
    pose: PosePriorConfig = dc_field(default_factory=PosePriorConfig)


@dataclass
class AnnealScheduleConfig:
    """Region-scale annealing: lower bound decays geometrically to `end`."""

    start: float = 0.9
    end: float = 0.06
    upper: float = 1.0
    total_steps: int = 200_000

    def __post_init__(self) -> None:
        if not (0.0 < self.end <= self.start <= self.upper <= 1.0):
            raise ConfigurationError(
                f"need 0 < end <= start <= upper <= 1, got "
                f"end={self.end} start={self.start} upper={self.upper}"
            )


@dataclass
class LossWeights:
    """Eq-style weighted combination of the loss stack."""

    rec: float = 1.0
    lpips: float = 0.8
    reg: float = 0.005
    gan: float = 0.08
    r1: float = 10.0

    def __post_init__(self) -> None:
        for name in ("rec", "lpips", "reg", "gan", "r1"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"loss weight {name} must be >= 0")


@dataclass
class DiscriminatorConfig:
    input_size: int = 128
    in_channels: int = 3
    base_channels: int = 32
    n_layers: int = 3
    seed: int = 0


@dataclass
class PerceptualConfig:
    """Fixed random conv stack standing in for a pretrained LPIPS network."""

    in_channels: int = 3
    base_channels: int = 16
    n_layers: int = 3
    layer_ids: tuple[int, ...] = (0, 1, 2)
    seed: int = 7


@dataclass
class DecoderTrainConfig:
    mode: str = "adversarial"      # adversarial | overfit | latent_table
    steps: int = 5000
    batch_size: int = 8
    rays_per_scene: int = 256      # subsampled rays per scene in recon modes
    lr_generator: float = 2e-5
    lr_discriminator: float = 2e-5
    n_depth: int = 28
    region_size: int = 128
    image_size: int = 128
    overfit_scene_seed: int = 0
    overfit_views: int = 8
    freeze_generator: bool = False  # discriminator-only smoke runs
    log_every: int = 50
    seed: int = 0
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    discriminator: DiscriminatorConfig = dc_field(default_factory=DiscriminatorConfig)
    pose: PosePriorConfig = dc_field(default_factory=PosePriorConfig)
    anneal: AnnealScheduleConfig = dc_field(default_factory=AnnealScheduleConfig)


@dataclass
class EncoderTrainConfig:
    steps: int = 200_000
    batch_size: int = 8
    lr_encoder: float = 1e-4
    lr_discriminator: float = 2e-5
    n_depth: int = 28
    region_size: int = 128
    avg_samples: int = 10_000
    log_every: int = 50
    seed: int = 0
    weights: LossWeights = dc_field(default_factory=LossWeights)
    anneal: AnnealScheduleConfig = dc_field(default_factory=AnnealScheduleConfig)
    encoder: EncoderConfig = dc_field(default_factory=EncoderConfig)
    discriminator: DiscriminatorConfig = dc_field(default_factory=DiscriminatorConfig)
    perceptual: PerceptualConfig = dc_field(default_factory=PerceptualConfig)
    pose: PosePriorConfig = dc_field(default_factory=PosePriorConfig)


@dataclass
class ServiceConfig:
    checkpoint_dir: str = ""       # defaults to $MASKFIELD_CHECKPOINT_DIR
    max_resolution: int = 512
    handle_ttl_seconds: float = 600.0
    max_concurrent_renders: int = 2
    default_steps: int = 28
    default_fine_steps: int = 44


# ---------------------------------------------------------------------------
# (de)serialization


def _from_dict(cls, data):
    if not dataclasses.is_dataclass(cls):
        return data
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in fields:
            raise ConfigurationError(f"unknown config key {key!r} for {cls.__name__}")
        ftype = fields[key].type
        target = _DATACLASS_FIELDS.get((cls.__name__, key))
        if target is not None and isinstance(value, dict):
            kwargs[key] = _from_dict(target, value)
        elif isinstance(value, list) and isinstance(fields[key].default, tuple):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
        del ftype
    return cls(**kwargs)


# nested dataclass fields resolved by (owner, field name); keeps _from_dict
# free of typing introspection
_DATACLASS_FIELDS = {
    ("DatasetConfig", "scene"): SceneSamplerConfig,
    ("DatasetConfig", "pose"): PosePriorConfig,
    ("DecoderTrainConfig", "field"): FieldConfig,
    ("DecoderTrainConfig", "discriminator"): DiscriminatorConfig,
    ("DecoderTrainConfig", "pose"): PosePriorConfig,
    ("DecoderTrainConfig", "anneal"): AnnealScheduleConfig,
    ("EncoderTrainConfig", "weights"): LossWeights,
    ("EncoderTrainConfig", "anneal"): AnnealScheduleConfig,
    ("EncoderTrainConfig", "encoder"): EncoderConfig,
    ("EncoderTrainConfig", "discriminator"): DiscriminatorConfig,
    ("EncoderTrainConfig", "perceptual"): PerceptualConfig,
    ("EncoderTrainConfig", "pose"): PosePriorConfig,
}


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(cls, data: dict):
    return _from_dict(cls, data)


def load_config(cls, path: str | Path):
    """Read a YAML (or JSON) config file into the given dataclass."""
    path = Path(path)
    text = path.read_text()
    data = yaml.safe_load(text) if path.suffix in (".yml", ".yaml") else json.loads(text)
    if not isinstance(data, dict):
        raise ConfigurationError(f"config file {path} does not hold a mapping")
    return _from_dict(cls, data)


def save_config(cfg, path: str | Path) -> None:
    path = Path(path)
    data = config_to_dict(cfg)
    if path.suffix in (".yml", ".yaml"):
        path.write_text(yaml.safe_dump(data, sort_keys=False))
    else:
        path.write_text(json.dumps(data, indent=2))


# ---------------------------------------------------------------------------
# desk-scale presets


def toy_field_config(seed: int = 0) -> FieldConfig:
    return FieldConfig(n_layers=5, hidden_width=64, latent_dim=64,
                       mapping_hidden=64, seed=seed)


def toy_encoder_config(n_labels: int = 4, field_cfg: FieldConfig | None = None,
                       seed: int = 0) -> EncoderConfig:
    fc = field_cfg or toy_field_config()
    return EncoderConfig(resolution=64, in_channels=n_labels + 2, patch_size=8,
                         embed_width=64, n_blocks=2, n_heads=4,
                         output_size=fc.style_size, seed=seed)


def toy_dataset_config(n_train: int = 512, n_test: int = 64, seed: int = 0) -> DatasetConfig:
    return DatasetConfig(n_train=n_train, n_test=n_test, image_size=64,
                         n_depth=32, seed=seed)

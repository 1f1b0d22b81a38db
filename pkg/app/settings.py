"""
Structured configuration for every component.

Each dataclass validates its own invariants in ``__post_init__``; ``Settings``
ties them together around one image resolution and loads YAML or JSON files.
"""

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import yaml

from app.errors import ConfigurationError

FORGERY_KINDS = ('splice', 'copy_move', 'noise_fill', 'none')
TEXTURES = ('gaussian_field', 'gradient', 'checker', 'blob')
PERTURB_KINDS = ('jpeg', 'gaussian_blur', 'none')


def _as_tuple(value):
    return tuple(value) if isinstance(value, (list, tuple)) else value


@dataclass
class DataConfig:
    """Synthetic dataset generation parameters."""

    resolution: int = 64
    n_train: int = 200
    n_val: int = 50
    n_test: int = 50
    seed: int = 0
    authentic_fraction: float = 0.1
    area_range: Tuple[float, float] = (0.02, 0.5)
    texture_mix: Dict[str, float] = field(default_factory=lambda: {
        'gaussian_field': 0.4, 'gradient': 0.2, 'checker': 0.15, 'blob': 0.25,
    })

    def __post_init__(self):
        self.area_range = _as_tuple(self.area_range)
        if self.resolution < 32:
            raise ConfigurationError(f"resolution must be >= 32, got {self.resolution}")
        lo, hi = self.area_range
        if not 0.0 < lo <= hi < 1.0:
            raise ConfigurationError(f"area_range must satisfy 0 < lo <= hi < 1, got {self.area_range}")
        if not 0.0 <= self.authentic_fraction <= 1.0:
            raise ConfigurationError("authentic_fraction must be in [0, 1]")
        check_texture_mix(self.texture_mix)


def check_texture_mix(mix: Dict[str, float]) -> None:
    unknown = set(mix) - set(TEXTURES)
    if unknown:
        raise ConfigurationError(f"unknown texture(s) in texture_mix: {sorted(unknown)}")
    if any(w < 0 for w in mix.values()) or abs(sum(mix.values()) - 1.0) > 1e-6:
        raise ConfigurationError(f"texture_mix weights must be non-negative and sum to 1, got {mix}")


@dataclass
class MAEConfig:
    """Realness prior: a small masked autoencoder."""

    patch_size: int = 8
    in_chans: int = 3
    embed_dim: int = 128
    encoder_depth: int = 4
    decoder_embed_dim: int = 64
    decoder_depth: int = 2
    num_heads: int = 4
    mlp_ratio: float = 4.0
    mask_ratio: float = 0.75
    visible_loss_weight: float = 0.1
    lr: float = 2e-4
    weight_decay: float = 1e-5
    epochs: int = 60
    batch_size: int = 32
    n_images: int = 512

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")
        if self.decoder_embed_dim % self.num_heads:
            raise ConfigurationError(
                f"decoder_embed_dim {self.decoder_embed_dim} is not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigurationError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")

    def check_resolution(self, resolution: int) -> None:
        if resolution % self.patch_size:
            raise ConfigurationError(
                f"resolution {resolution} is not divisible by patch_size {self.patch_size}")


@dataclass
class DSSNConfig:
    """Dual-stream segmentation network."""

    stage_dims: Tuple[int, ...] = (32, 64, 128, 192)
    stage_downsample: Tuple[int, ...] = (4, 2, 2, 2)
    num_heads: Tuple[int, ...] = (1, 2, 4, 4)
    depths: Tuple[int, ...] = (2, 2, 2, 2)
    sr_ratios: Tuple[int, ...] = (8, 4, 2, 1)
    mlp_ratio: float = 4.0
    decoder_dim: int = 128
    fusion_feedforward: bool = True

    def __post_init__(self):
        for name in ('stage_dims', 'stage_downsample', 'num_heads', 'depths', 'sr_ratios'):
            setattr(self, name, _as_tuple(getattr(self, name)))
        n = self.num_stages
        for name in ('stage_downsample', 'num_heads', 'depths', 'sr_ratios'):
            if len(getattr(self, name)) != n:
                raise ConfigurationError(f"{name} must have {n} entries (one per stage)")
        for dim, heads in zip(self.stage_dims, self.num_heads):
            if dim % heads:
                raise ConfigurationError(f"stage dim {dim} is not divisible by {heads} heads")

    @property
    def num_stages(self) -> int:
        return len(self.stage_dims)

    def grid_sizes(self, resolution: int) -> List[int]:
        sizes, size = [], resolution
        for factor in self.stage_downsample:
            size //= factor
            sizes.append(size)
        return sizes

    def check_resolution(self, resolution: int) -> None:
        total = 1
        for factor in self.stage_downsample:
            total *= factor
        if resolution % total:
            raise ConfigurationError(
                f"resolution {resolution} is not divisible by cumulative downsample {total}")
        for grid, sr in zip(self.grid_sizes(resolution), self.sr_ratios):
            if grid % sr:
                raise ConfigurationError(f"token grid {grid} is not divisible by sr_ratio {sr}")


@dataclass
class PromptEncoderConfig:
    """Coarse-mask prompt encoder; one stride-2 conv per channel entry."""

    channels: Tuple[int, ...] = (8, 16, 32, 32)
    downsample: int = 16
    prompt_dim: int = 64

    def __post_init__(self):
        self.channels = _as_tuple(self.channels)
        if self.downsample != 2 ** len(self.channels):
            raise ConfigurationError(
                f"downsample {self.downsample} must equal 2**len(channels) = {2 ** len(self.channels)}")

    def check_resolution(self, resolution: int) -> None:
        if resolution % self.downsample:
            raise ConfigurationError(
                f"resolution {resolution} is not divisible by prompt downsample {self.downsample}")


@dataclass
class TrainConfig:
    """Joint two-stage training and the ablation flags."""

    lr: float = 2e-5
    weight_decay: float = 1e-5
    batch_size: int = 8
    max_epochs: int = 100
    patience: int = 10
    alpha: float = 0.5
    seed: int = 0
    use_dssn_dual: bool = True
    use_tapi: bool = True
    use_adaptive_decoder: bool = True
    detach_prompt: bool = False
    stage2_start_epoch: int = 0
    grad_clip: float = 1.0
    threshold: float = 0.5
    deterministic_order: bool = True

    def __post_init__(self):
        if self.patience >= self.max_epochs:
            raise ConfigurationError(
                f"patience ({self.patience}) must be smaller than max_epochs ({self.max_epochs})")
        if self.use_adaptive_decoder and not self.use_tapi:
            raise ConfigurationError("use_adaptive_decoder requires use_tapi")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigurationError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.alpha < 0:
            raise ConfigurationError("alpha must be non-negative")


@dataclass
class PerturbSpec:
    """One robustness perturbation family and the levels to sweep."""

    kind: str = 'none'
    levels: Tuple[float, ...] = (0,)
    sigma_per_level: float = 0.25

    def __post_init__(self):
        self.levels = _as_tuple(self.levels)
        if self.kind not in PERTURB_KINDS:
            raise ConfigurationError(f"unknown perturbation kind '{self.kind}'")
        for level in self.levels:
            check_level(self.kind, level)

    def sigma(self, level: float) -> float:
        return float(level) * self.sigma_per_level


def check_level(kind: str, level: float) -> None:
    if kind == 'jpeg' and not (1 <= level <= 100 and float(level).is_integer()):
        raise ConfigurationError(f"jpeg quality must be an integer in [1, 100], got {level}")
    if kind == 'gaussian_blur' and level < 0:
        raise ConfigurationError(f"blur level must be >= 0, got {level}")


def default_perturb_specs() -> List[PerturbSpec]:
    return [
        PerturbSpec(kind='jpeg', levels=(100, 90, 80, 70, 60, 50)),
        PerturbSpec(kind='gaussian_blur', levels=(0, 3, 7, 11, 15, 19)),
    ]


_SECTIONS = {
    'data': DataConfig,
    'mae': MAEConfig,
    'dssn': DSSNConfig,
    'prompt': PromptEncoderConfig,
    'train': TrainConfig,
}


@dataclass
class Settings:
    """All component configs, validated against one resolution."""

    data: DataConfig = field(default_factory=DataConfig)
    mae: MAEConfig = field(default_factory=MAEConfig)
    dssn: DSSNConfig = field(default_factory=DSSNConfig)
    prompt: PromptEncoderConfig = field(default_factory=PromptEncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    robustness: List[PerturbSpec] = field(default_factory=default_perturb_specs)

    def __post_init__(self):
        resolution = self.data.resolution
        self.mae.check_resolution(resolution)
        self.dssn.check_resolution(resolution)
        self.prompt.check_resolution(resolution)

    @property
    def resolution(self) -> int:
        return self.data.resolution

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def with_overrides(self, section: str, **values) -> 'Settings':
        """Return a copy with some fields of one section replaced."""
        if section not in _SECTIONS:
            raise ConfigurationError(f"unknown config section '{section}'")
        updated = replace(getattr(self, section), **values)
        return replace(self, **{section: updated})

    @classmethod
    def from_dict(cls, raw: Optional[Dict[str, Any]]) -> 'Settings':
        raw = dict(raw or {})
        kwargs = {}
        for key, value in raw.items():
            if key == 'robustness':
                kwargs[key] = [_build(PerturbSpec, spec, 'robustness') for spec in value]
            elif key in _SECTIONS:
                kwargs[key] = _build(_SECTIONS[key], value or {}, key)
            else:
                raise ConfigurationError(f"unknown config section '{key}'")
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> 'Settings':
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        text = path.read_text(encoding='utf-8')
        if path.suffix.lower() == '.json':
            raw = json.loads(text)
        elif path.suffix.lower() in ('.yaml', '.yml'):
            raw = yaml.safe_load(text)
        else:
            raise ConfigurationError(f"unsupported config format '{path.suffix}' (use .yaml or .json)")
        if raw is not None and not isinstance(raw, dict):
            raise ConfigurationError(f"config file must contain a mapping: {path}")
        return cls.from_dict(raw)


def _build(klass, values: Dict[str, Any], section: str):
    known = {f.name for f in fields(klass)}
    unknown = set(values) - known
    if unknown:
        raise ConfigurationError(f"unknown key(s) in section '{section}': {sorted(unknown)}")
    return klass(**values)

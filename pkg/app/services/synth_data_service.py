"""
Synthetic scene and forgery generation.

Authentic images are procedural mixtures of four stationary textures, each
drawn from its own child stream of ``SeedSequence(seed)`` so that changing the
mix weights never changes what a texture looks like:

- ``gaussian_field``: 1/f^2 power-spectrum random field (channels share 70% of
  a common field), min-max normalized per channel.
- ``gradient``: per-channel affine ramp a*y + b*x rescaled to a random range.
- ``checker``: axis-aligned checkerboard, period 4-16 px, two random colours.
- ``blob``: 3-6 isotropic Gaussian blobs of random colour on a flat background.

Images are quantized to 8 bits at generation time so they survive PNG storage
bit-exactly.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from app.errors import ConfigurationError
from app.settings import FORGERY_KINDS, TEXTURES, DataConfig, check_texture_mix

logger = logging.getLogger(__name__)

GENERATOR_VERSION = 'synth-2'
FEATHER_PX = 2.0
MAX_FORGE_ATTEMPTS = 32
SPLITS = ('train', 'val', 'test')


def default_texture_mix() -> Dict[str, float]:
    return dict(DataConfig().texture_mix)


@dataclass(frozen=True)
class SceneSpec:
    """Recipe for one authentic scene."""

    seed: int
    resolution: int = 64
    texture_mix: Dict[str, float] = field(default_factory=default_texture_mix)
    patch_size: int = 8

    def validate(self):
        if self.resolution < 32:
            raise ConfigurationError(f"resolution must be >= 32, got {self.resolution}")
        if self.resolution % self.patch_size:
            raise ConfigurationError(
                f"resolution {self.resolution} is not divisible by patch size {self.patch_size}")
        check_texture_mix(self.texture_mix)


@dataclass
class ForgeryRecord:
    """An image, its binary ground-truth mask and how it was made.

    ``image`` is float32 3xHxW in [0, 1]; ``mask`` is float32 1xHxW in {0, 1}.
    """

    image: np.ndarray
    mask: np.ndarray
    forgery_kind: str
    source_seed: int
    record_id: str = ''

    @property
    def area_fraction(self) -> float:
        return float(self.mask.mean())

    @property
    def is_forged(self) -> bool:
        return self.forgery_kind != 'none'


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Map a [0, 1] float image to uint8 with round-half-even."""
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


def to_unit(image_u8: np.ndarray) -> np.ndarray:
    """Inverse of ``to_uint8`` on its range; the only uint8 -> float path in the repo."""
    return image_u8.astype(np.float32) / np.float32(255.0)


def quantize(image: np.ndarray) -> np.ndarray:
    return to_unit(to_uint8(image))


# ---------------------------------------------------------------------------
# Textures

def _normalize(channel: np.ndarray) -> np.ndarray:
    lo, hi = channel.min(), channel.max()
    if hi - lo < 1e-12:
        return np.zeros_like(channel)
    return (channel - lo) / (hi - lo)


def _gaussian_field(rng: np.random.Generator, n: int, beta: float = 2.0) -> np.ndarray:
    fy = np.fft.fftfreq(n)[:, None]
    fx = np.fft.rfftfreq(n)[None, :]
    freq = np.sqrt(fy ** 2 + fx ** 2)
    freq[0, 0] = 1.0
    amplitude = freq ** (-beta / 2.0)
    amplitude[0, 0] = 0.0

    def field_2d():
        noise = rng.standard_normal((n, n))
        return np.fft.irfft2(np.fft.rfft2(noise) * amplitude, s=(n, n))

    shared = field_2d()
    out = np.stack([0.7 * shared + 0.3 * field_2d() for _ in range(3)])
    return np.stack([_normalize(c) for c in out])


def _gradient(rng: np.random.Generator, n: int) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n] / (n - 1)
    channels = []
    for _ in range(3):
        gy, gx = rng.uniform(-1.0, 1.0, size=2)
        if abs(gy) + abs(gx) < 0.2:
            gx = 0.2 if gx >= 0 else -0.2
        lo = rng.uniform(0.0, 0.4)
        hi = rng.uniform(0.6, 1.0)
        channels.append(lo + (hi - lo) * _normalize(gy * yy + gx * xx))
    return np.stack(channels)


def _checker(rng: np.random.Generator, n: int) -> np.ndarray:
    period = int(rng.integers(4, 17))
    phase_y, phase_x = rng.integers(0, period, size=2)
    yy, xx = np.mgrid[0:n, 0:n]
    cells = (((yy + phase_y) // period) + ((xx + phase_x) // period)) % 2
    color_a, color_b = rng.uniform(0.0, 1.0, size=(2, 3))
    return np.where(cells[None] == 0, color_a[:, None, None], color_b[:, None, None])


def _blob(rng: np.random.Generator, n: int) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n]
    image = np.broadcast_to(rng.uniform(0.2, 0.8, size=(3, 1, 1)), (3, n, n)).copy()
    for _ in range(int(rng.integers(3, 7))):
        cy, cx = rng.uniform(0, n, size=2)
        sigma = rng.uniform(n / 12.0, n / 5.0)
        weight = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma ** 2))
        color = rng.uniform(-0.5, 0.5, size=(3, 1, 1))
        image += color * weight[None]
    return np.clip(image, 0.0, 1.0)


_TEXTURE_FNS = {
    'gaussian_field': _gaussian_field,
    'gradient': _gradient,
    'checker': _checker,
    'blob': _blob,
}


def generate_real(spec: SceneSpec) -> np.ndarray:
    """
    Generate an authentic scene.

    Args:
        spec: Scene recipe; identical specs give bit-identical images

    Returns:
        float32 array of shape 3xRxR with values in [0, 1]
    """
    spec.validate()
    n = spec.resolution
    streams = np.random.SeedSequence(spec.seed).spawn(len(TEXTURES))
    image = np.zeros((3, n, n), dtype=np.float64)
    for name, stream in zip(TEXTURES, streams):
        weight = spec.texture_mix.get(name, 0.0)
        if weight > 0:
            image += weight * _TEXTURE_FNS[name](np.random.default_rng(stream), n)
    return quantize(np.clip(image, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Forgeries

def _ellipse_alpha(rng: np.random.Generator, n: int, area_px: float) -> np.ndarray:
    """Feathered elliptical alpha whose support covers roughly ``area_px`` pixels."""
    aspect = rng.uniform(0.6, 1.6)
    outer_a = np.sqrt(area_px * aspect / np.pi)
    outer_b = np.sqrt(area_px / (aspect * np.pi))
    a = max(outer_a - FEATHER_PX / 2.0, 2.0)
    b = max(outer_b - FEATHER_PX / 2.0, 2.0)
    reach = max(a, b) + FEATHER_PX
    lo, hi = min(reach, n / 2.0), max(n - reach, n / 2.0)
    cy, cx = rng.uniform(lo, hi, size=2)
    theta = rng.uniform(0.0, np.pi)

    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    dy, dx = yy - cy, xx - cx
    u = (dx * np.cos(theta) + dy * np.sin(theta)) / a
    v = (-dx * np.sin(theta) + dy * np.cos(theta)) / b
    outside = (np.sqrt(u ** 2 + v ** 2) - 1.0) * min(a, b)
    return np.clip(1.0 - outside / FEATHER_PX, 0.0, 1.0)


def _lowpass_noise(rng: np.random.Generator, n: int, sigma_px: float = 2.0) -> np.ndarray:
    fy = np.fft.fftfreq(n)[:, None]
    fx = np.fft.rfftfreq(n)[None, :]
    kernel = np.exp(-2.0 * (np.pi * sigma_px) ** 2 * (fy ** 2 + fx ** 2))
    noise = rng.standard_normal((3, n, n))
    smooth = np.fft.irfft2(np.fft.rfft2(noise) * kernel, s=(n, n))
    return smooth / (smooth.std(axis=(1, 2), keepdims=True) + 1e-12)


def region_bounds(alpha: np.ndarray) -> Tuple[int, int, int, int]:
    """Inclusive (y0, y1, x0, x1) bounding box of the alpha support."""
    ys, xs = np.nonzero(alpha > 0)
    return int(ys.min()), int(ys.max()), int(xs.min()), int(xs.max())


def copy_move_shift(rng: np.random.Generator, alpha: np.ndarray) -> Optional[Tuple[int, int]]:
    """
    Draw a source offset whose shifted region lies fully inside the image.

    Returns:
        (dy, dx) with max(|dy|, |dx|) >= max(4, n // 8), or None when the region
        leaves no room for such a shift
    """
    n = alpha.shape[-1]
    min_shift = max(4, n // 8)
    y0, y1, x0, x1 = region_bounds(alpha)
    candidates = [(dy, dx)
                  for dy in range(-y0, n - y1)
                  for dx in range(-x0, n - x1)
                  if max(abs(dy), abs(dx)) >= min_shift]
    if not candidates:
        return None
    return candidates[int(rng.integers(len(candidates)))]


def copy_move_content(real: np.ndarray, alpha: np.ndarray, rng: np.random.Generator) -> Optional[np.ndarray]:
    """Copy of ``real`` whose alpha bounding box holds a translated patch of the same image."""
    shift = copy_move_shift(rng, alpha)
    if shift is None:
        return None
    dy, dx = shift
    y0, y1, x0, x1 = region_bounds(alpha)
    content = real.copy()
    content[:, y0:y1 + 1, x0:x1 + 1] = real[:, y0 + dy:y1 + 1 + dy, x0 + dx:x1 + 1 + dx]
    return content


def _fill_content(kind: str, real: np.ndarray, alpha: np.ndarray,
                  rng: np.random.Generator, texture_mix: Dict[str, float]) -> Optional[np.ndarray]:
    n = real.shape[-1]
    if kind == 'splice':
        donor_seed = int(rng.integers(0, 2 ** 31 - 1))
        return generate_real(SceneSpec(seed=donor_seed, resolution=n, texture_mix=texture_mix,
                                       patch_size=1))
    if kind == 'copy_move':
        return copy_move_content(real, alpha, rng)
    # noise_fill
    region = alpha > 0.5
    local_mean = real[:, region].mean(axis=1)[:, None, None]
    local_std = max(float(real[:, region].std()), 0.03)
    return np.clip(local_mean + local_std * _lowpass_noise(rng, n), 0.0, 1.0)


def forge(real: np.ndarray, kind: str, rng_seed: int, area: Optional[float] = None,
          source_seed: int = -1, area_range: Tuple[float, float] = (0.02, 0.5),
          texture_mix: Optional[Dict[str, float]] = None, record_id: str = '') -> ForgeryRecord:
    """
    Forge an authentic image.

    The pasted content is alpha-blended with a 2 px feathered boundary, the
    result is quantized, and the mask is taken from the quantized difference so
    that {forged != real} == {mask == 1} holds exactly.

    Args:
        real: Authentic 3xHxW image from ``generate_real``
        kind: One of splice, copy_move, noise_fill, none
        rng_seed: Seed for region geometry and fill content
        area: Target area fraction; drawn uniformly from ``area_range`` when None
        source_seed: Scene seed of ``real``, kept for provenance
        area_range: Accepted range for the final mask area fraction
        texture_mix: Texture weights for splice donors

    Returns:
        ForgeryRecord with the forged image and its mask
    """
    if kind not in FORGERY_KINDS:
        raise ConfigurationError(f"unknown forgery kind '{kind}'")
    if real.ndim != 3 or real.shape[0] != 3 or real.shape[1] != real.shape[2]:
        raise ConfigurationError(f"expected a square 3xHxW image, got shape {real.shape}")
    n = real.shape[-1]
    if kind == 'none':
        if area:
            raise ConfigurationError("forgery kind 'none' cannot take a forged region")
        return ForgeryRecord(image=real.copy(), mask=np.zeros((1, n, n), dtype=np.float32),
                             forgery_kind='none', source_seed=source_seed, record_id=record_id)

    rng = np.random.default_rng(rng_seed)
    texture_mix = texture_mix or default_texture_mix()
    real_u8 = to_uint8(real)
    lo, hi = area_range
    for attempt in range(MAX_FORGE_ATTEMPTS):
        target = area if area is not None else rng.uniform(lo, hi)
        alpha = _ellipse_alpha(rng, n, target * n * n)
        content = _fill_content(kind, real, alpha, rng, texture_mix)
        if content is None:
            logger.debug(f"forge attempt {attempt}: no in-bounds copy_move shift, retrying")
            continue
        forged_u8 = to_uint8(alpha[None] * content + (1.0 - alpha[None]) * real)
        mask = np.any(forged_u8 != real_u8, axis=0)
        fraction = float(mask.mean())
        if lo <= fraction <= hi:
            return ForgeryRecord(image=to_unit(forged_u8), mask=mask[None].astype(np.float32),
                                 forgery_kind=kind, source_seed=source_seed, record_id=record_id)
        logger.debug(f"forge attempt {attempt} for {kind} gave area {fraction:.3f}, retrying")
    raise ConfigurationError(
        f"could not forge a {kind} region with area in {area_range} after {MAX_FORGE_ATTEMPTS} attempts")


# ---------------------------------------------------------------------------
# Dataset-scale generation

class SynthDataService:
    """Generates train/val/test record lists as a pure function of the config."""

    forged_kinds = ('splice', 'copy_move', 'noise_fill')

    def __init__(self, config: DataConfig, patch_size: int = 8, num_workers: int = 0):
        """
        Initialize the generator.

        Args:
            config: Dataset sizes, seed, resolution and texture mix
            patch_size: MAE patch size the resolution must divide
            num_workers: Threads used to build records (order is always preserved)
        """
        self.config = config
        self.patch_size = patch_size
        self.num_workers = num_workers

    def split_seeds(self) -> Dict[str, List[int]]:
        """Draw pairwise-disjoint scene seeds for the three splits."""
        sizes = [self.config.n_train, self.config.n_val, self.config.n_test]
        rng = np.random.default_rng(self.config.seed)
        pool = rng.choice(2 ** 31 - 1, size=sum(sizes), replace=False)
        seeds, start = {}, 0
        for split, size in zip(SPLITS, sizes):
            seeds[split] = [int(s) for s in pool[start:start + size]]
            start += size
        return seeds

    def real_scene(self, seed: int) -> np.ndarray:
        return generate_real(SceneSpec(seed=seed, resolution=self.config.resolution,
                                       texture_mix=self.config.texture_mix,
                                       patch_size=self.patch_size))

    def make_record(self, split: str, index: int, seed: int) -> ForgeryRecord:
        """Build record ``index`` of a split; every 1/authentic_fraction-th record is authentic."""
        record_id = f"{split}_{index:05d}"
        real = self.real_scene(seed)
        if self._is_authentic(index):
            return forge(real, 'none', rng_seed=seed, source_seed=seed, record_id=record_id)
        kind = self.forged_kinds[index % len(self.forged_kinds)]
        return forge(real, kind, rng_seed=seed + 1, source_seed=seed,
                     area_range=self.config.area_range,
                     texture_mix=self.config.texture_mix, record_id=record_id)

    def _is_authentic(self, index: int) -> bool:
        fraction = self.config.authentic_fraction
        if fraction <= 0:
            return False
        return int((index + 1) * fraction) > int(index * fraction)

    def generate_split(self, split: str, seeds: List[int]) -> List[ForgeryRecord]:
        args = [(split, i, seed) for i, seed in enumerate(seeds)]
        if self.num_workers > 0:
            with ThreadPoolExecutor(max_workers=self.num_workers) as pool:
                return list(pool.map(lambda a: self.make_record(*a), args))
        return [self.make_record(*a) for a in args]

    def generate_splits(self) -> Dict[str, List[ForgeryRecord]]:
        """
        Generate every split.

        Returns:
            Mapping split name -> records, in generation order
        """
        splits = {}
        for split, seeds in self.split_seeds().items():
            splits[split] = self.generate_split(split, seeds)
            logger.info(f"Generated {len(splits[split])} {split} records")
        return splits

    def generate_real_images(self, count: int, seed: int) -> List[np.ndarray]:
        """Authentic scenes for pretraining the realness prior, from their own seed stream."""
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
        seeds = rng.choice(2 ** 31 - 1, size=count, replace=False)
        return [self.real_scene(int(s)) for s in seeds]

"""
Masked autoencoder used as the realness prior.

Encoder and decoder are separate submodules so that each can be frozen, checksummed
and (for the decoder) cloned independently. There is no class token; positional
embeddings are fixed 2-D sin-cos tables.
"""

import logging
from dataclasses import dataclass
from functools import partial
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
from timm.models.vision_transformer import Block

from app.errors import ConfigurationError, ShapeError
from app.settings import MAEConfig

logger = logging.getLogger(__name__)


def get_1d_sincos_pos_embed_from_grid(embed_dim: int, pos: np.ndarray) -> np.ndarray:
    omega = np.arange(embed_dim // 2, dtype=np.float64) / (embed_dim / 2.0)
    omega = 1.0 / 10000 ** omega
    out = np.einsum('m,d->md', pos.reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def get_2d_sincos_pos_embed(embed_dim: int, grid_size: int) -> np.ndarray:
    """(grid_size**2, embed_dim) table; half the channels encode rows, half columns."""
    grid_h = np.arange(grid_size, dtype=np.float32)
    grid_w = np.arange(grid_size, dtype=np.float32)
    grid = np.stack(np.meshgrid(grid_w, grid_h), axis=0)
    emb_h = get_1d_sincos_pos_embed_from_grid(embed_dim // 2, grid[0])
    emb_w = get_1d_sincos_pos_embed_from_grid(embed_dim // 2, grid[1])
    return np.concatenate([emb_h, emb_w], axis=1)


def patchify(x: torch.Tensor, patch_size: int) -> torch.Tensor:
    """
    (B, C, H, W) -> (B, N, p*p*C) with N = (H/p)*(W/p), patches in row-major order.
    """
    b, c, h, w = x.shape
    if h % patch_size or w % patch_size:
        raise ConfigurationError(f"image size {h}x{w} is not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = x.reshape(b, c, gh, patch_size, gw, patch_size)
    x = torch.einsum('nchpwq->nhwpqc', x)
    return x.reshape(b, gh * gw, patch_size * patch_size * c)


def unpatchify(tokens: torch.Tensor, patch_size: int, height: int, width: int,
               channels: int = 3) -> torch.Tensor:
    """Inverse of ``patchify``."""
    b, n, d = tokens.shape
    gh, gw = height // patch_size, width // patch_size
    if n != gh * gw or d != patch_size * patch_size * channels:
        raise ShapeError(f"cannot unpatchify {tuple(tokens.shape)} into {channels}x{height}x{width}")
    x = tokens.reshape(b, gh, gw, patch_size, patch_size, channels)
    x = torch.einsum('nhwpqc->nchpwq', x)
    return x.reshape(b, channels, height, width)


@dataclass
class ReconResult:
    """Reconstruction, its absolute residual and the encoder tokens Z."""

    x_rec: torch.Tensor
    residual: torch.Tensor
    tokens: torch.Tensor


def residual_map(x: torch.Tensor, x_rec: torch.Tensor) -> torch.Tensor:
    return (x - x_rec).abs()


def random_masking(batch: int, num_patches: int, mask_ratio: float, device=None,
                   generator: Optional[torch.Generator] = None) -> Tuple[torch.Tensor, ...]:
    """
    Per-sample random masking by argsort of uniform noise.

    Returns:
        (binary mask with 1 = removed, ids_restore, ids_keep)
    """
    len_keep = int(num_patches * (1 - mask_ratio))
    noise = torch.rand(batch, num_patches, device=device, generator=generator)
    ids_shuffle = torch.argsort(noise, dim=1)
    ids_restore = torch.argsort(ids_shuffle, dim=1)
    ids_keep = ids_shuffle[:, :len_keep]
    mask = torch.ones(batch, num_patches, device=device)
    mask[:, :len_keep] = 0
    mask = torch.gather(mask, 1, ids_restore)
    return mask, ids_restore, ids_keep


class MAEEncoder(nn.Module):
    """Linear patch embedding, fixed positions, ViT blocks."""

    def __init__(self, config: MAEConfig, img_size: int):
        super().__init__()
        config.check_resolution(img_size)
        self.patch_size = config.patch_size
        self.grid_size = img_size // config.patch_size
        self.num_patches = self.grid_size ** 2
        self.patch_embed = nn.Linear(config.patch_size ** 2 * config.in_chans, config.embed_dim)
        self.register_buffer('pos_embed', torch.zeros(1, self.num_patches, config.embed_dim))
        norm_layer = partial(nn.LayerNorm, eps=1e-6)
        self.blocks = nn.ModuleList([
            Block(config.embed_dim, config.num_heads, config.mlp_ratio, qkv_bias=True,
                  norm_layer=norm_layer)
            for _ in range(config.encoder_depth)
        ])
        self.norm = norm_layer(config.embed_dim)

    def forward(self, x: torch.Tensor, ids_keep: Optional[torch.Tensor] = None) -> torch.Tensor:
        tokens = self.patch_embed(patchify(x, self.patch_size)) + self.pos_embed
        if ids_keep is not None:
            d = tokens.shape[-1]
            tokens = torch.gather(tokens, 1, ids_keep.unsqueeze(-1).repeat(1, 1, d))
        for block in self.blocks:
            tokens = block(tokens)
        return self.norm(tokens)


class MAEDecoder(nn.Module):
    """Maps encoder tokens (plus mask tokens when masking) back to pixel patches."""

    def __init__(self, config: MAEConfig, img_size: int):
        super().__init__()
        self.num_patches = (img_size // config.patch_size) ** 2
        self.embed_dim = config.embed_dim
        self.decoder_embed = nn.Linear(config.embed_dim, config.decoder_embed_dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, config.decoder_embed_dim))
        self.register_buffer('pos_embed', torch.zeros(1, self.num_patches, config.decoder_embed_dim))
        norm_layer = partial(nn.LayerNorm, eps=1e-6)
        self.blocks = nn.ModuleList([
            Block(config.decoder_embed_dim, config.num_heads, config.mlp_ratio, qkv_bias=True,
                  norm_layer=norm_layer)
            for _ in range(config.decoder_depth)
        ])
        self.norm = norm_layer(config.decoder_embed_dim)
        self.pred = nn.Linear(config.decoder_embed_dim, config.patch_size ** 2 * config.in_chans)

    def forward(self, tokens: torch.Tensor, ids_restore: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = self.decoder_embed(tokens)
        if ids_restore is not None:
            b, n_vis, d = x.shape
            mask_tokens = self.mask_token.repeat(b, ids_restore.shape[1] - n_vis, 1)
            x = torch.cat([x, mask_tokens], dim=1)
            x = torch.gather(x, 1, ids_restore.unsqueeze(-1).repeat(1, 1, d))
        elif x.shape[1] != self.num_patches:
            raise ShapeError(f"decoder expects {self.num_patches} tokens, got {x.shape[1]}")
        x = x + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return self.pred(self.norm(x))


class MaskedAutoencoder(nn.Module):
    """Small MAE: masked pretraining, then full-visibility reconstruction."""

    def __init__(self, config: MAEConfig, img_size: int):
        super().__init__()
        self.config = config
        self.img_size = img_size
        self.encoder = MAEEncoder(config, img_size)
        self.decoder = MAEDecoder(config, img_size)
        self.frozen = {'encoder': False, 'decoder': False}
        self.initialize_weights()

    def initialize_weights(self):
        grid = self.encoder.grid_size
        self.encoder.pos_embed.copy_(torch.from_numpy(
            get_2d_sincos_pos_embed(self.config.embed_dim, grid)).float().unsqueeze(0))
        self.decoder.pos_embed.copy_(torch.from_numpy(
            get_2d_sincos_pos_embed(self.config.decoder_embed_dim, grid)).float().unsqueeze(0))
        torch.nn.init.normal_(self.decoder.mask_token, std=0.02)
        self.apply(self._init_weights)

    def _init_weights(self, m):
        if isinstance(m, nn.Linear):
            # xavier_uniform following official JAX ViT
            torch.nn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                nn.init.constant_(m.bias, 0)
        elif isinstance(m, nn.LayerNorm):
            nn.init.constant_(m.bias, 0)
            nn.init.constant_(m.weight, 1.0)

    def freeze(self, group: str):
        """Stop gradients into ``encoder`` or ``decoder`` and keep it in eval mode."""
        module = getattr(self, group)
        for param in module.parameters():
            param.requires_grad_(False)
        module.eval()
        self.frozen[group] = True

    def freeze_encoder(self):
        self.freeze('encoder')

    def train(self, mode: bool = True):
        super().train(mode)
        for group, is_frozen in self.frozen.items():
            if is_frozen:
                getattr(self, group).eval()
        return self

    def check_input(self, x: torch.Tensor):
        expected = (self.config.in_chans, self.img_size, self.img_size)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"expected input of shape Bx{expected[0]}x{expected[1]}x{expected[2]}, "
                             f"got {tuple(x.shape)}")

    def forward_masked(self, x: torch.Tensor, mask_ratio: float,
                       generator: Optional[torch.Generator] = None):
        """Masked pass used for pretraining: (predicted patches, mask, target patches)."""
        self.check_input(x)
        target = patchify(x, self.config.patch_size)
        b, n, _ = target.shape
        mask, ids_restore, ids_keep = random_masking(b, n, mask_ratio, x.device, generator)
        latent = self.encoder(x, ids_keep=ids_keep)
        pred = self.decoder(latent, ids_restore=ids_restore)
        return pred, mask, target

    def decode_image(self, tokens: torch.Tensor, decoder: Optional[nn.Module] = None) -> torch.Tensor:
        """Decode full-visibility tokens into an image clamped to [0, 1]."""
        decoder = decoder if decoder is not None else self.decoder
        patches = decoder(tokens)
        image = unpatchify(patches, self.config.patch_size, self.img_size, self.img_size,
                           self.config.in_chans)
        return image.clamp(0.0, 1.0)

    def reconstruct(self, x: torch.Tensor) -> ReconResult:
        """
        Deterministic full-visibility reconstruction (no masking at inference).

        Args:
            x: Bx3xHxW images in [0, 1]

        Returns:
            ReconResult with x_rec, |x - x_rec| and the encoder tokens Z
        """
        self.check_input(x)
        tokens = self.encoder(x)
        x_rec = self.decode_image(tokens)
        return ReconResult(x_rec=x_rec, residual=residual_map(x, x_rec), tokens=tokens)

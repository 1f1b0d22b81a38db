"""
Dual-stream segmentation network.

A content stream encodes the image, an artifact stream encodes the reconstruction
residual. After every stage the content tokens attend to the artifact tokens; the
fused tokens feed the next content stage (``fusion_feedforward``) and the decoder.
The same instance produces both the coarse and the refined mask.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from app.errors import ConfigurationError, ShapeError
from app.settings import DSSNConfig

logger = logging.getLogger(__name__)


@dataclass
class StageFeatures:
    """Token features of one stage, each B x N x D. ``f_art`` is None in single-stream mode."""

    f_con: torch.Tensor
    f_art: Optional[torch.Tensor]
    f_fused: torch.Tensor
    grid: Tuple[int, int]


def tokens_to_map(tokens: torch.Tensor, grid: Tuple[int, int]) -> torch.Tensor:
    b, n, d = tokens.shape
    return tokens.transpose(1, 2).reshape(b, d, grid[0], grid[1])


class OverlapPatchEmbed(nn.Module):
    """Strided conv with overlapping windows (kernel 2s - 1), then LayerNorm over channels."""

    def __init__(self, in_chans: int, dim: int, stride: int):
        super().__init__()
        kernel = 2 * stride - 1
        self.proj = nn.Conv2d(in_chans, dim, kernel_size=kernel, stride=stride, padding=kernel // 2)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor):
        x = self.proj(x)
        h, w = x.shape[-2:]
        return self.norm(x.flatten(2).transpose(1, 2)), (h, w)


class EfficientSelfAttention(nn.Module):
    """Multi-head self-attention with keys and values taken from a spatially reduced grid."""

    def __init__(self, dim: int, heads: int, sr_ratio: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, dim * 2)
        self.proj = nn.Linear(dim, dim)
        self.sr_ratio = sr_ratio
        if sr_ratio > 1:
            self.sr = nn.Conv2d(dim, dim, kernel_size=sr_ratio, stride=sr_ratio)
            self.norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor, grid: Tuple[int, int]) -> torch.Tensor:
        b, n, d = x.shape
        q = self.q(x).reshape(b, n, self.heads, d // self.heads).transpose(1, 2)
        if self.sr_ratio > 1:
            reduced = self.sr(tokens_to_map(x, grid)).flatten(2).transpose(1, 2)
            x = self.norm(reduced)
        k, v = self.kv(x).reshape(b, -1, 2, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class MixFFN(nn.Module):
    """Linear, 3x3 depth-wise conv, GELU, Linear."""

    def __init__(self, dim: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.dwconv = nn.Conv2d(hidden, hidden, kernel_size=3, padding=1, groups=hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor, grid: Tuple[int, int]) -> torch.Tensor:
        x = self.fc1(x)
        x = self.dwconv(tokens_to_map(x, grid)).flatten(2).transpose(1, 2)
        return self.fc2(self.act(x))


class SegBlock(nn.Module):
    def __init__(self, dim: int, heads: int, sr_ratio: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = EfficientSelfAttention(dim, heads, sr_ratio)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = MixFFN(dim, mlp_ratio)

    def forward(self, x: torch.Tensor, grid: Tuple[int, int]) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), grid)
        return x + self.ffn(self.norm2(x), grid)


class EncoderStage(nn.Module):
    def __init__(self, in_chans: int, dim: int, stride: int, heads: int, depth: int,
                 sr_ratio: int, mlp_ratio: float):
        super().__init__()
        self.patch_embed = OverlapPatchEmbed(in_chans, dim, stride)
        self.blocks = nn.ModuleList([SegBlock(dim, heads, sr_ratio, mlp_ratio) for _ in range(depth)])
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor):
        tokens, grid = self.patch_embed(x)
        for block in self.blocks:
            tokens = block(tokens, grid)
        return self.norm(tokens), grid


class CrossAttentionFusion(nn.Module):
    """
    Content tokens query artifact tokens: ``f_con + proj(MHA(q=f_con, k=f_art, v=f_art))``.

    ``proj`` starts at zero so the fused output equals the content features at init.
    Set ``keep_attention`` to retain the last attention weights in ``last_attention``.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ConfigurationError(f"fusion dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)
        self.keep_attention = False
        self.last_attention: Optional[torch.Tensor] = None
        self.reset_projection()

    def reset_projection(self):
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, f_con: torch.Tensor, f_art: torch.Tensor) -> torch.Tensor:
        if f_con.shape != f_art.shape:
            raise ShapeError(f"cannot fuse {tuple(f_con.shape)} with {tuple(f_art.shape)}")
        b, n, d = f_con.shape
        q = self.q_proj(f_con).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(f_art).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(f_art).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        if self.keep_attention:
            self.last_attention = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return f_con + self.proj(out)


class FusionDecoder(nn.Module):
    """All-MLP decoder: project every stage, upsample to the first grid, concat, fuse, predict."""

    def __init__(self, stage_dims: Tuple[int, ...], decoder_dim: int):
        super().__init__()
        self.project = nn.ModuleList([nn.Linear(dim, decoder_dim) for dim in stage_dims])
        self.fuse = nn.Sequential(
            nn.Conv2d(decoder_dim * len(stage_dims), decoder_dim, kernel_size=1),
            nn.ReLU(inplace=True),
        )
        self.classifier = nn.Conv2d(decoder_dim, 1, kernel_size=1)

    def forward(self, features: List[StageFeatures], target_hw: Tuple[int, int]) -> torch.Tensor:
        """Pre-sigmoid logits, B x 1 x H x W."""
        if not features:
            raise ShapeError("decoder received an empty feature list")
        if len(features) != len(self.project):
            raise ShapeError(f"decoder expects {len(self.project)} stages, got {len(features)}")
        base = features[0].grid
        maps = []
        for stage, project in zip(features, self.project):
            m = tokens_to_map(project(stage.f_fused), stage.grid)
            if stage.grid != base:
                m = F.interpolate(m, size=base, mode='bilinear', align_corners=False)
            maps.append(m)
        logits = self.classifier(self.fuse(torch.cat(maps, dim=1)))
        return F.interpolate(logits, size=target_hw, mode='bilinear', align_corners=False)


class DualStreamSegmenter(nn.Module):
    """
    Hierarchical two-stream encoder plus fusion decoder.

    Args:
        config: Stage layout
        img_size: Square input resolution
        dual: When False a single stream reads the 6-channel concat of image and residual
              and no fusion takes place
    """

    def __init__(self, config: DSSNConfig, img_size: int, dual: bool = True):
        super().__init__()
        config.check_resolution(img_size)
        self.config = config
        self.img_size = img_size
        self.dual = dual
        self.content = self._build_stream(6 if not dual else 3)
        if dual:
            self.artifact = self._build_stream(3)
            self.fusion = nn.ModuleList([
                CrossAttentionFusion(dim, heads)
                for dim, heads in zip(config.stage_dims, config.num_heads)
            ])
        self.decoder = FusionDecoder(config.stage_dims, config.decoder_dim)
        self.apply(self._init_weights)
        if dual:
            for fusion in self.fusion:
                fusion.reset_projection()

    def _build_stream(self, in_chans: int) -> nn.ModuleList:
        c = self.config
        stages, prev = [], in_chans
        for i in range(c.num_stages):
            stages.append(EncoderStage(prev, c.stage_dims[i], c.stage_downsample[i], c.num_heads[i],
                                       c.depths[i], c.sr_ratios[i], c.mlp_ratio))
            prev = c.stage_dims[i]
        return nn.ModuleList(stages)

    @staticmethod
    def _init_weights(m):
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Conv2d):
            fan_out = m.kernel_size[0] * m.kernel_size[1] * m.out_channels // m.groups
            nn.init.normal_(m.weight, 0.0, math.sqrt(2.0 / fan_out))
            if m.bias is not None:
                nn.init.zeros_(m.bias)

    def check_inputs(self, x: torch.Tensor, residual: torch.Tensor):
        if x.shape != residual.shape:
            raise ShapeError(f"image {tuple(x.shape)} and residual {tuple(residual.shape)} differ in shape")
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected 3-channel Bx3xHxW inputs, got {tuple(x.shape)}")

    def encode_streams(self, x: torch.Tensor, residual: torch.Tensor) -> List[StageFeatures]:
        """Run both streams stage by stage, fusing after every stage."""
        self.check_inputs(x, residual)
        if not self.dual:
            content_in = torch.cat([x, residual], dim=1)
            features = []
            for stage in self.content:
                f_con, grid = stage(content_in)
                features.append(StageFeatures(f_con=f_con, f_art=None, f_fused=f_con, grid=grid))
                content_in = tokens_to_map(f_con, grid)
            return features

        features = []
        content_in, artifact_in = x, residual
        for con_stage, art_stage, fusion in zip(self.content, self.artifact, self.fusion):
            f_con, grid = con_stage(content_in)
            f_art, _ = art_stage(artifact_in)
            f_fused = fusion(f_con, f_art)
            features.append(StageFeatures(f_con=f_con, f_art=f_art, f_fused=f_fused, grid=grid))
            content_in = tokens_to_map(f_fused if self.config.fusion_feedforward else f_con, grid)
            artifact_in = tokens_to_map(f_art, grid)
        return features

    def fuse_cross_attention(self, stage: int, f_con: torch.Tensor, f_art: torch.Tensor) -> torch.Tensor:
        if not self.dual:
            raise ConfigurationError("single-stream segmenter has no fusion layers")
        return self.fusion[stage](f_con, f_art)

    def decode_mask(self, features: List[StageFeatures], target_hw: Tuple[int, int]) -> torch.Tensor:
        return torch.sigmoid(self.decoder(features, target_hw))

    def forward_logits(self, x: torch.Tensor, residual: torch.Tensor) -> torch.Tensor:
        features = self.encode_streams(x, residual)
        return self.decoder(features, tuple(x.shape[-2:]))

    def forward(self, x: torch.Tensor, residual: torch.Tensor) -> torch.Tensor:
        """Probability mask B x 1 x H x W in (0, 1)."""
        return torch.sigmoid(self.forward_logits(x, residual))

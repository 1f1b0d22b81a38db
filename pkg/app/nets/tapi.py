"""
Task-adaptive prior injection.

The coarse mask is encoded into prompt tokens, mean-pooled, and mapped to a
per-channel scale and shift applied to the frozen encoder tokens. A trainable copy
of the pretrained decoder then reconstructs from the modulated tokens.
"""

import copy
import logging
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from app.errors import ShapeError
from app.nets.mae import MaskedAutoencoder, ReconResult, residual_map
from app.settings import PromptEncoderConfig

logger = logging.getLogger(__name__)

CLONE_MARK = 'initialized_from_pretrained'


@dataclass
class FiLMParams:
    gamma: torch.Tensor
    beta: torch.Tensor


class PromptEncoder(nn.Module):
    """Stride-2 conv stack over the mask, then a per-token linear map to ``prompt_dim``."""

    def __init__(self, config: PromptEncoderConfig, img_size: int):
        super().__init__()
        config.check_resolution(img_size)
        self.config = config
        self.img_size = img_size
        layers, prev = [], 1
        for channels in config.channels:
            layers += [nn.Conv2d(prev, channels, kernel_size=3, stride=2, padding=1), nn.GELU()]
            prev = channels
        self.convs = nn.Sequential(*layers)
        self.to_tokens = nn.Linear(prev, config.prompt_dim)

    @property
    def num_tokens(self) -> int:
        return (self.img_size // self.config.downsample) ** 2

    def forward(self, mask: torch.Tensor) -> torch.Tensor:
        if mask.dim() != 4 or mask.shape[1] != 1 or tuple(mask.shape[-2:]) != (self.img_size, self.img_size):
            raise ShapeError(f"expected a Bx1x{self.img_size}x{self.img_size} mask, got {tuple(mask.shape)}")
        features = self.convs(mask)
        return self.to_tokens(features.flatten(2).transpose(1, 2))


class FiLMGenerator(nn.Module):
    """gamma = 1 + g(mean(T)), beta = b(mean(T)) with g and b zero-initialized."""

    def __init__(self, prompt_dim: int, embed_dim: int):
        super().__init__()
        self.embed_dim = embed_dim
        self.to_mul = nn.Linear(prompt_dim, embed_dim)
        self.to_add = nn.Linear(prompt_dim, embed_dim)
        for layer in (self.to_mul, self.to_add):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    def forward(self, prompts: torch.Tensor) -> FiLMParams:
        pooled = prompts.mean(dim=1)
        return FiLMParams(gamma=1 + self.to_mul(pooled), beta=self.to_add(pooled))


def modulate(z: torch.Tensor, film: FiLMParams) -> torch.Tensor:
    """z[b, n, d] * gamma[b, d] + beta[b, d], broadcast over tokens."""
    if z.dim() != 3:
        raise ShapeError(f"expected B x N x D tokens, got {tuple(z.shape)}")
    b, _, d = z.shape
    for name, value in (('gamma', film.gamma), ('beta', film.beta)):
        if tuple(value.shape) != (b, d):
            raise ShapeError(f"{name} of shape {tuple(value.shape)} does not match tokens {tuple(z.shape)}")
    return z * film.gamma.unsqueeze(1) + film.beta.unsqueeze(1)


class TaskAdaptivePriorInjection(nn.Module):
    def __init__(self, config: PromptEncoderConfig, embed_dim: int, img_size: int):
        super().__init__()
        self.prompt = PromptEncoder(config, img_size)
        self.film = FiLMGenerator(config.prompt_dim, embed_dim)

    def encode_prompt(self, m_crs: torch.Tensor, detach: bool = False) -> torch.Tensor:
        return self.prompt(m_crs.detach() if detach else m_crs)

    def film_params(self, prompts: torch.Tensor) -> FiLMParams:
        return self.film(prompts)


def clone_decoder(mae: MaskedAutoencoder) -> nn.Module:
    """Trainable copy of the pretrained decoder, marked so guided reconstruction can check it."""
    decoder = copy.deepcopy(mae.decoder)
    for param in decoder.parameters():
        param.requires_grad_(True)
    decoder.train(mae.training)
    setattr(decoder, CLONE_MARK, True)
    return decoder


@dataclass
class GuidedReconstruction:
    recon: ReconResult
    prompts: torch.Tensor
    film: FiLMParams


def guided_reconstruct(x: torch.Tensor, m_crs: torch.Tensor, tokens: torch.Tensor,
                       mae: MaskedAutoencoder, tapi: TaskAdaptivePriorInjection,
                       decoder: Optional[nn.Module] = None,
                       detach_prompt: bool = False) -> GuidedReconstruction:
    """
    Stage-2 reconstruction from the Stage-1 encoder tokens.

    Args:
        x: Input images, used only for the residual
        m_crs: Coarse mask from Stage 1
        tokens: Encoder output Z from Stage 1 (not recomputed here)
        mae: Pretrained prior; its own decoder is used when ``decoder`` is None
        tapi: Prompt encoder and FiLM generator
        decoder: Trainable Stage-2 decoder
        detach_prompt: Stop gradients from the prompt path into Stage 1

    Returns:
        GuidedReconstruction with the amplified ReconResult, prompt tokens and FiLM params
    """
    if decoder is not None and decoder is not mae.decoder and not getattr(decoder, CLONE_MARK, False):
        logger.warning("Stage-2 decoder was not cloned from the pretrained decoder; "
                       "Stage-2 output will not match Stage 1 at initialization")
    prompts = tapi.encode_prompt(m_crs, detach=detach_prompt)
    film = tapi.film_params(prompts)
    z_mod = modulate(tokens, film)
    x_rec = mae.decode_image(z_mod, decoder)
    recon = ReconResult(x_rec=x_rec, residual=residual_map(x, x_rec), tokens=z_mod)
    return GuidedReconstruction(recon=recon, prompts=prompts, film=film)

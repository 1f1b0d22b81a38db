"""
Two-stage closed loop: detect with the prior's residual, guide the prior with the
coarse mask, amplify the residual and segment again with the same segmenter.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterator, Optional

import torch
import torch.nn as nn

from app.errors import ConfigurationError
from app.nets.dssn import DualStreamSegmenter
from app.nets.mae import MaskedAutoencoder
from app.nets.tapi import FiLMParams, TaskAdaptivePriorInjection, clone_decoder, guided_reconstruct
from app.settings import Settings

logger = logging.getLogger(__name__)


@dataclass
class ForwardTrace:
    """Every intermediate of one forward pass. Stage-2 fields stay None when Stage 2 is skipped."""

    x: torch.Tensor
    x_rec_s1: torch.Tensor
    residual_s1: torch.Tensor
    m_crs: torch.Tensor
    m_ref: torch.Tensor
    prompts: Optional[torch.Tensor] = None
    film: Optional[FiLMParams] = None
    x_rec_s2: Optional[torch.Tensor] = None
    residual_s2: Optional[torch.Tensor] = None

    @property
    def stage2_ran(self) -> bool:
        return self.residual_s2 is not None


class DetectGuideAmplifyNet(nn.Module):
    """
    Frozen prior plus the trainable segmenter, prompt path and Stage-2 decoder.

    The Stage-2 decoder lives at ``mae.decoder_stage2`` so checkpoint keys group it
    with the prior it was cloned from.
    """

    def __init__(self, mae: MaskedAutoencoder, settings: Settings, use_dssn_dual: bool = True,
                 use_tapi: bool = True, use_adaptive_decoder: bool = True, detach_prompt: bool = False):
        super().__init__()
        if use_adaptive_decoder and not use_tapi:
            raise ConfigurationError("use_adaptive_decoder requires use_tapi")
        if mae.img_size != settings.resolution:
            raise ConfigurationError(
                f"prior was built for {mae.img_size}px images, settings ask for {settings.resolution}px")
        self.use_dssn_dual = use_dssn_dual
        self.use_tapi = use_tapi
        self.use_adaptive_decoder = use_adaptive_decoder
        self.detach_prompt = detach_prompt

        self.mae = mae
        mae.freeze('encoder')
        mae.freeze('decoder')
        self.dssn = DualStreamSegmenter(settings.dssn, settings.resolution, dual=use_dssn_dual)
        self.tapi = (TaskAdaptivePriorInjection(settings.prompt, settings.mae.embed_dim, settings.resolution)
                     if use_tapi else None)
        if use_adaptive_decoder:
            mae.decoder_stage2 = clone_decoder(mae)

    @classmethod
    def from_settings(cls, mae: MaskedAutoencoder, settings: Settings) -> 'DetectGuideAmplifyNet':
        t = settings.train
        return cls(mae, settings, use_dssn_dual=t.use_dssn_dual, use_tapi=t.use_tapi,
                   use_adaptive_decoder=t.use_adaptive_decoder, detach_prompt=t.detach_prompt)

    @property
    def flags(self) -> Dict[str, bool]:
        return {
            'use_dssn_dual': self.use_dssn_dual,
            'use_tapi': self.use_tapi,
            'use_adaptive_decoder': self.use_adaptive_decoder,
        }

    @property
    def stage2_decoder(self) -> Optional[nn.Module]:
        return getattr(self.mae, 'decoder_stage2', None)

    def parameter_groups(self) -> Dict[str, nn.Module]:
        """Named groups as they appear in checkpoints."""
        groups = {'mae.encoder': self.mae.encoder, 'mae.decoder': self.mae.decoder, 'dssn': self.dssn}
        if self.tapi is not None:
            groups['tapi.prompt'] = self.tapi.prompt
            groups['tapi.film'] = self.tapi.film
        if self.stage2_decoder is not None:
            groups['mae.decoder_stage2'] = self.stage2_decoder
        return groups

    def frozen_groups(self) -> Dict[str, nn.Module]:
        return {'mae.encoder': self.mae.encoder, 'mae.decoder': self.mae.decoder}

    def trainable_parameters(self) -> Iterator[nn.Parameter]:
        return (p for p in self.parameters() if p.requires_grad)

    def forward_two_stage(self, x: torch.Tensor, stage2: bool = True) -> ForwardTrace:
        """
        Stage 1 reconstructs and segments; Stage 2 reconstructs from FiLM-modulated tokens
        and segments again with the same segmenter.

        Args:
            x: Bx3xHxW images in [0, 1]
            stage2: Run Stage 2 (ignored when TAPI is disabled)

        Returns:
            ForwardTrace; when Stage 2 does not run, ``m_ref`` is ``m_crs``
        """
        with torch.no_grad():
            recon = self.mae.reconstruct(x)
        m_crs = self.dssn(x, recon.residual)
        trace = ForwardTrace(x=x, x_rec_s1=recon.x_rec, residual_s1=recon.residual, m_crs=m_crs, m_ref=m_crs)
        if not (self.use_tapi and stage2):
            return trace

        guided = guided_reconstruct(x, m_crs, recon.tokens, self.mae, self.tapi,
                                    decoder=self.stage2_decoder, detach_prompt=self.detach_prompt)
        trace.prompts = guided.prompts
        trace.film = guided.film
        trace.x_rec_s2 = guided.recon.x_rec
        trace.residual_s2 = guided.recon.residual
        trace.m_ref = self.dssn(x, guided.recon.residual)
        return trace

    def forward(self, x: torch.Tensor):
        trace = self.forward_two_stage(x)
        return trace.m_crs, trace.m_ref

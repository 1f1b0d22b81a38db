"""
Pretraining and inference for the realness prior.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np
import torch
from tqdm import tqdm

from app.errors import PretrainingDataError
from app.nets.mae import MaskedAutoencoder, ReconResult, patchify
from app.services.synth_data_service import ForgeryRecord
from app.settings import MAEConfig

logger = logging.getLogger(__name__)


def masked_reconstruction_loss(x: torch.Tensor, model: MaskedAutoencoder, mask_ratio: float,
                               generator: Optional[torch.Generator] = None,
                               visible_weight: float = 0.0) -> torch.Tensor:
    """
    Mean squared error on masked patches, plus ``visible_weight`` times the error on
    visible patches.
    """
    pred, mask, target = model.forward_masked(x, mask_ratio, generator)
    per_patch = ((pred - target) ** 2).mean(dim=-1)
    masked = (per_patch * mask).sum() / mask.sum().clamp(min=1)
    if visible_weight <= 0:
        return masked
    visible = 1 - mask
    return masked + visible_weight * (per_patch * visible).sum() / visible.sum().clamp(min=1)


def mean_patch_baseline(train_images: torch.Tensor, eval_images: torch.Tensor, patch_size: int) -> float:
    """MSE of predicting every patch of ``eval_images`` with the mean training patch."""
    mean_patch = patchify(train_images, patch_size).mean(dim=(0, 1))
    target = patchify(eval_images, patch_size)
    return float(((target - mean_patch) ** 2).mean())


@dataclass
class ResidualContrast:
    """Per-image mean residual inside and outside the ground-truth mask."""

    in_mask: List[float]
    out_mask: List[float]

    @property
    def ratio(self) -> List[float]:
        return [i / o if o > 0 else math.inf for i, o in zip(self.in_mask, self.out_mask)]


def residual_contrast(residual: torch.Tensor, mask: torch.Tensor) -> ResidualContrast:
    """
    Channel-averaged residual means per image inside and outside ``mask``.

    Images whose mask is empty or full get NaN on the undefined side.
    """
    r = residual.mean(dim=1).reshape(residual.shape[0], -1).double()
    m = (mask.reshape(mask.shape[0], -1) > 0.5).double()
    n_in, n_out = m.sum(dim=1), (1 - m).sum(dim=1)
    in_mean = (r * m).sum(dim=1) / n_in
    out_mean = (r * (1 - m)).sum(dim=1) / n_out
    in_mean = torch.where(n_in > 0, in_mean, torch.full_like(in_mean, math.nan))
    out_mean = torch.where(n_out > 0, out_mean, torch.full_like(out_mean, math.nan))
    return ResidualContrast(in_mask=in_mean.tolist(), out_mask=out_mean.tolist())


@dataclass
class PretrainHistory:
    epoch_losses: List[float] = field(default_factory=list)
    val_masked_mse: Optional[float] = None
    val_baseline_mse: Optional[float] = None


class MAEService:
    """Builds, pretrains and runs the masked autoencoder."""

    def __init__(self, config: MAEConfig, img_size: int, device: str = 'cpu'):
        config.check_resolution(img_size)
        self.config = config
        self.img_size = img_size
        self.device = device

    def build(self, seed: int = 0) -> MaskedAutoencoder:
        torch.manual_seed(seed)
        return MaskedAutoencoder(self.config, self.img_size).to(self.device)

    @staticmethod
    def _as_images(data: Sequence[Union[ForgeryRecord, np.ndarray]]) -> np.ndarray:
        images = []
        for index, item in enumerate(data):
            if isinstance(item, ForgeryRecord):
                if item.is_forged or item.mask.any():
                    raise PretrainingDataError(
                        f"record {item.record_id or index} is forged ({item.forgery_kind}); "
                        f"the realness prior only trains on authentic images")
                images.append(item.image)
            else:
                images.append(item)
        return np.stack(images).astype(np.float32)

    def pretrain(self, data: Sequence[Union[ForgeryRecord, np.ndarray]], seed: int = 0,
                 epochs: Optional[int] = None, val_data: Optional[Sequence] = None,
                 model: Optional[MaskedAutoencoder] = None, progress: bool = False):
        """
        Masked-patch pretraining on authentic images.

        Args:
            data: Authentic records or 3xHxW arrays; forged records are refused
            seed: Seeds initialization, batch order and masks
            epochs: Overrides ``config.epochs``; 0 returns the initialized model untouched
            val_data: Optional held-out authentic images for the baseline comparison
            model: Continue from an existing model instead of a fresh one
            progress: Show a tqdm bar

        Returns:
            (model with its encoder frozen, PretrainHistory)
        """
        if len(data) == 0:
            raise PretrainingDataError("no images to pretrain on")
        images = torch.from_numpy(self._as_images(data)).to(self.device)
        model = model if model is not None else self.build(seed)
        epochs = self.config.epochs if epochs is None else epochs
        history = PretrainHistory()

        optimizer = torch.optim.AdamW((p for p in model.parameters() if p.requires_grad),
                                      lr=self.config.lr, weight_decay=self.config.weight_decay,
                                      betas=(0.9, 0.95))
        generator = torch.Generator().manual_seed(seed)
        mask_generator = torch.Generator(device=self.device).manual_seed(seed + 1)
        model.train()
        for epoch in tqdm(range(epochs), desc='pretrain-mae', disable=not progress):
            order = torch.randperm(len(images), generator=generator)
            total, batches = 0.0, 0
            for start in range(0, len(images), self.config.batch_size):
                batch = images[order[start:start + self.config.batch_size].to(self.device)]
                loss = masked_reconstruction_loss(batch, model, self.config.mask_ratio, mask_generator,
                                                  self.config.visible_loss_weight)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total += loss.item()
                batches += 1
            history.epoch_losses.append(total / batches)
            logger.debug(f"MAE epoch {epoch}: loss {history.epoch_losses[-1]:.5f}")
        if history.epoch_losses:
            logger.info(f"MAE pretraining finished after {epochs} epochs, "
                        f"final loss {history.epoch_losses[-1]:.5f}")

        model.eval()
        if val_data is not None and len(val_data):
            val_images = torch.from_numpy(self._as_images(val_data)).to(self.device)
            history.val_masked_mse = self.masked_mse(model, val_images, seed=seed + 2)
            history.val_baseline_mse = mean_patch_baseline(images, val_images, self.config.patch_size)
            logger.info(f"MAE val masked MSE {history.val_masked_mse:.5f} "
                        f"(mean-patch baseline {history.val_baseline_mse:.5f})")
        model.freeze_encoder()
        return model, history

    def masked_mse(self, model: MaskedAutoencoder, images: torch.Tensor, seed: int = 0) -> float:
        """Masked-patch MSE at the configured mask ratio, without gradients."""
        generator = torch.Generator(device=self.device).manual_seed(seed)
        was_training = model.training
        model.eval()
        with torch.no_grad():
            loss = masked_reconstruction_loss(images, model, self.config.mask_ratio, generator)
        model.train(was_training)
        return float(loss)

    @staticmethod
    def reconstruct(model: MaskedAutoencoder, images: torch.Tensor) -> ReconResult:
        """Full-visibility reconstruction in eval mode without gradients."""
        was_training = model.training
        model.eval()
        with torch.no_grad():
            result = model.reconstruct(images)
        model.train(was_training)
        return result

"""
Segmentation losses and pixel metrics.

Losses operate on probability masks (after sigmoid). Metrics binarize the
prediction at a threshold and score each image separately.
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import torch

from app.errors import ConfigurationError, ShapeError

logger = logging.getLogger(__name__)

BCE_EPS = 1e-7
DICE_SMOOTH = 1.0
METRICS_CSV_HEADER = ('image_id', 'iou', 'f1', 'stage')


def _check_pair(pred: torch.Tensor, target: torch.Tensor):
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ in shape")


def bce_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = BCE_EPS) -> torch.Tensor:
    """Mean binary cross-entropy with probabilities clamped to [eps, 1 - eps]."""
    _check_pair(pred, target)
    p = pred.clamp(eps, 1.0 - eps)
    return -(target * torch.log(p) + (1 - target) * torch.log(1 - p)).mean()


def dice_loss(pred: torch.Tensor, target: torch.Tensor, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """Soft Dice loss computed per image, then averaged over the batch."""
    _check_pair(pred, target)
    p = pred.reshape(pred.shape[0], -1)
    t = target.reshape(target.shape[0], -1)
    score = (2 * (p * t).sum(dim=1) + smooth) / (p.sum(dim=1) + t.sum(dim=1) + smooth)
    return (1 - score).mean()


def stage_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return bce_loss(pred, target) + dice_loss(pred, target)


@dataclass
class LossBreakdown:
    l_crs: torch.Tensor
    l_ref: torch.Tensor
    l_total: torch.Tensor
    alpha: float

    def as_floats(self) -> Dict[str, float]:
        return {'l_crs': float(self.l_crs), 'l_ref': float(self.l_ref), 'l_total': float(self.l_total)}


def total_loss(l_ref: torch.Tensor, l_crs: torch.Tensor, alpha: float = 0.5) -> LossBreakdown:
    """l_total = l_ref + alpha * l_crs"""
    if alpha < 0:
        raise ConfigurationError(f"alpha must be non-negative, got {alpha}")
    return LossBreakdown(l_crs=l_crs, l_ref=l_ref, l_total=l_ref + alpha * l_crs, alpha=alpha)


@dataclass
class MetricReport:
    """Mean and per-image IoU/F1 at one threshold."""

    iou: float = 0.0
    f1: float = 0.0
    threshold: float = 0.5
    per_image_iou: List[float] = field(default_factory=list)
    per_image_f1: List[float] = field(default_factory=list)
    image_ids: List[str] = field(default_factory=list)

    def __len__(self):
        return len(self.per_image_iou)

    @property
    def is_empty(self) -> bool:
        return not self.per_image_iou

    def extend(self, other: 'MetricReport') -> 'MetricReport':
        """Concatenate per-image values and recompute the means."""
        ious = self.per_image_iou + other.per_image_iou
        f1s = self.per_image_f1 + other.per_image_f1
        ids = self.image_ids + other.image_ids
        return MetricReport.from_values(ious, f1s, ids, self.threshold)

    def subset(self, image_ids: Sequence[str]) -> 'MetricReport':
        wanted = set(image_ids)
        rows = [(i, f, n) for i, f, n in zip(self.per_image_iou, self.per_image_f1, self.image_ids) if n in wanted]
        return MetricReport.from_values([r[0] for r in rows], [r[1] for r in rows],
                                        [r[2] for r in rows], self.threshold)

    def to_dict(self) -> Dict:
        return {'iou': self.iou, 'f1': self.f1, 'threshold': self.threshold, 'n_images': len(self)}

    @classmethod
    def from_values(cls, ious: List[float], f1s: List[float], image_ids: List[str],
                    threshold: float = 0.5) -> 'MetricReport':
        n = len(ious)
        return cls(iou=sum(ious) / n if n else 0.0, f1=sum(f1s) / n if n else 0.0, threshold=threshold,
                   per_image_iou=list(ious), per_image_f1=list(f1s), image_ids=list(image_ids))


def binarize(pred: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    return pred >= threshold


def iou_f1(pred: torch.Tensor, target: torch.Tensor, threshold: float = 0.5,
           image_ids: Optional[Sequence[str]] = None) -> MetricReport:
    """
    Pixel IoU and F1 per image.

    An image with empty prediction and empty target scores 1 on both metrics.

    Args:
        pred: B x 1 x H x W probabilities
        target: B x 1 x H x W binary ground truth
        threshold: Prediction is positive where ``pred >= threshold``
        image_ids: Optional ids, defaults to the batch index

    Returns:
        MetricReport
    """
    if not 0.0 < threshold < 1.0:
        raise ConfigurationError(f"threshold must be in (0, 1), got {threshold}")
    _check_pair(pred, target)
    b = pred.shape[0]
    p = binarize(pred, threshold).reshape(b, -1)
    t = (target > 0.5).reshape(b, -1)
    inter = (p & t).sum(dim=1).tolist()
    union = (p | t).sum(dim=1).tolist()
    total = (p.sum(dim=1) + t.sum(dim=1)).tolist()
    ious = [i / u if u else 1.0 for i, u in zip(inter, union)]
    f1s = [2 * i / s if s else 1.0 for i, s in zip(inter, total)]
    ids = list(image_ids) if image_ids is not None else [str(i) for i in range(b)]
    return MetricReport.from_values(ious, f1s, ids, threshold)


def write_metrics_csv(path: Union[str, Path], reports: Dict[str, MetricReport]) -> Path:
    """One row per (image, stage) under the ``image_id, iou, f1, stage`` header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', newline='', encoding='utf-8') as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_CSV_HEADER)
        for stage, report in reports.items():
            for image_id, iou, f1 in zip(report.image_ids, report.per_image_iou, report.per_image_f1):
                writer.writerow([image_id, f"{iou:.6f}", f"{f1:.6f}", stage])
    logger.debug(f"Wrote metrics for {len(reports)} stage(s) to {path}")
    return path

"""
Robustness sweeps: JPEG re-compression and Gaussian blur at increasing levels.

Perturbations touch images only; masks and files on disk are never modified.
"""

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from io import BytesIO
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
import torch
from kornia.filters import gaussian_blur2d
from PIL import Image

from app.errors import ConfigurationError
from app.nets.detect_guide_amplify import DetectGuideAmplifyNet
from app.services.synth_data_service import ForgeryRecord, to_uint8, to_unit
from app.services.training_service import FORGED_FAMILIES, TrainingService
from app.settings import PerturbSpec, check_level

logger = logging.getLogger(__name__)

ROBUSTNESS_CSV_HEADER = ('perturbation', 'level', 'sigma', 'mean_iou', 'mean_f1', 'mean_f1_crs', 'n_images',
                         'mean_iou_traditional', 'mean_f1_traditional', 'mean_iou_generative_like',
                         'mean_f1_generative_like')


def blur_kernel_size(sigma: float) -> int:
    """Odd kernel size 2 * ceil(3 * sigma) + 1 covering three standard deviations per side."""
    return 2 * math.ceil(3 * sigma) + 1


def gaussian_blur(images: torch.Tensor, sigma: float) -> torch.Tensor:
    """Gaussian blur with reflect padding via kornia; sigma 0 returns the input unchanged."""
    if sigma < 0:
        raise ConfigurationError(f"blur sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return images.clone()
    size = blur_kernel_size(sigma)
    if size // 2 >= min(images.shape[-2:]):
        raise ConfigurationError(f"blur sigma {sigma} is too large for {tuple(images.shape[-2:])} images")
    blurred = gaussian_blur2d(images.double(), (size, size), (sigma, sigma), border_type='reflect')
    return blurred.clamp(0.0, 1.0).to(images.dtype)


def jpeg_roundtrip(image: np.ndarray, quality: int) -> np.ndarray:
    """Encode one 3xHxW float image as baseline JPEG and decode it again."""
    buffer = BytesIO()
    Image.fromarray(to_uint8(image).transpose(1, 2, 0)).save(buffer, format='JPEG', quality=int(quality))
    buffer.seek(0)
    with Image.open(buffer) as img:
        return to_unit(np.asarray(img.convert('RGB'))).transpose(2, 0, 1).copy()


def perturb(images: torch.Tensor, spec: PerturbSpec, level: float) -> torch.Tensor:
    """
    Apply one perturbation level to a Bx3xHxW batch.

    Args:
        images: Images in [0, 1]
        spec: Perturbation family; blur sigma is ``level * spec.sigma_per_level``
        level: JPEG quality or blur level

    Returns:
        Perturbed copy of ``images``
    """
    check_level(spec.kind, level)
    if spec.kind == 'none':
        return images.clone()
    if spec.kind == 'gaussian_blur':
        return gaussian_blur(images, spec.sigma(level))
    out = [jpeg_roundtrip(img, int(level)) for img in images.detach().cpu().numpy()]
    return torch.from_numpy(np.stack(out)).to(images.device, images.dtype)


@dataclass
class RobustnessRow:
    perturbation: str
    level: float
    sigma: float
    mean_iou: float
    mean_f1: float
    mean_f1_crs: float
    n_images: int
    family_iou: Dict[str, float] = field(default_factory=dict)
    family_f1: Dict[str, float] = field(default_factory=dict)


@dataclass
class RobustnessReport:
    rows: List[RobustnessRow] = field(default_factory=list)

    def for_kind(self, kind: str) -> List[RobustnessRow]:
        return [r for r in self.rows if r.perturbation == kind]

    def __len__(self):
        return len(self.rows)


class RobustnessService:
    """
    Sweeps perturbation levels over a record set with a trained network.

    Args:
        training: Evaluation entry point (its settings supply threshold and batch size)
        num_workers: Threads used to perturb records
    """

    def __init__(self, training: TrainingService, num_workers: int = 0):
        self.training = training
        self.num_workers = num_workers

    def _perturb_record(self, record: ForgeryRecord, spec: PerturbSpec, level: float) -> ForgeryRecord:
        image = perturb(torch.from_numpy(record.image).unsqueeze(0), spec, level)[0].numpy()
        return replace(record, image=image)

    def perturb_records(self, records: Sequence[ForgeryRecord], spec: PerturbSpec,
                        level: float) -> List[ForgeryRecord]:
        if self.num_workers > 0:
            with ThreadPoolExecutor(max_workers=self.num_workers) as pool:
                return list(pool.map(lambda r: self._perturb_record(r, spec, level), records))
        return [self._perturb_record(r, spec, level) for r in records]

    def sweep(self, net: DetectGuideAmplifyNet, records: Sequence[ForgeryRecord],
              specs: Sequence[PerturbSpec]) -> RobustnessReport:
        """
        Evaluate refined and coarse metrics at every level of every spec.

        Returns:
            RobustnessReport with one row per (kind, level)
        """
        report = RobustnessReport()
        for spec in specs:
            for level in spec.levels:
                perturbed = self.perturb_records(records, spec, level)
                result = self.training.evaluate(net, perturbed)
                families = result.by_family()
                row = RobustnessRow(
                    perturbation=spec.kind, level=float(level),
                    sigma=spec.sigma(level) if spec.kind == 'gaussian_blur' else 0.0,
                    mean_iou=result.refined.iou, mean_f1=result.refined.f1,
                    mean_f1_crs=result.coarse.f1, n_images=len(result.refined),
                    family_iou={name: fam.iou for name, fam in families.items()},
                    family_f1={name: fam.f1 for name, fam in families.items()},
                )
                report.rows.append(row)
                logger.info(f"{spec.kind} level {level}: refined F1 {row.mean_f1:.4f}, "
                            f"IoU {row.mean_iou:.4f} over {row.n_images} images")
        return report

    @staticmethod
    def write_csv(report: RobustnessReport, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open('w', newline='', encoding='utf-8') as fh:
            writer = csv.writer(fh)
            writer.writerow(ROBUSTNESS_CSV_HEADER)
            for r in report.rows:
                writer.writerow([r.perturbation, f"{r.level:g}", f"{r.sigma:g}", f"{r.mean_iou:.6f}",
                                 f"{r.mean_f1:.6f}", f"{r.mean_f1_crs:.6f}", r.n_images]
                                + [f"{metric.get(family, 0.0):.6f}" for family in FORGED_FAMILIES
                                   for metric in (r.family_iou, r.family_f1)])
        return path

    @staticmethod
    def write_plots(report: RobustnessReport, out_dir: Union[str, Path]) -> Dict[str, Path]:
        """One F1-vs-level figure per perturbation kind: ``robustness_<kind>.png``."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {}
        for kind in dict.fromkeys(r.perturbation for r in report.rows):
            rows = report.for_kind(kind)
            fig, ax = plt.subplots(figsize=(5, 3.5))
            levels = [r.level for r in rows]
            ax.plot(levels, [r.mean_f1 for r in rows], marker='o', label='refined')
            ax.plot(levels, [r.mean_f1_crs for r in rows], marker='s', linestyle='--', label='coarse')
            ax.set_xlabel('JPEG quality' if kind == 'jpeg' else 'level')
            ax.set_ylabel('mean F1')
            ax.set_ylim(0.0, 1.0)
            if kind == 'jpeg':
                ax.invert_xaxis()
            ax.set_title(kind)
            ax.legend()
            fig.tight_layout()
            paths[kind] = out_dir / f"robustness_{kind}.png"
            fig.savefig(paths[kind], dpi=100)
            plt.close(fig)
        return paths

    def run(self, net: DetectGuideAmplifyNet, records: Sequence[ForgeryRecord],
            specs: Sequence[PerturbSpec], out_dir: Optional[Union[str, Path]] = None) -> RobustnessReport:
        report = self.sweep(net, records, specs)
        if out_dir is not None:
            self.write_csv(report, Path(out_dir) / 'robustness.csv')
            self.write_plots(report, out_dir)
        return report

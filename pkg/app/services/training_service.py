"""
Joint two-stage training with early stopping, and evaluation of both stages.
"""

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import torch
from tqdm import tqdm

from app.errors import CheckpointError, TrainingDivergedError
from app.nets.detect_guide_amplify import DetectGuideAmplifyNet
from app.nets.mae import MaskedAutoencoder
from app.services import checkpoint_service
from app.services.dataset_service import iter_batches, load_dataset
from app.services.mae_service import residual_contrast
from app.services.metrics_service import (
    MetricReport, iou_f1, stage_loss, total_loss, write_metrics_csv,
)
from app.services.synth_data_service import ForgeryRecord
from app.settings import Settings

logger = logging.getLogger(__name__)

EPOCH_LOG_HEADER = ('epoch', 'l_crs', 'l_ref', 'l_total', 'val_iou_crs', 'val_iou_ref',
                    'val_f1_ref')
BY_KIND_HEADER = ('group', 'n_images', 'iou_crs', 'f1_crs', 'iou_ref', 'f1_ref')
AMPLIFICATION_HEADER = ('image_id', 'forgery_kind', 'in_s1', 'out_s1', 'ratio_s1',
                        'in_s2', 'out_s2', 'ratio_s2')
PIPELINE_CHECKPOINT = 'pipeline.pt'
TRAINING_LOG = 'training_log.csv'

KIND_FAMILIES = {
    'generative-like': ('noise_fill',),
    'traditional': ('splice', 'copy_move'),
    'authentic': ('none',),
}
FORGED_FAMILIES = ('traditional', 'generative-like')


@dataclass
class EpochLog:
    epoch: int
    l_crs: float
    l_ref: float
    l_total: float
    val_iou_crs: float
    val_iou_ref: float
    val_f1_ref: float
    # monitored in place of val_iou_ref when there is no validation split; not written to the log
    train_iou_ref: float = math.nan


@dataclass
class AmplificationReport:
    """Stage-1 and Stage-2 in/out-of-mask residual ratios per forged image."""

    image_ids: List[str] = field(default_factory=list)
    kinds: List[str] = field(default_factory=list)
    in_s1: List[float] = field(default_factory=list)
    out_s1: List[float] = field(default_factory=list)
    in_s2: List[float] = field(default_factory=list)
    out_s2: List[float] = field(default_factory=list)

    @staticmethod
    def _ratios(ins: List[float], outs: List[float]) -> List[float]:
        return [i / o if o > 0 else math.inf for i, o in zip(ins, outs)]

    @property
    def ratio_s1(self) -> List[float]:
        return self._ratios(self.in_s1, self.out_s1)

    @property
    def ratio_s2(self) -> List[float]:
        return self._ratios(self.in_s2, self.out_s2)

    @property
    def fraction_amplified(self) -> float:
        """Share of images whose Stage-2 ratio is at least the Stage-1 ratio."""
        if not self.in_s2:
            return 0.0
        return sum(r2 >= r1 for r1, r2 in zip(self.ratio_s1, self.ratio_s2)) / len(self.in_s2)

    def __len__(self):
        return len(self.image_ids)


@dataclass
class EvaluationReport:
    coarse: MetricReport
    refined: MetricReport
    amplification: AmplificationReport
    kinds: Dict[str, str] = field(default_factory=dict)

    def by_kind(self) -> Dict[str, Dict[str, MetricReport]]:
        """Coarse and refined reports per forgery kind and per kind family present."""
        groups = {}
        present = sorted(set(self.kinds.values()))
        for kind in present:
            groups[kind] = (kind,)
        for family, members in KIND_FAMILIES.items():
            if family != 'authentic' and any(k in present for k in members):
                groups[family] = members
        out = {}
        for name, members in groups.items():
            ids = [i for i, k in self.kinds.items() if k in members]
            out[name] = {'coarse': self.coarse.subset(ids), 'refined': self.refined.subset(ids)}
        return out

    def by_family(self) -> Dict[str, MetricReport]:
        """Refined report per forged kind family; a family with no records gets an empty report."""
        groups = self.by_kind()
        return {family: groups[family]['refined'] if family in groups else self.refined.subset([])
                for family in FORGED_FAMILIES}

    def to_dict(self) -> Dict:
        return {
            'coarse': self.coarse.to_dict(),
            'refined': self.refined.to_dict(),
            'fraction_amplified': self.amplification.fraction_amplified,
        }


@dataclass
class TrainResult:
    net: DetectGuideAmplifyNet
    history: List[EpochLog]
    best_epoch: int
    best_score: float
    checkpoint_path: Optional[Path] = None
    log_path: Optional[Path] = None
    frozen_checksums: Dict[str, str] = field(default_factory=dict)

    @property
    def epochs_run(self) -> int:
        return len(self.history)


class TrainingService:
    """
    Trains and evaluates the two-stage network.

    Args:
        settings: All configs; ``settings.train`` drives the loop
        device: Torch device string
        progress: Show a tqdm bar over epochs
    """

    def __init__(self, settings: Settings, device: str = 'cpu', progress: bool = False):
        self.settings = settings
        self.device = device
        self.progress = progress

    @property
    def config(self):
        return self.settings.train

    def build_net(self, mae: MaskedAutoencoder) -> DetectGuideAmplifyNet:
        """Fresh network on a private copy of the prior, initialized from ``train.seed``."""
        torch.manual_seed(self.config.seed)
        net = DetectGuideAmplifyNet.from_settings(copy.deepcopy(mae), self.settings)
        return net.to(self.device)

    def _dump_batch(self, out_dir: Optional[Path], batch_id: int, records: List[ForgeryRecord],
                    images: torch.Tensor, masks: torch.Tensor) -> Optional[Path]:
        if out_dir is None:
            return None
        path = Path(out_dir) / f"diverged_batch_{batch_id:05d}.pt"
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({'batch_id': batch_id, 'record_ids': [r.record_id for r in records],
                    'images': images.cpu(), 'masks': masks.cpu()}, path)
        return path

    def train(self, mae: MaskedAutoencoder, train_records: List[ForgeryRecord],
              val_records: List[ForgeryRecord], out_dir: Optional[Union[str, Path]] = None,
              init_checkpoint: Optional[Union[str, Path]] = None) -> TrainResult:
        """
        Minimize l_ref + alpha * l_crs with early stopping on refined validation IoU.

        Args:
            mae: Pretrained prior; it is copied, never modified
            train_records: Training split
            val_records: Validation split; when empty the refined train IoU is monitored
            out_dir: Receives the checkpoint, the training log and any divergence dump
            init_checkpoint: Pipeline checkpoint to fine-tune from

        Returns:
            TrainResult with the best-epoch weights loaded
        """
        cfg = self.config
        out_dir = Path(out_dir) if out_dir is not None else None
        net = self.build_net(mae)
        if init_checkpoint is not None:
            self._load_init(net, init_checkpoint)

        pretrained = checkpoint_service.group_checksums(net.frozen_groups())
        for name, checksum in pretrained.items():
            logger.info(f"Frozen group {name} checksum {checksum[:16]}")

        optimizer = torch.optim.AdamW(list(net.trainable_parameters()), lr=cfg.lr,
                                      weight_decay=cfg.weight_decay)
        generator = torch.Generator().manual_seed(cfg.seed)
        history: List[EpochLog] = []
        best_score, best_epoch, best_state, wait = -1.0, -1, None, 0
        batch_counter = 0

        for epoch in tqdm(range(cfg.max_epochs), desc='train', disable=not self.progress):
            stage2 = epoch >= cfg.stage2_start_epoch
            net.train()
            sums = {'l_crs': 0.0, 'l_ref': 0.0, 'l_total': 0.0}
            n_batches = 0
            for _, batch, images, masks in iter_batches(train_records, cfg.batch_size, self.device,
                                                        generator):
                trace = net.forward_two_stage(images, stage2=stage2)
                losses = total_loss(stage_loss(trace.m_ref, masks), stage_loss(trace.m_crs, masks), cfg.alpha)
                if not torch.isfinite(losses.l_total):
                    dump = self._dump_batch(out_dir, batch_counter, batch, images, masks)
                    logger.error(f"Non-finite loss in epoch {epoch}, batch {batch_counter}")
                    raise TrainingDivergedError(batch_counter, dump)
                optimizer.zero_grad()
                losses.l_total.backward()
                if cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(list(net.trainable_parameters()), cfg.grad_clip)
                optimizer.step()
                for key, value in losses.as_floats().items():
                    sums[key] += value
                n_batches += 1
                batch_counter += 1
                logger.debug(f"epoch {epoch} batch {batch_counter}: {losses.as_floats()}")

            val_eval = self.evaluate(net, val_records, stage2=stage2) if val_records else None
            train_eval = None if val_eval else self.evaluate(net, train_records, stage2=stage2)
            log = EpochLog(
                epoch=epoch,
                l_crs=sums['l_crs'] / max(n_batches, 1),
                l_ref=sums['l_ref'] / max(n_batches, 1),
                l_total=sums['l_total'] / max(n_batches, 1),
                val_iou_crs=val_eval.coarse.iou if val_eval else math.nan,
                val_iou_ref=val_eval.refined.iou if val_eval else math.nan,
                val_f1_ref=val_eval.refined.f1 if val_eval else math.nan,
                train_iou_ref=train_eval.refined.iou if train_eval else math.nan,
            )
            history.append(log)
            score = log.val_iou_ref if val_eval else log.train_iou_ref
            logger.info(f"Epoch {epoch}: l_total {log.l_total:.4f} l_crs {log.l_crs:.4f} "
                        f"l_ref {log.l_ref:.4f} monitored IoU {score:.4f}")

            if score > best_score:
                best_score, best_epoch, wait = score, epoch, 0
                best_state = copy.deepcopy(net.state_dict())
            else:
                wait += 1
                if wait >= cfg.patience:
                    logger.info(f"Early stopping at epoch {epoch} (best epoch {best_epoch})")
                    break

        if best_state is not None:
            net.load_state_dict(best_state)
        net.eval()
        final = checkpoint_service.assert_frozen_unchanged(net, pretrained)
        for name, checksum in final.items():
            logger.info(f"Frozen group {name} checksum after training {checksum[:16]}")

        result = TrainResult(net=net, history=history, best_epoch=best_epoch, best_score=best_score,
                             frozen_checksums=final)
        if out_dir is not None:
            result.log_path = self.write_training_log(history, out_dir / TRAINING_LOG)
            result.checkpoint_path = checkpoint_service.save_pipeline(
                net, self.settings, out_dir / PIPELINE_CHECKPOINT, pretrained_checksums=pretrained,
                extra={'best_epoch': best_epoch, 'best_score': best_score, 'epochs_run': len(history)})
        return result

    def _load_init(self, net: DetectGuideAmplifyNet, path: Union[str, Path]) -> None:
        payload = checkpoint_service.read_checkpoint(path, checkpoint_service.KIND_PIPELINE)
        if payload.get('flags') != net.flags:
            raise CheckpointError(f"checkpoint flags {payload.get('flags')} differ from {net.flags}", path)
        try:
            net.load_state_dict(payload['state_dict'])
        except RuntimeError as e:
            raise CheckpointError(f"weights do not match the current configuration ({e})", path)
        logger.info(f"Fine-tuning from {path}")

    @staticmethod
    def write_training_log(history: List[EpochLog], path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open('w', newline='', encoding='utf-8') as fh:
            writer = csv.DictWriter(fh, fieldnames=EPOCH_LOG_HEADER, extrasaction='ignore')
            writer.writeheader()
            for log in history:
                writer.writerow(asdict(log))
        return path

    def evaluate(self, net: DetectGuideAmplifyNet, records: List[ForgeryRecord],
                 stage2: bool = True) -> EvaluationReport:
        """
        Score both stages on ``records`` in eval mode, without gradients.

        Args:
            net: Two-stage network
            records: Records to score; may be empty
            stage2: Run Stage 2

        Returns:
            EvaluationReport with coarse and refined metrics and residual amplification
        """
        threshold = self.config.threshold
        was_training = net.training
        net.eval()
        coarse = MetricReport(threshold=threshold)
        refined = MetricReport(threshold=threshold)
        amplification = AmplificationReport()
        kinds = {}
        skipped = 0
        with torch.no_grad():
            for _, batch, images, masks in iter_batches(records, self.config.batch_size, self.device):
                ids = [r.record_id or str(len(kinds) + i) for i, r in enumerate(batch)]
                kinds.update({i: r.forgery_kind for i, r in zip(ids, batch)})
                trace = net.forward_two_stage(images, stage2=stage2)
                coarse = coarse.extend(iou_f1(trace.m_crs, masks, threshold, ids))
                refined = refined.extend(iou_f1(trace.m_ref, masks, threshold, ids))
                if not trace.stage2_ran:
                    continue
                s1 = residual_contrast(trace.residual_s1, masks)
                s2 = residual_contrast(trace.residual_s2, masks)
                for j, record in enumerate(batch):
                    if not record.mask.any() or record.mask.all():
                        skipped += 1
                        continue
                    amplification.image_ids.append(ids[j])
                    amplification.kinds.append(record.forgery_kind)
                    amplification.in_s1.append(s1.in_mask[j])
                    amplification.out_s1.append(s1.out_mask[j])
                    amplification.in_s2.append(s2.in_mask[j])
                    amplification.out_s2.append(s2.out_mask[j])
        if skipped:
            logger.warning(f"{skipped} authentic record(s) skipped by amplification statistics")
        net.train(was_training)
        return EvaluationReport(coarse=coarse, refined=refined, amplification=amplification, kinds=kinds)

    def evaluate_checkpoint(self, checkpoint_path: Union[str, Path], manifest_path: Union[str, Path],
                            split: str = 'val', out_dir: Optional[Union[str, Path]] = None,
                            num_workers: int = 0) -> EvaluationReport:
        """Load a pipeline checkpoint, score one manifest split and write the report files."""
        net, _, _ = checkpoint_service.load_pipeline(checkpoint_path, self.device)
        records = list(load_dataset(manifest_path, split, num_workers=num_workers,
                                    deterministic_order=self.settings.train.deterministic_order))
        report = self.evaluate(net, records)
        logger.info(f"Evaluated {len(records)} {split} records: coarse IoU {report.coarse.iou:.4f}, "
                    f"refined IoU {report.refined.iou:.4f}")
        if out_dir is not None:
            self.write_reports(report, out_dir)
        return report

    @staticmethod
    def write_reports(report: EvaluationReport, out_dir: Union[str, Path]) -> Dict[str, Path]:
        """Write metrics.csv, metrics_by_kind.csv and amplification.csv."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {'metrics': write_metrics_csv(out_dir / 'metrics.csv',
                                              {'coarse': report.coarse, 'refined': report.refined})}

        paths['by_kind'] = out_dir / 'metrics_by_kind.csv'
        with paths['by_kind'].open('w', newline='', encoding='utf-8') as fh:
            writer = csv.writer(fh)
            writer.writerow(BY_KIND_HEADER)
            for name, stages in report.by_kind().items():
                c, r = stages['coarse'], stages['refined']
                writer.writerow([name, len(r), f"{c.iou:.6f}", f"{c.f1:.6f}", f"{r.iou:.6f}", f"{r.f1:.6f}"])

        amp = report.amplification
        paths['amplification'] = out_dir / 'amplification.csv'
        with paths['amplification'].open('w', newline='', encoding='utf-8') as fh:
            writer = csv.writer(fh)
            writer.writerow(AMPLIFICATION_HEADER)
            for row in zip(amp.image_ids, amp.kinds, amp.in_s1, amp.out_s1, amp.ratio_s1,
                           amp.in_s2, amp.out_s2, amp.ratio_s2):
                writer.writerow([row[0], row[1]] + [f"{v:.6f}" for v in row[2:]])
        return paths

"""
Command-line interface.

Every sub-command accepts ``--config`` (YAML or JSON settings) and ``--seed``.
Exit codes: 0 on success, 2 on a reported error (bad config, missing file,
corrupt checkpoint, diverged training), 1 on anything unexpected.
"""

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

from app.errors import ConfigurationError, ForensicsError
from app.settings import Settings

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_ERROR = 2


@dataclass
class CommandResult:
    metrics: Dict[str, Any] = field(default_factory=dict)
    artifact_dir: Optional[Path] = None


def apply_seed(settings: Settings, seed: Optional[int]) -> Settings:
    """``--seed`` controls data generation, pretraining and training."""
    if seed is None:
        return settings
    return replace(settings, data=replace(settings.data, seed=seed), train=replace(settings.train, seed=seed))


DATA_FLAGS = ('n_train', 'n_val', 'n_test', 'resolution')


def apply_data_overrides(settings: Settings, args) -> Settings:
    """``--n-train``, ``--n-val``, ``--n-test`` and ``--resolution`` replace the data section fields."""
    overrides = {name: getattr(args, name) for name in DATA_FLAGS if getattr(args, name, None) is not None}
    return settings.with_overrides('data', **overrides) if overrides else settings


def _load_split(data_dir: Path, split: str, num_workers: int, settings: Settings):
    from app.services.dataset_service import load_dataset
    return list(load_dataset(data_dir, split, num_workers=num_workers,
                             deterministic_order=settings.train.deterministic_order))


# ---------------------------------------------------------------------------
# Sub-command handlers

def cmd_gen_data(app, settings: Settings, args) -> CommandResult:
    from app.services.dataset_service import write_dataset
    from app.services.synth_data_service import SynthDataService

    settings = apply_data_overrides(settings, args)
    out = Path(args.out or app.data_dir)
    service = SynthDataService(settings.data, patch_size=settings.mae.patch_size,
                               num_workers=app.config['NUM_WORKERS'])
    counts = {}
    for split, records in service.generate_splits().items():
        write_dataset(records, out, split=split, seed=settings.data.seed)
        counts[split] = len(records)
    print(f"wrote {sum(counts.values())} records to {out} ({counts})")
    return CommandResult(metrics=counts, artifact_dir=out)


def cmd_pretrain_mae(app, settings: Settings, args) -> CommandResult:
    from app.services import checkpoint_service
    from app.services.mae_service import MAEService
    from app.services.synth_data_service import SynthDataService

    out = Path(args.out or app.runs_dir / 'mae.pt')
    n_images = args.n_images or settings.mae.n_images
    synth = SynthDataService(settings.data, patch_size=settings.mae.patch_size)
    images = synth.generate_real_images(n_images, seed=settings.data.seed)
    val_images = synth.generate_real_images(max(n_images // 8, 1), seed=settings.data.seed + 1)
    service = MAEService(settings.mae, settings.resolution, device=app.device)
    mae, history = service.pretrain(images, seed=settings.data.seed, epochs=args.epochs,
                                    val_data=val_images, progress=sys.stderr.isatty())
    metrics = {
        'final_loss': history.epoch_losses[-1] if history.epoch_losses else None,
        'val_masked_mse': history.val_masked_mse,
        'val_baseline_mse': history.val_baseline_mse,
    }
    checkpoint_service.save_mae(mae, settings, out, history=metrics)
    print(f"saved prior to {out} (val masked MSE {metrics['val_masked_mse']}, "
          f"mean-patch baseline {metrics['val_baseline_mse']})")
    return CommandResult(metrics=metrics, artifact_dir=out.parent)


def _training_settings(settings: Settings, mae_settings: Settings, args) -> Settings:
    settings = replace(settings, mae=mae_settings.mae)
    overrides = {}
    if getattr(args, 'max_epochs', None):
        overrides['max_epochs'] = args.max_epochs
    if getattr(args, 'patience', None):
        overrides['patience'] = args.patience
    return settings.with_overrides('train', **overrides) if overrides else settings


def cmd_train(app, settings: Settings, args) -> CommandResult:
    from app.services import checkpoint_service
    from app.services.training_service import TrainingService

    mae, mae_settings, _ = checkpoint_service.load_mae(args.mae, app.device)
    settings = _training_settings(settings, mae_settings, args)
    data_dir = Path(args.data or app.data_dir)
    train_records = _load_split(data_dir, 'train', app.config['NUM_WORKERS'], settings)
    val_records = _load_split(data_dir, 'val', app.config['NUM_WORKERS'], settings)
    out = Path(args.out or app.runs_dir / 'train')
    service = TrainingService(settings, device=app.device, progress=sys.stderr.isatty())
    result = service.train(mae, train_records, val_records, out_dir=out, init_checkpoint=args.init_checkpoint)
    metrics = {'best_epoch': result.best_epoch, 'best_score': result.best_score, 'epochs_run': result.epochs_run}
    print(f"best epoch {result.best_epoch} (monitored IoU {result.best_score:.4f}); "
          f"checkpoint {result.checkpoint_path}")
    return CommandResult(metrics=metrics, artifact_dir=out)


def cmd_eval(app, settings: Settings, args) -> CommandResult:
    from app.services.training_service import TrainingService

    out = Path(args.out or app.runs_dir / 'eval')
    service = TrainingService(settings, device=app.device)
    report = service.evaluate_checkpoint(args.checkpoint, args.data or app.data_dir, split=args.split,
                                         out_dir=out, num_workers=app.config['NUM_WORKERS'])
    print(f"{len(report.refined)} images: coarse IoU {report.coarse.iou:.4f} F1 {report.coarse.f1:.4f} | "
          f"refined IoU {report.refined.iou:.4f} F1 {report.refined.f1:.4f}")
    return CommandResult(metrics=report.to_dict(), artifact_dir=out)


def cmd_robustness(app, settings: Settings, args) -> CommandResult:
    from app.services import checkpoint_service
    from app.services.robustness_service import RobustnessService
    from app.services.training_service import TrainingService

    specs = settings.robustness
    if args.kinds:
        unknown = set(args.kinds) - {s.kind for s in specs}
        if unknown:
            raise ConfigurationError(f"no robustness spec configured for: {sorted(unknown)}")
        specs = [s for s in specs if s.kind in args.kinds]
    net, _, _ = checkpoint_service.load_pipeline(args.checkpoint, app.device)
    records = _load_split(Path(args.data or app.data_dir), args.split, app.config['NUM_WORKERS'], settings)
    out = Path(args.out or app.runs_dir / 'robustness')
    service = RobustnessService(TrainingService(settings, device=app.device), num_workers=app.config['NUM_WORKERS'])
    report = service.run(net, records, specs, out_dir=out)
    for row in report.rows:
        print(f"{row.perturbation:>14} {row.level:>6g}  F1 {row.mean_f1:.4f}  IoU {row.mean_iou:.4f}")
    return CommandResult(metrics={'rows': len(report)}, artifact_dir=out)


def cmd_ablate(app, settings: Settings, args) -> CommandResult:
    from app.services import checkpoint_service
    from app.services.ablation_service import run_ablation

    mae, mae_settings, _ = checkpoint_service.load_mae(args.mae, app.device)
    settings = _training_settings(settings, mae_settings, args)
    data_dir = Path(args.data or app.data_dir)
    train_records = _load_split(data_dir, 'train', app.config['NUM_WORKERS'], settings)
    val_records = _load_split(data_dir, 'val', app.config['NUM_WORKERS'], settings)
    out = Path(args.out or app.runs_dir / 'ablation')
    report = run_ablation(mae, train_records, val_records, settings, args.seeds, out_dir=out, device=app.device)
    for row in report.rows:
        print(f"{row.index:>4}  IoU {row.mean_iou:.4f} (std {row.std_iou:.4f})  F1 {row.mean_f1:.4f}")
    print(f"ordering IV >= III >= II >= I: {'holds' if report.ordering_holds() else 'violated'}")
    metrics = {row.index: row.mean_iou for row in report.rows}
    metrics['ordering_holds'] = report.ordering_holds()
    return CommandResult(metrics=metrics, artifact_dir=out)


def cmd_runs(app, settings: Settings, args) -> CommandResult:
    from app.services.run_registry_service import RunRegistryService

    service = RunRegistryService()
    if args.stats:
        print(json.dumps(service.run_stats(), indent=2))
        return CommandResult()
    for run in service.list_runs(command=args.command_filter, status=args.status, limit=args.limit):
        duration = f"{run['duration_ms']:.0f} ms" if run['duration_ms'] is not None else '-'
        print(f"{run['id']:>5}  {run['started_at']}  {run['command']:<13} {run['status']:<8} {duration}")
    return CommandResult()


HANDLERS: Dict[str, Callable] = {
    'gen-data': cmd_gen_data,
    'pretrain-mae': cmd_pretrain_mae,
    'train': cmd_train,
    'eval': cmd_eval,
    'robustness': cmd_robustness,
    'ablate': cmd_ablate,
    'runs': cmd_runs,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=Path, help='YAML or JSON settings file')
    common.add_argument('--seed', type=int, help='seed for data generation, pretraining and training')

    parser = argparse.ArgumentParser(prog='run.py', description='Two-stage forgery localization toolkit')
    sub = parser.add_subparsers(dest='command', metavar='COMMAND')

    p = sub.add_parser('gen-data', parents=[common], help='generate the synthetic dataset')
    p.add_argument('--out', type=Path, help='dataset directory (default FORENSICS_DATA_DIR)')
    p.add_argument('--n-train', type=int, help='override data.n_train')
    p.add_argument('--n-val', type=int, help='override data.n_val')
    p.add_argument('--n-test', type=int, help='override data.n_test')
    p.add_argument('--resolution', type=int, help='override data.resolution')

    p = sub.add_parser('pretrain-mae', parents=[common], help='pretrain the realness prior')
    p.add_argument('--out', type=Path, help='checkpoint path (default <runs>/mae.pt)')
    p.add_argument('--epochs', type=int, help='override mae.epochs')
    p.add_argument('--n-images', type=int, help='override mae.n_images')

    for name, text in (('train', 'train the two-stage network'), ('ablate', 'run the four-row ablation')):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument('--mae', type=Path, required=True, help='pretrained prior checkpoint')
        p.add_argument('--data', type=Path, help='dataset directory')
        p.add_argument('--out', type=Path, help='output directory')
        p.add_argument('--max-epochs', type=int, help='override train.max_epochs')
        p.add_argument('--patience', type=int, help='override train.patience')
        if name == 'train':
            p.add_argument('--init-checkpoint', type=Path, help='pipeline checkpoint to fine-tune from')
        else:
            p.add_argument('--seeds', type=int, nargs='+', default=[0, 1, 2], help='training seeds')

    for name, text in (('eval', 'evaluate a checkpoint'), ('robustness', 'JPEG and blur sweeps')):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument('--checkpoint', type=Path, required=True, help='pipeline checkpoint')
        p.add_argument('--data', type=Path, help='dataset directory')
        p.add_argument('--split', default='val', choices=('train', 'val', 'test'))
        p.add_argument('--out', type=Path, help='report directory')
        if name == 'robustness':
            p.add_argument('--kinds', nargs='+', help='perturbation kinds to sweep (default all configured)')

    p = sub.add_parser('runs', parents=[common], help='list recorded runs')
    p.add_argument('--limit', type=int, default=20)
    p.add_argument('--command', dest='command_filter', help='only this sub-command')
    p.add_argument('--status', choices=('running', 'ok', 'error'))
    p.add_argument('--stats', action='store_true', help='print counts and mean duration')
    return parser


def cli_main(argv: Optional[List[str]] = None, app=None) -> int:
    """
    Parse ``argv`` and run one sub-command.

    Args:
        argv: Arguments without the program name (defaults to ``sys.argv[1:]``)
        app: Pre-built App (tests); created from ``--config`` otherwise

    Returns:
        Process exit code
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_ERROR
    if not args.command:
        parser.print_help()
        return EXIT_ERROR

    arguments = {k: v for k, v in vars(args).items() if k != 'command'}
    run_logger, run_id, result = None, None, CommandResult()
    exit_code, error_message = EXIT_OK, None
    try:
        if app is None:
            from app import create_app
            app = create_app(args.config)
            settings = app.settings
        else:
            settings = Settings.from_file(args.config) if args.config else app.settings
        settings = apply_seed(settings, args.seed)
        run_logger = app.run_logger if args.command != 'runs' else None
        if run_logger is not None:
            run_id = run_logger.before_run(args.command, arguments)
        result = HANDLERS[args.command](app, settings, args)
    except (ForensicsError, FileNotFoundError) as e:
        exit_code, error_message = EXIT_ERROR, str(e)
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
    except Exception as e:
        exit_code, error_message = EXIT_UNEXPECTED, f"{type(e).__name__}: {e}"
        logger.exception(f"{args.command} crashed")
        print(f"error: {error_message}", file=sys.stderr)
    finally:
        if run_logger is not None:
            run_logger.after_run(run_id, exit_code, error_message=error_message,
                                 metrics=result.metrics, artifact_dir=result.artifact_dir)
    return exit_code

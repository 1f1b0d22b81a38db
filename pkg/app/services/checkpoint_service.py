"""
Checkpoint files.

A checkpoint is one ``torch.save`` file holding a format version, its kind
(``mae`` or ``pipeline``), the settings it was built with, the state dict, the
frozen flag and SHA-256 checksum of every parameter group, and the torch RNG state.
"""

import hashlib
import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import torch
import torch.nn as nn

from app.errors import CheckpointError
from app.nets.detect_guide_amplify import DetectGuideAmplifyNet
from app.nets.mae import MaskedAutoencoder
from app.settings import Settings

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
KIND_MAE = 'mae'
KIND_PIPELINE = 'pipeline'


def parameter_checksum(source: Union[nn.Module, Mapping[str, torch.Tensor]]) -> str:
    """SHA-256 over names and raw bytes of every tensor, in sorted name order."""
    state = source.state_dict() if isinstance(source, nn.Module) else source
    digest = hashlib.sha256()
    for name in sorted(state):
        tensor = state[name].detach().cpu().contiguous()
        digest.update(name.encode('utf-8'))
        digest.update(str(tensor.dtype).encode('utf-8'))
        digest.update(str(tuple(tensor.shape)).encode('utf-8'))
        digest.update(tensor.numpy().tobytes() if tensor.numel() else b'')
    return digest.hexdigest()


def group_checksums(groups: Mapping[str, nn.Module]) -> Dict[str, str]:
    return {name: parameter_checksum(module) for name, module in groups.items()}


def _mae_groups(mae: MaskedAutoencoder) -> Dict[str, nn.Module]:
    return {'mae.encoder': mae.encoder, 'mae.decoder': mae.decoder}


def _write(payload: Dict[str, Any], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    logger.info(f"Saved {payload['kind']} checkpoint to {path}")
    return path


def read_checkpoint(path: Union[str, Path], kind: Optional[str] = None) -> Dict[str, Any]:
    """Load and validate a checkpoint payload without building any module."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError("checkpoint not found", path)
    try:
        payload = torch.load(path, map_location='cpu', weights_only=True)
    except Exception as e:
        raise CheckpointError(f"unreadable checkpoint ({e})", path)
    if not isinstance(payload, dict) or 'format_version' not in payload:
        raise CheckpointError("file is not a versioned checkpoint", path)
    if payload['format_version'] != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format version {payload['format_version']} "
            f"(expected {FORMAT_VERSION})", path)
    if kind is not None and payload.get('kind') != kind:
        raise CheckpointError(f"expected a {kind} checkpoint, found {payload.get('kind')}", path)
    return payload


def save_mae(mae: MaskedAutoencoder, settings: Settings, path: Union[str, Path],
             history: Optional[Dict[str, Any]] = None) -> Path:
    groups = _mae_groups(mae)
    return _write({
        'format_version': FORMAT_VERSION,
        'kind': KIND_MAE,
        'settings': settings.to_dict(),
        'state_dict': {k: v for k, v in mae.state_dict().items() if not k.startswith('decoder_stage2.')},
        'frozen': {f"mae.{group}": flag for group, flag in mae.frozen.items()},
        'checksums': group_checksums(groups),
        'history': history or {},
        'rng_state': torch.get_rng_state(),
    }, path)


def load_mae(path: Union[str, Path], device: str = 'cpu') -> Tuple[MaskedAutoencoder, Settings, Dict]:
    """
    Rebuild a pretrained prior.

    Returns:
        (model with the saved frozen flags applied, settings, raw payload)
    """
    payload = read_checkpoint(path, KIND_MAE)
    settings = Settings.from_dict(payload['settings'])
    mae = MaskedAutoencoder(settings.mae, settings.resolution)
    try:
        mae.load_state_dict(payload['state_dict'])
    except RuntimeError as e:
        raise CheckpointError(f"weights do not match the saved configuration ({e})", path)
    for group, flag in payload.get('frozen', {}).items():
        if flag:
            mae.freeze(group.split('.', 1)[1])
    _verify_checksums(_mae_groups(mae), payload.get('checksums', {}), path)
    return mae.to(device), settings, payload


def save_pipeline(net: DetectGuideAmplifyNet, settings: Settings, path: Union[str, Path],
                  pretrained_checksums: Optional[Dict[str, str]] = None,
                  extra: Optional[Dict[str, Any]] = None) -> Path:
    """
    Save every parameter group of the two-stage network.

    Args:
        net: Network to save
        settings: Settings the network was built from (flags included)
        path: Target file
        pretrained_checksums: Checksums of the frozen groups when the prior was loaded
        extra: Training summary stored alongside (best epoch, metrics)
    """
    groups = net.parameter_groups()
    frozen = {name: name in net.frozen_groups() for name in groups}
    return _write({
        'format_version': FORMAT_VERSION,
        'kind': KIND_PIPELINE,
        'settings': settings.to_dict(),
        'flags': net.flags,
        'state_dict': net.state_dict(),
        'frozen': frozen,
        'checksums': group_checksums(groups),
        'pretrained_checksums': pretrained_checksums or {},
        'extra': extra or {},
        'rng_state': torch.get_rng_state(),
    }, path)


def load_pipeline(path: Union[str, Path], device: str = 'cpu') -> Tuple[DetectGuideAmplifyNet, Settings, Dict]:
    """Rebuild the two-stage network with the flags it was trained with."""
    payload = read_checkpoint(path, KIND_PIPELINE)
    settings = Settings.from_dict(payload['settings'])
    mae = MaskedAutoencoder(settings.mae, settings.resolution)
    flags = payload.get('flags', {})
    net = DetectGuideAmplifyNet(mae, settings, **flags, detach_prompt=settings.train.detach_prompt)
    try:
        net.load_state_dict(payload['state_dict'])
    except RuntimeError as e:
        raise CheckpointError(f"weights do not match the saved configuration ({e})", path)
    _verify_checksums(net.parameter_groups(), payload.get('checksums', {}), path)
    net.eval()
    return net.to(device), settings, payload


def _verify_checksums(groups: Mapping[str, nn.Module], expected: Mapping[str, str], path) -> None:
    for name, checksum in expected.items():
        if name in groups and parameter_checksum(groups[name]) != checksum:
            raise CheckpointError(f"parameter group '{name}' does not match its stored checksum", path)


def assert_frozen_unchanged(net: DetectGuideAmplifyNet, reference: Mapping[str, str]) -> Dict[str, str]:
    """Raise CheckpointError if a frozen group moved away from ``reference``."""
    current = group_checksums(net.frozen_groups())
    changed = [name for name, value in current.items() if name in reference and reference[name] != value]
    if changed:
        raise CheckpointError(f"frozen parameter group(s) changed during training: {', '.join(changed)}")
    return current

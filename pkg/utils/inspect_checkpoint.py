#!/usr/bin/env python3
"""
Inspect a Checkpoint

Prints the format version, kind, flags, configs and every parameter group with
its frozen flag and checksum, and whether the stored checksums still match.

Usage:
    python3 utils/inspect_checkpoint.py runs/mae.pt
    python3 utils/inspect_checkpoint.py runs/train/pipeline.pt --settings
"""

import argparse
import json
import sys
from pathlib import Path

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from app.errors import ForensicsError
from app.services import checkpoint_service


def group_state(state_dict, prefix: str):
    return {k[len(prefix) + 1:]: v for k, v in state_dict.items() if k.startswith(prefix + '.')}


def summarize(payload) -> dict:
    """Parameter counts and recomputed checksums per stored group."""
    state = payload['state_dict']
    summary = {}
    for group, stored in payload.get('checksums', {}).items():
        prefix = group[len('mae.'):] if payload['kind'] == checkpoint_service.KIND_MAE else group
        tensors = group_state(state, prefix)
        summary[group] = {
            'tensors': len(tensors),
            'parameters': sum(t.numel() for t in tensors.values()),
            'frozen': payload.get('frozen', {}).get(group, False),
            'checksum': stored,
            'matches': checkpoint_service.parameter_checksum(tensors) == stored,
        }
    return summary


def main():
    parser = argparse.ArgumentParser(description='Inspect a checkpoint file')
    parser.add_argument('path', type=Path)
    parser.add_argument('--settings', action='store_true', help='print the stored settings')
    args = parser.parse_args()

    try:
        payload = checkpoint_service.read_checkpoint(args.path)
    except ForensicsError as e:
        print(f"❌ {e}")
        sys.exit(2)

    print("=" * 70)
    print(f"📦 {args.path}")
    print("=" * 70)
    print(f"Format version: {payload['format_version']}")
    print(f"Kind: {payload['kind']}")
    if payload.get('flags'):
        print(f"Flags: {payload['flags']}")
    if payload.get('extra'):
        print(f"Training summary: {payload['extra']}")

    print("\nParameter groups:")
    for group, info in summarize(payload).items():
        mark = '✅' if info['matches'] else '❌'
        frozen = 'frozen' if info['frozen'] else 'trainable'
        print(f"  {mark} {group:<22} {info['parameters']:>10,} params  {frozen:<9}  {info['checksum'][:16]}")

    pretrained = payload.get('pretrained_checksums') or {}
    for group, checksum in pretrained.items():
        same = payload['checksums'].get(group) == checksum
        print(f"  {'🔒' if same else '⚠️ '} {group} {'unchanged since pretraining' if same else 'CHANGED'}")

    if args.settings:
        print("\nSettings:")
        print(json.dumps(payload['settings'], indent=2, default=str))


if __name__ == '__main__':
    main()

#!/usr/bin/env python3
"""
Render Residual Panels

Draws, for a few images of a split, one row of panels:
input | ground truth | Stage-1 residual | Stage-2 residual | coarse mask | refined mask

Usage:
    python3 utils/render_residuals.py --checkpoint runs/train/pipeline.pt --data data
    python3 utils/render_residuals.py --checkpoint runs/train/pipeline.pt --data data --count 8 --out panels.png
"""

import argparse
import sys
from pathlib import Path

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import torch

from app.errors import ForensicsError
from app.services import checkpoint_service
from app.services.dataset_service import load_dataset, to_tensors

COLUMNS = ('input', 'ground truth', 'residual S1', 'residual S2', 'M_crs', 'M_ref')


def render_panels(net, records, out_path: Path) -> Path:
    """
    Run the network on ``records`` and save the panel grid.

    Args:
        net: Two-stage network
        records: Records to draw, one row each
        out_path: PNG file to write

    Returns:
        Path of the written figure
    """
    images, masks = to_tensors(records)
    net.eval()
    with torch.no_grad():
        trace = net.forward_two_stage(images)
    residual_s2 = trace.residual_s2 if trace.stage2_ran else trace.residual_s1
    vmax = float(torch.max(trace.residual_s1.max(), residual_s2.max()))

    fig, axes = plt.subplots(len(records), len(COLUMNS), figsize=(2 * len(COLUMNS), 2 * len(records)),
                             squeeze=False)
    for row, record in enumerate(records):
        panels = (
            (images[row].permute(1, 2, 0), {}),
            (masks[row, 0], {'cmap': 'gray', 'vmin': 0, 'vmax': 1}),
            (trace.residual_s1[row].mean(0), {'cmap': 'magma', 'vmin': 0, 'vmax': vmax}),
            (residual_s2[row].mean(0), {'cmap': 'magma', 'vmin': 0, 'vmax': vmax}),
            (trace.m_crs[row, 0], {'cmap': 'gray', 'vmin': 0, 'vmax': 1}),
            (trace.m_ref[row, 0], {'cmap': 'gray', 'vmin': 0, 'vmax': 1}),
        )
        for col, (panel, kwargs) in enumerate(panels):
            ax = axes[row][col]
            ax.imshow(panel.cpu().numpy(), **kwargs)
            ax.set_xticks([])
            ax.set_yticks([])
            if row == 0:
                ax.set_title(COLUMNS[col], fontsize=9)
        axes[row][0].set_ylabel(f"{record.record_id}\n{record.forgery_kind}", fontsize=8)
    fig.tight_layout()
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return out_path


def main():
    parser = argparse.ArgumentParser(description='Render residual amplification panels')
    parser.add_argument('--checkpoint', type=Path, required=True, help='pipeline checkpoint')
    parser.add_argument('--data', type=Path, required=True, help='dataset directory')
    parser.add_argument('--split', default='val')
    parser.add_argument('--count', type=int, default=6, help='number of forged images to draw')
    parser.add_argument('--out', type=Path, default=Path('residual_panels.png'))
    args = parser.parse_args()

    try:
        net, _, _ = checkpoint_service.load_pipeline(args.checkpoint)
        records = [r for r in load_dataset(args.data, args.split) if r.is_forged][:args.count]
    except ForensicsError as e:
        print(f"❌ {e}")
        sys.exit(2)

    if not records:
        print(f"⚠️  No forged records in the {args.split} split")
        sys.exit(1)

    print(f"🖼️  Rendering {len(records)} {args.split} records...")
    path = render_panels(net, records, args.out)
    print(f"✅ Saved {path}")


if __name__ == '__main__':
    main()

"""
Dataset persistence.

Layout on disk::

    <root>/manifest.json
    <root>/images/<record_id>.png
    <root>/masks/<record_id>.png

``manifest.json`` holds one entry list per split together with the generator
version and seed. Every entry carries SHA-256 checksums of both files.
"""

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Union

import numpy as np
import torch
from PIL import Image

from app.errors import IngestionError
from app.services.synth_data_service import (
    GENERATOR_VERSION, SPLITS, ForgeryRecord, to_uint8, to_unit,
)

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.json'


@dataclass
class ManifestEntry:
    record_id: str
    image: str
    mask: str
    forgery_kind: str
    seed: int
    image_sha256: str = ''
    mask_sha256: str = ''


@dataclass
class DatasetManifest:
    """One split of a dataset directory."""

    records: List[ManifestEntry] = field(default_factory=list)
    split: str = 'train'
    generator_version: str = GENERATOR_VERSION

    def __len__(self):
        return len(self.records)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _resolve_manifest_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path / MANIFEST_NAME if path.is_dir() or path.suffix != '.json' else path


def _read_raw(manifest_path: Path) -> Dict:
    if not manifest_path.exists():
        raise IngestionError("manifest not found", manifest_path)
    try:
        return json.loads(manifest_path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise IngestionError(f"manifest is not valid JSON ({e})", manifest_path)


def _check_disjoint(splits: Dict[str, List[Dict]]) -> None:
    owner = {}
    for split, entries in splits.items():
        for entry in entries:
            for key in ('image', 'mask'):
                path = entry[key]
                if path in owner and owner[path] != split:
                    raise IngestionError(
                        f"path listed in both '{owner[path]}' and '{split}' splits", path)
                owner[path] = split


def write_dataset(records: List[ForgeryRecord], manifest_path: Union[str, Path],
                  split: str = 'train', seed: Optional[int] = None,
                  generator_version: str = GENERATOR_VERSION) -> DatasetManifest:
    """
    Write records of one split as PNG files and merge them into the manifest.

    Args:
        records: Records to store (ids must be unique within the dataset)
        manifest_path: ``manifest.json`` path or its directory
        split: train, val or test; an existing entry list for the split is replaced
        seed: Dataset seed recorded in the manifest
        generator_version: Version string of the generator that made the records

    Returns:
        DatasetManifest describing the written split
    """
    if split not in SPLITS:
        raise IngestionError(f"unknown split '{split}'")
    manifest_path = _resolve_manifest_path(manifest_path)
    root = manifest_path.parent
    raw = _read_raw(manifest_path) if manifest_path.exists() else {
        'generator_version': generator_version, 'seed': seed, 'splits': {},
    }
    if seed is not None:
        raw['seed'] = seed

    planned = []
    for index, record in enumerate(records):
        record_id = record.record_id or f"{split}_{index:05d}"
        planned.append((record, record_id, f"images/{record_id}.png", f"masks/{record_id}.png"))

    # overlapping splits are rejected before any file is written
    splits = dict(raw.get('splits', {}))
    splits[split] = [{'image': image_rel, 'mask': mask_rel} for _, _, image_rel, mask_rel in planned]
    _check_disjoint(splits)

    (root / 'images').mkdir(parents=True, exist_ok=True)
    (root / 'masks').mkdir(parents=True, exist_ok=True)
    entries = []
    for record, record_id, image_rel, mask_rel in planned:
        Image.fromarray(to_uint8(record.image).transpose(1, 2, 0)).save(root / image_rel)
        Image.fromarray(to_uint8(record.mask[0])).save(root / mask_rel)
        entries.append(ManifestEntry(
            record_id=record_id, image=image_rel, mask=mask_rel,
            forgery_kind=record.forgery_kind, seed=int(record.source_seed),
            image_sha256=_sha256(root / image_rel), mask_sha256=_sha256(root / mask_rel),
        ))

    splits[split] = [asdict(e) for e in entries]
    raw['splits'] = splits
    manifest_path.write_text(json.dumps(raw, indent=2), encoding='utf-8')
    logger.info(f"Wrote {len(entries)} {split} records to {root}")
    return DatasetManifest(records=entries, split=split,
                           generator_version=raw.get('generator_version', generator_version))


def read_manifest(manifest_path: Union[str, Path], split: str) -> DatasetManifest:
    """Parse and validate the manifest, returning one split (empty if absent)."""
    manifest_path = _resolve_manifest_path(manifest_path)
    raw = _read_raw(manifest_path)
    splits = raw.get('splits', {})
    _check_disjoint(splits)
    entries = [ManifestEntry(**e) for e in splits.get(split, [])]
    return DatasetManifest(records=entries, split=split,
                           generator_version=raw.get('generator_version', ''))


def _load_entry(root: Path, entry: ManifestEntry) -> ForgeryRecord:
    image_path, mask_path = root / entry.image, root / entry.mask
    for path, checksum in ((image_path, entry.image_sha256), (mask_path, entry.mask_sha256)):
        if not path.exists():
            raise IngestionError("missing dataset file", path)
        if checksum and _sha256(path) != checksum:
            raise IngestionError("checksum mismatch", path)
    with Image.open(image_path) as img:
        image = to_unit(np.asarray(img.convert('RGB'))).transpose(2, 0, 1)
    with Image.open(mask_path) as img:
        mask = (np.asarray(img.convert('L')) > 127).astype(np.float32)[None]
    return ForgeryRecord(image=np.ascontiguousarray(image), mask=mask,
                         forgery_kind=entry.forgery_kind, source_seed=entry.seed,
                         record_id=entry.record_id)


def load_dataset(manifest_path: Union[str, Path], split: Optional[str] = None,
                 num_workers: int = 0, deterministic_order: bool = True) -> Iterator[ForgeryRecord]:
    """
    Load records from a dataset directory.

    Args:
        manifest_path: ``manifest.json`` path or its directory
        split: Split to load; all splits in train, val, test order when None
        num_workers: Threads used to prefetch files
        deterministic_order: Deliver records in manifest order even when prefetching

    Returns:
        Iterator of ForgeryRecord
    """
    manifest_path = _resolve_manifest_path(manifest_path)
    root = manifest_path.parent
    splits = [split] if split else list(SPLITS)
    entries = [e for s in splits for e in read_manifest(manifest_path, s).records]
    if not entries:
        return iter(())
    if num_workers <= 0:
        return (_load_entry(root, e) for e in entries)

    def prefetch():
        with ThreadPoolExecutor(max_workers=num_workers) as pool:
            if deterministic_order:
                yield from pool.map(lambda e: _load_entry(root, e), entries)
            else:
                futures = [pool.submit(_load_entry, root, e) for e in entries]
                for future in as_completed(futures):
                    yield future.result()
    return prefetch()


def to_tensors(records: List[ForgeryRecord], device: str = 'cpu'):
    """Stack records into (images Bx3xHxW, masks Bx1xHxW) float32 tensors."""
    images = torch.from_numpy(np.stack([r.image for r in records])).to(device)
    masks = torch.from_numpy(np.stack([r.mask for r in records])).to(device)
    return images, masks


def iter_batches(records: List[ForgeryRecord], batch_size: int, device: str = 'cpu',
                 generator: Optional[torch.Generator] = None) -> Iterator:
    """
    Yield (batch_index, records, images, masks). Shuffled with ``generator`` when given,
    otherwise in list order.
    """
    if generator is not None:
        order = torch.randperm(len(records), generator=generator).tolist()
    else:
        order = list(range(len(records)))
    for batch_index, start in enumerate(range(0, len(order), batch_size)):
        batch = [records[i] for i in order[start:start + batch_size]]
        images, masks = to_tensors(batch, device)
        yield batch_index, batch, images, masks

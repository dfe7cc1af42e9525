"""
PNG dataset layout:

    <root>/images/<stem>.png     grayscale frames
    <root>/masks/<stem>.png      optional, 0/255 (0/1 accepted)

Samples come back sorted by stem; a mask is matched to its image by stem.
"""
import json
import logging
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from guidewire_platform.exceptions import DatasetError, InvalidSampleError
from simulation.compositing import BackgroundPool
from simulation.scenes import DomainTag, Sample

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = ('.png', '.tif', '.tiff', '.bmp', '.jpg', '.jpeg')


def read_grayscale(path):
    with Image.open(path) as image:
        return np.asarray(image.convert('L'), dtype=np.uint8).copy()


def write_image(image, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode='L').save(path)


def write_mask(mask, path):
    write_image(np.asarray(mask, dtype=np.uint8) * 255, path)


def read_mask(path):
    mask = read_grayscale(path)
    values = set(np.unique(mask).tolist())
    if values <= {0, 1}:
        return mask
    if values <= {0, 255}:
        return (mask // 255).astype(np.uint8)
    raise InvalidSampleError(f'mask {Path(path).name} has values other than 0/1 or 0/255')


def _files_by_stem(directory):
    return {
        path.stem: path
        for path in sorted(directory.iterdir())
        if path.is_file() and path.suffix.lower() in IMAGE_SUFFIXES
    }


def ingest_dataset(root, domain_tag=DomainTag.SOURCE):
    """
    Load ``root`` into Samples. Returns ``(samples, errors)``; a file that
    cannot be read or whose mask does not fit its image becomes an entry in
    ``errors`` and the rest of the batch still loads.
    """
    root = Path(root)
    image_dir = root / 'images'
    if not image_dir.is_dir():
        raise DatasetError(f'{root} has no images/ directory', {'root': str(root)})
    mask_dir = root / 'masks'
    images = _files_by_stem(image_dir)
    masks = _files_by_stem(mask_dir) if mask_dir.is_dir() else {}

    samples, errors = [], []
    for stem in sorted(images):
        try:
            image = read_grayscale(images[stem])
            mask = read_mask(masks[stem]) if stem in masks else None
            samples.append(Sample(image=image, mask=mask, domain_tag=domain_tag, name=stem))
        except (OSError, UnidentifiedImageError, InvalidSampleError) as exc:
            errors.append({'file': images[stem].name, 'error': type(exc).__name__, 'message': str(exc)})

    for stem in sorted(set(masks) - set(images)):
        errors.append({'file': masks[stem].name, 'error': 'OrphanMask', 'message': 'mask has no image'})
    if errors:
        logger.warning('Ingested %d samples from %s with %d errors', len(samples), root, len(errors))
    else:
        logger.info('Ingested %d samples from %s', len(samples), root)
    return samples, errors


def load_dataset(root, domain_tag=DomainTag.SOURCE, require_masks=False):
    """ingest_dataset for pipeline stages: any per-file error or missing mask is fatal."""
    samples, errors = ingest_dataset(root, domain_tag)
    if errors:
        raise DatasetError(f'{len(errors)} unreadable files under {root}', {'errors': errors})
    if require_masks and not all(sample.has_mask for sample in samples):
        raise DatasetError(f'every sample under {root} needs a mask')
    return samples


def write_dataset(samples, root):
    root = Path(root)
    for sample in samples:
        write_image(sample.image, root / 'images' / f'{sample.name}.png')
        if sample.has_mask:
            write_mask(sample.mask, root / 'masks' / f'{sample.name}.png')
    return root


def export_pool(pool: BackgroundPool, root):
    """``<root>/pool/NNNN.png`` plus ``<root>/pool_manifest.json`` with each patch's provenance."""
    root = Path(root)
    entries = []
    for index, (patch, provenance) in enumerate(zip(pool.patches, pool.provenance)):
        filename = f'{index:04d}.png'
        write_image(patch, root / 'pool' / filename)
        entries.append({'file': filename, 'provenance': provenance})
    manifest = root / 'pool_manifest.json'
    manifest.write_text(json.dumps({'patch_shape': list(pool.patch_shape), 'patches': entries}, indent=2),
                        encoding='utf-8')
    return manifest


def load_pool(root):
    root = Path(root)
    manifest_path = root / 'pool_manifest.json'
    if not manifest_path.is_file():
        raise DatasetError(f'{root} has no pool_manifest.json')
    manifest = json.loads(manifest_path.read_text(encoding='utf-8'))
    patches = [read_grayscale(root / 'pool' / entry['file']) for entry in manifest['patches']]
    return BackgroundPool(patches=tuple(patches), provenance=tuple(e['provenance'] for e in manifest['patches']))

"""
Coarse-stage inference on target frames and conversion into pseudo-labels.
"""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch

from guidewire_platform.exceptions import GuidewireError, ShapeMismatchError
from pipeline.datasets import write_mask
from segmentation.networks import PLAIN_CONV_HEAD, as_image_batch

from .clustering import ClusterParams, PseudoLabel, RawPrediction, filter_clusters

logger = logging.getLogger(__name__)


@torch.no_grad()
def infer_raw(coarse_model, image) -> RawPrediction:
    """sigmoid(plain_decode(encode_image(x))) for one frame."""
    return infer_raw_batch(coarse_model, np.asarray(image)[None])[0]


@torch.no_grad()
def infer_raw_batch(coarse_model, images) -> list:
    coarse_model.require_decoder(PLAIN_CONV_HEAD)
    batch, _ = as_image_batch(images)
    coarse_model.eval()
    probs = torch.sigmoid(coarse_model.plain_decode(coarse_model.encode_image(batch)))
    return [RawPrediction(prob=p.numpy()) for p in probs]


def generate_pseudo_labels(coarse_model, target_images, threshold=0.5, params=None,
                           batch_size=16, workers=1):
    """
    Pseudo-label every frame of ``target_images`` (Samples). Returns
    ``(labels, failures)``; a failing frame yields an empty label and a
    failure record instead of stopping the batch.
    """
    params = params or ClusterParams()
    raw = [None] * len(target_images)
    failures = []

    for start in range(0, len(target_images), batch_size):
        chunk = target_images[start:start + batch_size]
        try:
            if len({s.shape for s in chunk}) != 1:
                raise ShapeMismatchError('frames in a batch differ in shape')
            predictions = infer_raw_batch(coarse_model, np.stack([s.image for s in chunk]))
            raw[start:start + len(chunk)] = predictions
        except GuidewireError:
            for offset, sample in enumerate(chunk):
                try:
                    raw[start + offset] = infer_raw(coarse_model, sample.image)
                except GuidewireError as exc:
                    failures.append({'frame': sample.name, 'error': type(exc).__name__, 'message': str(exc)})

    def clean(index):
        sample = target_images[index]
        if raw[index] is None:
            return PseudoLabel(mask=np.zeros(sample.shape, dtype=np.uint8), source_frame=sample.name)
        return filter_clusters(raw[index], threshold, params, source_frame=sample.name)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        labels = list(executor.map(clean, range(len(target_images))))

    empty = sum(label.low_confidence for label in labels)
    logger.info('Pseudo-labelled %d frames (%d empty, %d failed)', len(labels), empty, len(failures))
    return labels, failures


def write_pseudo_labels(labels, root, failures=(), params=None, threshold=None):
    """``<root>/pseudo_masks/*.png`` plus ``<root>/pseudo_manifest.json``."""
    root = Path(root)
    mask_dir = root / 'pseudo_masks'
    mask_dir.mkdir(parents=True, exist_ok=True)
    for label in labels:
        write_mask(label.mask, mask_dir / f'{label.source_frame}.png')

    manifest = {
        'threshold': threshold,
        'cluster_params': vars(params) if params is not None else None,
        'frames': [label.to_dict() for label in labels],
        'failures': list(failures),
    }
    with open(root / 'pseudo_manifest.json', 'w', encoding='utf-8') as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
    return root / 'pseudo_manifest.json'

"""
Structure-preserving style transfer: guidewire pixels from the source scene
are pasted onto target-style background patches, then domain noise is added.
"""
import logging
from dataclasses import dataclass, replace

import numpy as np

from guidewire_platform.exceptions import EmptyPoolError, InvalidSampleError, ShapeMismatchError
from guidewire_platform.seeding import spawn_seeds

from .scenes import DomainTag, NoiseParams, Sample

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class BackgroundPool:
    patches: tuple
    provenance: tuple = ()

    def __post_init__(self):
        patches = tuple(np.array(patch, dtype=np.uint8, copy=True) for patch in self.patches)
        if not patches:
            raise EmptyPoolError('a background pool needs at least one patch')
        shape = patches[0].shape
        if any(patch.shape != shape for patch in patches):
            raise ShapeMismatchError('all background patches must share one size')
        provenance = tuple(self.provenance) or tuple(f'patch_{k}' for k in range(len(patches)))
        if len(provenance) != len(patches):
            raise InvalidSampleError('provenance must name every patch')
        object.__setattr__(self, 'patches', patches)
        object.__setattr__(self, 'provenance', provenance)

    def __len__(self):
        return len(self.patches)

    @property
    def patch_shape(self):
        return self.patches[0].shape


def build_background_pool(images, patch_size, K, seed=0, offsets=None, names=None) -> BackgroundPool:
    """
    Crop ``K`` patches, cycling through ``images``. Offsets are taken from
    ``offsets`` when given, otherwise drawn uniformly with ``seed``.
    """
    if K <= 0:
        raise EmptyPoolError(f'pool size K must be positive, got {K}')
    images = [np.asarray(image) for image in images]
    if not images:
        raise EmptyPoolError('no images to crop background patches from')

    patch_h, patch_w = patch_size
    for index, image in enumerate(images):
        if image.shape[0] < patch_h or image.shape[1] < patch_w:
            raise ShapeMismatchError(
                f'image {index} of shape {image.shape} is smaller than patch {tuple(patch_size)}'
            )
    if offsets is not None and len(offsets) != K:
        raise InvalidSampleError('offsets must give one (row, col) per patch')

    names = list(names) if names is not None else [f'image_{i}' for i in range(len(images))]
    rng = np.random.default_rng(seed)
    patches, provenance = [], []
    for k in range(K):
        index = k % len(images)
        image = images[index]
        if offsets is not None:
            row, col = offsets[k]
        else:
            row = int(rng.integers(0, image.shape[0] - patch_h + 1))
            col = int(rng.integers(0, image.shape[1] - patch_w + 1))
        if row < 0 or col < 0 or row + patch_h > image.shape[0] or col + patch_w > image.shape[1]:
            raise ShapeMismatchError(f'offset ({row}, {col}) does not fit image {index}')
        patches.append(image[row:row + patch_h, col:col + patch_w].copy())
        provenance.append(f'{names[index]}@{row},{col}')

    logger.info('Built background pool of %d patches (%dx%d)', K, patch_h, patch_w)
    return BackgroundPool(patches=tuple(patches), provenance=tuple(provenance))


def composite(sample: Sample, pool: BackgroundPool, noise: NoiseParams, patch_index=None) -> Sample:
    """
    x' = (x ⊗ y) ⊕ b_k, followed by additive Gaussian noise over the full grid.

    The background is drawn from ``noise.seed`` unless ``patch_index`` pins it.
    """
    if sample.mask is None:
        raise InvalidSampleError('composite needs a labelled sample')
    if pool.patch_shape != sample.shape:
        raise ShapeMismatchError(
            f'pool patches are {pool.patch_shape}, sample is {sample.shape}'
        )

    rng = np.random.default_rng(noise.seed)
    if patch_index is None:
        patch_index = int(rng.integers(len(pool)))
    background = pool.patches[patch_index]

    image = np.where(sample.mask == 1, sample.image, background)
    if noise.sigma > 0:
        noisy = image.astype(np.float64) + rng.normal(0.0, noise.sigma, size=image.shape)
        image = np.clip(np.rint(noisy), 0, 255)

    return replace(
        sample,
        image=image.astype(np.uint8),
        mask=sample.mask.copy(),
        domain_tag=DomainTag.SYNTHESIZED,
    )


def synthesize_dataset(source, pool: BackgroundPool, N, noise: NoiseParams, seed) -> list:
    """
    ``N`` target-alike frames; source samples are used cyclically, the
    background of each frame is uniform over the pool.
    """
    if not source:
        raise EmptyPoolError('source dataset is empty')
    if N < 1:
        raise InvalidSampleError(f'N must be at least 1, got {N}')

    rng = np.random.default_rng(seed)
    choices = rng.integers(0, len(pool), size=N)
    noise_seeds = spawn_seeds(noise.seed, N)

    frames = []
    for i in range(N):
        src = source[i % len(source)]
        frame = composite(
            src, pool, NoiseParams(sigma=noise.sigma, seed=noise_seeds[i]), patch_index=int(choices[i])
        )
        frames.append(replace(frame, name=f'synth_{i:04d}'))
    logger.info('Synthesized %d frames from %d source scenes', N, len(source))
    return frames

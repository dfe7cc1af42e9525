"""
Strong photometric perturbation P(x). Pixel coordinates never move, so the
pseudo-labels and teacher targets of x stay valid for P(x).
"""
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class AugmentationPolicy:
    intensity_jitter: float = 0.2
    blur_sigma_range: tuple = (0.5, 1.5)
    noise_sigma: float = 4.0
    erase_count: int = 2
    erase_size_range: tuple = (8, 24)

    def __post_init__(self):
        object.__setattr__(self, 'blur_sigma_range', tuple(float(v) for v in self.blur_sigma_range))
        object.__setattr__(self, 'erase_size_range', tuple(int(v) for v in self.erase_size_range))
        if not 0.0 <= self.intensity_jitter < 1.0:
            raise ValueError('intensity_jitter must lie in [0, 1)')
        lo, hi = self.blur_sigma_range
        if not 0.0 <= lo <= hi:
            raise ValueError('blur_sigma_range must be ordered and non-negative')
        if self.noise_sigma < 0 or self.erase_count < 0:
            raise ValueError('noise_sigma and erase_count must be non-negative')
        lo, hi = self.erase_size_range
        if not 1 <= lo <= hi:
            raise ValueError('erase_size_range must be ordered and positive')

    @classmethod
    def identity(cls):
        return cls(intensity_jitter=0.0, blur_sigma_range=(0.0, 0.0), noise_sigma=0.0, erase_count=0)


def strong_perturb(image, policy: AugmentationPolicy, seed):
    """Jitter → blur → noise → rectangular erasing, clamped to [0, 255] (float32)."""
    rng = np.random.default_rng(seed)
    out = np.array(image, dtype=np.float32, copy=True)
    height, width = out.shape

    if policy.intensity_jitter > 0:
        out *= np.float32(rng.uniform(1.0 - policy.intensity_jitter, 1.0 + policy.intensity_jitter))

    lo, hi = policy.blur_sigma_range
    if hi > 0:
        sigma = rng.uniform(lo, hi)
        if sigma > 0:
            out = ndimage.gaussian_filter(out, sigma=sigma, mode='reflect')

    if policy.noise_sigma > 0:
        out += rng.normal(0.0, policy.noise_sigma, size=out.shape).astype(np.float32)

    lo, hi = policy.erase_size_range
    for _ in range(policy.erase_count):
        h = min(int(rng.integers(lo, hi + 1)), height)
        w = min(int(rng.integers(lo, hi + 1)), width)
        row = int(rng.integers(0, height - h + 1))
        col = int(rng.integers(0, width - w + 1))
        out[row:row + h, col:col + w] = out.mean()

    return np.clip(out, 0.0, 255.0)


def perturb_batch(images, policy: AugmentationPolicy, seeds):
    return np.stack([strong_perturb(image, policy, seed) for image, seed in zip(images, seeds)])

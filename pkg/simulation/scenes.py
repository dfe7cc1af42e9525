"""
Procedural source-domain scenes.

Guidewires are Catmull-Rom splines through random control points, stroked
with a round brush. The mask is the hard rasterization; anti-aliasing only
ever touches the rendered image.
"""
import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional

import numpy as np
from scipy import ndimage

from guidewire_platform.exceptions import InvalidSampleError, SceneError
from guidewire_platform.seeding import SEED_SPACE, spawn_seeds

logger = logging.getLogger(__name__)

MIN_SCENE_SIZE = 64
SAMPLES_PER_PIXEL = 8


class DomainTag(str, Enum):
    SOURCE = 'source'
    SYNTHESIZED = 'synthesized'
    TARGET = 'target'


@dataclass(frozen=True, eq=False)
class Sample:
    """
    One grayscale frame (uint8, H×W) with an optional binary guidewire mask.
    """
    image: np.ndarray
    mask: Optional[np.ndarray] = None
    domain_tag: DomainTag = DomainTag.SOURCE
    name: str = ''

    def __post_init__(self):
        image = np.asarray(self.image)
        if image.ndim != 2:
            raise InvalidSampleError(f'image must be 2-D, got shape {image.shape}')
        if image.size and (image.min() < 0 or image.max() > 255):
            raise InvalidSampleError('image values must lie in [0, 255]')
        object.__setattr__(self, 'image', image.astype(np.uint8, copy=False))

        if self.mask is not None:
            mask = np.asarray(self.mask)
            if mask.shape != image.shape:
                raise InvalidSampleError(
                    f'mask shape {mask.shape} does not match image shape {image.shape}'
                )
            if not np.isin(mask, (0, 1)).all():
                raise InvalidSampleError('mask values must be exactly 0 or 1')
            object.__setattr__(self, 'mask', mask.astype(np.uint8, copy=False))

        object.__setattr__(self, 'domain_tag', DomainTag(self.domain_tag))

    @property
    def shape(self):
        return self.image.shape

    @property
    def has_mask(self):
        return self.mask is not None

    def with_tag(self, tag, **changes):
        return replace(self, domain_tag=tag, **changes)


@dataclass(frozen=True)
class SceneParams:
    control_point_count: int = 6
    wire_width_px: float = 2.0
    wire_intensity: int = 40
    background_intensity: int = 180
    seed: int = 0
    height: int = 256
    width: int = 256
    antialias: bool = True

    def __post_init__(self):
        if self.control_point_count < 4:
            raise SceneError('control_point_count must be at least 4')
        if self.wire_width_px <= 0:
            raise SceneError('wire_width_px must be positive')
        for name in ('wire_intensity', 'background_intensity'):
            value = getattr(self, name)
            if not 0 <= value <= 255:
                raise SceneError(f'{name} must lie in [0, 255]')
        if self.wire_intensity == self.background_intensity:
            raise SceneError('wire_intensity must differ from background_intensity')


@dataclass(frozen=True)
class NoiseParams:
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise SceneError('noise sigma must be non-negative')


def catmull_rom(control_points, samples_per_pixel=SAMPLES_PER_PIXEL):
    """Dense samples of a uniform Catmull-Rom spline through the control points."""
    points = np.asarray(control_points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2 or len(points) < 2:
        raise SceneError('a curve needs at least two (row, col) control points')

    padded = np.vstack([points[:1], points, points[-1:]])
    pieces = []
    for i in range(1, len(padded) - 2):
        p0, p1, p2, p3 = padded[i - 1], padded[i], padded[i + 1], padded[i + 2]
        chord = float(np.linalg.norm(p2 - p1))
        count = max(2, int(math.ceil(chord * samples_per_pixel)) + 1)
        t = np.linspace(0.0, 1.0, count)[:, None]
        t2, t3 = t * t, t * t * t
        segment = 0.5 * (
            2 * p1
            + (p2 - p0) * t
            + (2 * p0 - 5 * p1 + 4 * p2 - p3) * t2
            + (3 * p1 - p0 - 3 * p2 + p3) * t3
        )
        pieces.append(segment if not pieces else segment[1:])
    return np.vstack(pieces)


def rasterize_curve(control_points, shape, width_px):
    """
    Hard mask of the spline stroked with a round brush of diameter ``width_px``.

    Consecutive dense samples are less than one pixel apart, so the rounded
    centreline is 8-connected; the stroke keeps it that way.
    """
    height, width = shape
    curve = catmull_rom(control_points)
    rows = np.clip(np.rint(curve[:, 0]), 0, height - 1).astype(np.intp)
    cols = np.clip(np.rint(curve[:, 1]), 0, width - 1).astype(np.intp)

    centreline = np.zeros(shape, dtype=bool)
    centreline[rows, cols] = True
    distance = ndimage.distance_transform_edt(~centreline)
    return (distance <= width_px / 2.0).astype(np.uint8)


def sample_control_points(rng, count, height, width, margin=None):
    """Control points ordered along a random principal axis, with a bounded lateral walk."""
    margin = margin if margin is not None else max(4, min(height, width) // 10)
    transpose = bool(rng.integers(2))
    along_len, across_len = (width, height) if not transpose else (height, width)

    along = np.sort(rng.uniform(margin, along_len - 1 - margin, size=count))
    spread = (across_len - 2 * margin) / 4.0
    across = np.empty(count)
    across[0] = rng.uniform(margin, across_len - 1 - margin)
    for i in range(1, count):
        step = rng.uniform(-spread, spread)
        across[i] = np.clip(across[i - 1] + step, margin, across_len - 1 - margin)

    if transpose:
        return np.column_stack([along, across])
    return np.column_stack([across, along])


def _soft_coverage(mask):
    blurred = ndimage.gaussian_filter(mask.astype(np.float64), sigma=0.7)
    return np.maximum(mask.astype(np.float64), np.clip(blurred * 1.5, 0.0, 1.0))


def generate_guidewire_scene(params: SceneParams) -> Sample:
    if params.height < MIN_SCENE_SIZE or params.width < MIN_SCENE_SIZE:
        raise SceneError(
            f'scene must be at least {MIN_SCENE_SIZE}x{MIN_SCENE_SIZE}, '
            f'got {params.height}x{params.width}'
        )

    rng = np.random.default_rng(params.seed)
    shape = (params.height, params.width)
    control_points = sample_control_points(rng, params.control_point_count, *shape)
    mask = rasterize_curve(control_points, shape, params.wire_width_px)

    coverage = _soft_coverage(mask) if params.antialias else mask.astype(np.float64)
    background = float(params.background_intensity)
    image = background + (float(params.wire_intensity) - background) * coverage
    image = np.clip(np.rint(image), 0, 255).astype(np.uint8)

    return Sample(image=image, mask=mask, domain_tag=DomainTag.SOURCE,
                  name=f'scene_{params.seed}')


def generate_vessel_background(height, width, seed, vessel_count=5, noise_sigma=6.0,
                               base_intensity=150.0):
    """
    Target-style fluoroscopy background: a low-frequency intensity field,
    dark blurred vessel tubes and additive noise.
    """
    rng = np.random.default_rng(seed)
    shape = (height, width)

    low_freq = ndimage.gaussian_filter(rng.normal(size=shape), sigma=max(height, width) / 8.0)
    low_freq = low_freq / (np.abs(low_freq).max() + 1e-12)
    rows = np.linspace(-1.0, 1.0, height)[:, None]
    cols = np.linspace(-1.0, 1.0, width)[None, :]
    tilt = rng.uniform(-1.0, 1.0, size=2)
    image = base_intensity + 30.0 * low_freq + 20.0 * (tilt[0] * rows + tilt[1] * cols)

    for _ in range(vessel_count):
        points = sample_control_points(rng, int(rng.integers(4, 7)), height, width, margin=0)
        vessel = rasterize_curve(points, shape, rng.uniform(4.0, 12.0)).astype(np.float64)
        vessel = ndimage.gaussian_filter(vessel, sigma=rng.uniform(1.5, 3.0))
        image -= rng.uniform(15.0, 40.0) * vessel

    if noise_sigma > 0:
        image += rng.normal(0.0, noise_sigma, size=shape)
    return np.clip(np.rint(image), 0, 255).astype(np.uint8)


def generate_target_frame(params: SceneParams, seed, noise_sigma=6.0,
                          attenuation_range=(0.35, 0.6)) -> Sample:
    """
    Desk target-domain frame: the guidewire attenuates a vessel background
    instead of being painted at a constant intensity.
    """
    rng = np.random.default_rng(seed)
    scene = generate_guidewire_scene(replace(params, seed=int(rng.integers(SEED_SPACE)), antialias=False))
    background = generate_vessel_background(
        params.height, params.width, int(rng.integers(SEED_SPACE)), noise_sigma=0.0
    ).astype(np.float64)

    attenuation = rng.uniform(*attenuation_range)
    coverage = _soft_coverage(scene.mask)
    image = background * (1.0 - (1.0 - attenuation) * coverage)
    if noise_sigma > 0:
        image += rng.normal(0.0, noise_sigma, size=image.shape)
    image = np.clip(np.rint(image), 0, 255).astype(np.uint8)

    return Sample(image=image, mask=scene.mask, domain_tag=DomainTag.TARGET,
                  name=f'target_{seed}')


def generate_scenes(params: SceneParams, count, seed) -> list:
    """``count`` source scenes with per-scene seeds drawn from ``seed``."""
    seeds = spawn_seeds(seed, count)
    scenes = []
    for index, scene_seed in enumerate(seeds):
        scene = generate_guidewire_scene(replace(params, seed=scene_seed))
        scenes.append(replace(scene, name=f'source_{index:04d}'))
    logger.info('Generated %d source scenes', count)
    return scenes


def generate_target_frames(params: SceneParams, count, seed, noise_sigma, prefix='target') -> list:
    seeds = spawn_seeds(seed, count)
    frames = [
        replace(generate_target_frame(params, frame_seed, noise_sigma), name=f'{prefix}_{index:04d}')
        for index, frame_seed in enumerate(seeds)
    ]
    logger.info('Generated %d target frames (%s)', count, prefix)
    return frames


def generate_vessel_backgrounds(params: SceneParams, count, seed, prefix='vessel') -> list:
    """Guidewire-free target-style backgrounds for the compositing pool."""
    seeds = spawn_seeds(seed, count)
    frames = [
        Sample(image=generate_vessel_background(params.height, params.width, frame_seed, noise_sigma=0.0),
               domain_tag=DomainTag.TARGET, name=f'{prefix}_{index:04d}')
        for index, frame_seed in enumerate(seeds)
    ]
    logger.info('Generated %d vessel backgrounds', count)
    return frames

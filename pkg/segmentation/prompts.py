"""
Weak prompts derived from (pseudo-)label masks: the tight bounding box of
all foreground and/or labelled points sampled uniformly without replacement.
"""
import json
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np

from guidewire_platform.exceptions import (
    InsufficientPixelsError,
    NoForegroundError,
    PromptBoundsError,
)


class PromptMode(str, Enum):
    NONE = 'none'
    BOX = 'box'
    POINT = 'point'
    BOX_POINT = 'box+point'

    @property
    def uses_box(self):
        return self in (PromptMode.BOX, PromptMode.BOX_POINT)

    @property
    def uses_points(self):
        return self in (PromptMode.POINT, PromptMode.BOX_POINT)


class Box(NamedTuple):
    row_min: int
    col_min: int
    row_max: int
    col_max: int


class PointPrompt(NamedTuple):
    row: int
    col: int
    positive: bool


@dataclass(frozen=True)
class PromptSet:
    boxes: tuple = ()
    points: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, 'boxes', tuple(Box(*map(int, box)) for box in self.boxes))
        object.__setattr__(
            self, 'points',
            tuple(PointPrompt(int(p[0]), int(p[1]), bool(p[2])) for p in self.points),
        )
        for box in self.boxes:
            if box.row_min > box.row_max or box.col_min > box.col_max:
                raise PromptBoundsError(f'degenerate box {tuple(box)}')

    @classmethod
    def for_mask(cls, mask, boxes=(), points=()):
        """Build a prompt set and check every prompt against ``mask``."""
        prompts = cls(boxes=boxes, points=points)
        prompts.check_bounds(np.shape(mask))
        mask = np.asarray(mask)
        for point in prompts.points:
            if bool(mask[point.row, point.col]) != point.positive:
                polarity = 'positive' if point.positive else 'negative'
                raise PromptBoundsError(f'{polarity} point ({point.row}, {point.col}) is on the wrong side of the mask')
        return prompts

    @property
    def is_empty(self):
        return not self.boxes and not self.points

    @property
    def token_count(self):
        return 2 * len(self.boxes) + len(self.points)

    def check_bounds(self, shape):
        height, width = shape
        for box in self.boxes:
            if box.row_min < 0 or box.col_min < 0 or box.row_max >= height or box.col_max >= width:
                raise PromptBoundsError(f'box {tuple(box)} outside {height}x{width} image')
        for point in self.points:
            if not (0 <= point.row < height and 0 <= point.col < width):
                raise PromptBoundsError(f'point ({point.row}, {point.col}) outside {height}x{width} image')

    def to_dict(self):
        return {
            'boxes': [list(box) for box in self.boxes],
            'points': [[p.row, p.col, 'positive' if p.positive else 'negative'] for p in self.points],
        }


def box_prompt(mask) -> Box:
    rows, cols = np.nonzero(np.asarray(mask))
    if rows.size == 0:
        raise NoForegroundError('cannot build a box prompt from an empty mask')
    return Box(int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max()))


def point_prompts(mask, n, seed) -> PromptSet:
    mask = np.asarray(mask)
    if n == 0:
        return PromptSet()
    foreground = np.argwhere(mask == 1)
    background = np.argwhere(mask == 0)
    if len(foreground) < n or len(background) < n:
        raise InsufficientPixelsError(
            f'need {n} foreground and {n} background pixels, '
            f'have {len(foreground)} and {len(background)}'
        )

    rng = np.random.default_rng(seed)
    positives = foreground[rng.choice(len(foreground), size=n, replace=False)]
    negatives = background[rng.choice(len(background), size=n, replace=False)]
    points = [(r, c, True) for r, c in positives] + [(r, c, False) for r, c in negatives]
    return PromptSet.for_mask(mask, points=points)


def make_prompts(mask, mode, n=5, seed=0) -> PromptSet:
    mode = PromptMode(mode)
    if mode is PromptMode.NONE:
        return PromptSet()
    boxes = (box_prompt(mask),) if mode.uses_box else ()
    points = point_prompts(mask, n, seed).points if mode.uses_points else ()
    return PromptSet.for_mask(mask, boxes=boxes, points=points)


def dump_prompts(prompts_by_frame, path):
    """Debug dump: ``{frame name: prompt set}`` as JSON."""
    payload = {name: prompts.to_dict() for name, prompts in sorted(prompts_by_frame.items())}
    with open(path, 'w', encoding='utf-8') as handle:
        json.dump(payload, handle, indent=2)

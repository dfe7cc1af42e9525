"""
Pixel-level IoU / F1 / accuracy / sensitivity and dataset reports.

Empty-denominator convention: IoU, F1 and sensitivity are 1 when their
denominator is 0 (both masks empty, or no ground-truth foreground).
"""
import csv
import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from guidewire_platform.exceptions import InvalidSampleError, ShapeMismatchError


class Aggregation(str, Enum):
    MEAN_PER_FRAME = 'mean_per_frame'
    MICRO = 'micro'


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


@dataclass(frozen=True)
class SegmentationMetrics:
    iou: float
    f1: float
    accuracy: float
    sensitivity: float

    def as_percentages(self):
        return {name: f'{value * 100:.2f}' for name, value in asdict(self).items()}


def _as_binary(array, label):
    array = np.asarray(array)
    if array.dtype == bool:
        return array
    if not np.isin(array, (0, 1)).all():
        raise InvalidSampleError(f'{label} mask must be binary')
    return array.astype(bool)


def confusion(pred, gt) -> ConfusionCounts:
    pred_arr, gt_arr = np.asarray(pred), np.asarray(gt)
    if pred_arr.shape != gt_arr.shape:
        raise ShapeMismatchError(f'prediction {pred_arr.shape} vs ground truth {gt_arr.shape}')
    p = _as_binary(pred_arr, 'prediction')
    g = _as_binary(gt_arr, 'ground-truth')
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & g)),
        fp=int(np.count_nonzero(p & ~g)),
        fn=int(np.count_nonzero(~p & g)),
        tn=int(np.count_nonzero(~p & ~g)),
    )


def _ratio(numerator, denominator):
    return 1.0 if denominator == 0 else numerator / denominator


def metrics(counts: ConfusionCounts) -> SegmentationMetrics:
    if counts.total <= 0:
        raise ValueError('metrics need at least one pixel')
    return SegmentationMetrics(
        iou=_ratio(counts.tp, counts.tp + counts.fp + counts.fn),
        f1=_ratio(2 * counts.tp, 2 * counts.tp + counts.fp + counts.fn),
        accuracy=(counts.tp + counts.tn) / counts.total,
        sensitivity=_ratio(counts.tp, counts.tp + counts.fn),
    )


@dataclass
class FrameResult:
    name: str
    counts: ConfusionCounts
    metrics: SegmentationMetrics


@dataclass
class EvaluationReport:
    aggregation: Aggregation
    mean_per_frame: SegmentationMetrics
    micro: SegmentationMetrics
    frames: list = field(default_factory=list)
    label: str = ''

    @property
    def summary(self) -> SegmentationMetrics:
        return self.micro if self.aggregation is Aggregation.MICRO else self.mean_per_frame

    def to_dict(self):
        return {
            'label': self.label,
            'aggregation': self.aggregation.value,
            'summary': asdict(self.summary),
            'summary_percent': self.summary.as_percentages(),
            'mean_per_frame': asdict(self.mean_per_frame),
            'micro': asdict(self.micro),
            'frame_count': len(self.frames),
        }

    def write(self, directory, stem='metrics'):
        """``<stem>.json`` with the aggregates and ``<stem>_frames.csv`` with per-frame rows."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / f'{stem}.json', 'w', encoding='utf-8') as handle:
            json.dump(self.to_dict(), handle, indent=2, sort_keys=True)
        with open(directory / f'{stem}_frames.csv', 'w', newline='', encoding='utf-8') as handle:
            writer = csv.writer(handle)
            writer.writerow(['frame', 'tp', 'fp', 'fn', 'tn', 'iou', 'f1', 'acc', 'sen'])
            for frame in self.frames:
                c, m = frame.counts, frame.metrics
                writer.writerow([frame.name, c.tp, c.fp, c.fn, c.tn,
                                 f'{m.iou * 100:.2f}', f'{m.f1 * 100:.2f}',
                                 f'{m.accuracy * 100:.2f}', f'{m.sensitivity * 100:.2f}'])
        return directory / f'{stem}.json'


def evaluate_dataset(pred_masks, gt_masks, aggregation=Aggregation.MEAN_PER_FRAME, names=None, label=''):
    if len(pred_masks) != len(gt_masks):
        raise ShapeMismatchError(f'{len(pred_masks)} predictions vs {len(gt_masks)} ground-truth masks')
    if not gt_masks:
        raise ValueError('cannot evaluate an empty dataset')
    names = list(names) if names is not None else [f'frame_{i:04d}' for i in range(len(gt_masks))]

    frames = []
    for name, pred, gt in zip(names, pred_masks, gt_masks):
        counts = confusion(pred, gt)
        frames.append(FrameResult(name, counts, metrics(counts)))

    per_frame = np.array([[f.metrics.iou, f.metrics.f1, f.metrics.accuracy, f.metrics.sensitivity]
                          for f in frames], dtype=np.float64)
    mean = SegmentationMetrics(*(float(v) for v in per_frame.mean(axis=0)))
    total = ConfusionCounts()
    for frame in frames:
        total = total + frame.counts

    return EvaluationReport(
        aggregation=Aggregation(aggregation),
        mean_per_frame=mean,
        micro=metrics(total),
        frames=frames,
        label=label,
    )

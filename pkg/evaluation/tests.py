import csv
import json
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from guidewire_platform.exceptions import InvalidSampleError, ShapeMismatchError

from .metrics import Aggregation, ConfusionCounts, confusion, evaluate_dataset, metrics


def pixel_loop_counts(pred, gt):
    tp = fp = fn = tn = 0
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return ConfusionCounts(tp, fp, fn, tn)


class MetricTests(SimpleTestCase):

    def test_worked_example(self):
        pred = np.zeros((4, 4), dtype=np.uint8)
        gt = np.zeros((4, 4), dtype=np.uint8)
        pred[0, :3] = 1
        gt[0, :2] = 1
        gt[1, 0] = 1
        counts = confusion(pred, gt)
        self.assertEqual(counts, ConfusionCounts(tp=2, fp=1, fn=1, tn=12))
        result = metrics(counts)
        self.assertAlmostEqual(result.iou, 0.5)
        self.assertAlmostEqual(result.f1, 2 / 3)
        self.assertAlmostEqual(result.accuracy, 0.875)
        self.assertAlmostEqual(result.sensitivity, 2 / 3)

    def test_identical_masks_score_one(self):
        gt = np.random.default_rng(0).integers(0, 2, size=(16, 16))
        result = metrics(confusion(gt, gt))
        self.assertEqual((result.iou, result.f1, result.accuracy, result.sensitivity), (1.0, 1.0, 1.0, 1.0))

    def test_inverted_prediction_scores_zero(self):
        gt = np.zeros((8, 8), dtype=np.uint8)
        gt[2:5, 2:5] = 1
        result = metrics(confusion(1 - gt, gt))
        self.assertEqual((result.iou, result.accuracy, result.sensitivity), (0.0, 0.0, 0.0))

    def test_empty_ground_truth(self):
        empty = np.zeros((4, 4))
        result = metrics(confusion(empty, empty))
        self.assertEqual(result.sensitivity, 1.0)
        self.assertEqual(result.iou, 1.0)

    def test_counts_match_pixel_loop(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            pred = rng.integers(0, 2, size=(4, 4))
            gt = rng.integers(0, 2, size=(4, 4))
            self.assertEqual(confusion(pred, gt), pixel_loop_counts(pred, gt))

    def test_f1_is_monotone_in_iou(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            result = metrics(confusion(rng.integers(0, 2, size=(8, 8)), rng.integers(0, 2, size=(8, 8))))
            self.assertAlmostEqual(result.f1, 2 * result.iou / (1 + result.iou), delta=1e-12)

    def test_non_binary_and_mismatched_masks(self):
        with self.assertRaises(InvalidSampleError):
            confusion(np.full((2, 2), 2), np.zeros((2, 2)))
        with self.assertRaises(ShapeMismatchError):
            confusion(np.zeros((2, 2)), np.zeros((2, 3)))


class EvaluateDatasetTests(SimpleTestCase):

    def setUp(self):
        rng = np.random.default_rng(11)
        self.preds = [rng.integers(0, 2, size=(8, 8)) for _ in range(4)]
        self.gts = [rng.integers(0, 2, size=(8, 8)) for _ in range(4)]

    def test_micro_pools_counts(self):
        report = evaluate_dataset(self.preds, self.gts, Aggregation.MICRO)
        total = ConfusionCounts()
        for pred, gt in zip(self.preds, self.gts):
            total = total + confusion(pred, gt)
        self.assertEqual(report.summary, metrics(total))

    def test_mean_per_frame_averages_frames(self):
        report = evaluate_dataset(self.preds, self.gts)
        ious = [metrics(confusion(p, g)).iou for p, g in zip(self.preds, self.gts)]
        self.assertAlmostEqual(report.summary.iou, float(np.mean(ious)))
        self.assertEqual(len(report.frames), 4)

    def test_length_mismatch(self):
        with self.assertRaises(ShapeMismatchError):
            evaluate_dataset(self.preds, self.gts[:3])
        with self.assertRaises(ValueError):
            evaluate_dataset([], [])

    def test_write_report(self):
        report = evaluate_dataset(self.preds, self.gts, names=['a', 'b', 'c', 'd'], label='check')
        with tempfile.TemporaryDirectory() as tmp:
            path = report.write(tmp, stem='check')
            payload = json.loads(Path(path).read_text())
            with open(Path(tmp) / 'check_frames.csv', newline='') as handle:
                rows = list(csv.reader(handle))
        self.assertEqual(payload['label'], 'check')
        self.assertEqual(payload['frame_count'], 4)
        self.assertEqual(rows[0][0], 'frame')
        self.assertEqual([row[0] for row in rows[1:]], ['a', 'b', 'c', 'd'])

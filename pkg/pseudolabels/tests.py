import json
import tempfile
from collections import deque
from pathlib import Path

import numpy as np
import torch
from django.test import SimpleTestCase

from evaluation.metrics import confusion, metrics
from segmentation.networks import PLAIN_CONV_HEAD, ModelConfig, PromptableSegmenter
from simulation.scenes import DomainTag, Sample, SceneParams, generate_target_frames

from .clustering import NOISE, ClusterParams, RawPrediction, dbscan, filter_clusters
from .generation import generate_pseudo_labels, infer_raw, write_pseudo_labels

UNVISITED = -2


def quadratic_dbscan(points, eps, min_pts):
    """Textbook DBSCAN over an all-pairs distance table, clusters expanded in index order."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    distances = np.sqrt(((points[:, None, :] - points[None, :, :]) ** 2).sum(axis=-1))
    neighbours = [np.nonzero(distances[i] <= eps)[0] for i in range(n)]
    labels = np.full(n, UNVISITED)
    cluster = -1
    for i in range(n):
        if labels[i] != UNVISITED:
            continue
        if len(neighbours[i]) < min_pts:
            labels[i] = NOISE
            continue
        cluster += 1
        labels[i] = cluster
        queue = deque(neighbours[i])
        while queue:
            j = queue.popleft()
            if labels[j] == NOISE:
                labels[j] = cluster
            if labels[j] != UNVISITED:
                continue
            labels[j] = cluster
            if len(neighbours[j]) >= min_pts:
                queue.extend(neighbours[j])
    return labels


def partition(labels):
    groups = {}
    for index, label in enumerate(labels):
        groups.setdefault(int(label), set()).add(index)
    noise = frozenset(groups.pop(NOISE, set()))
    return noise, {frozenset(members) for members in groups.values()}


def blob(prob, top, left, height, width, value=0.9):
    prob[top:top + height, left:left + width] = value


class DBSCANTests(SimpleTestCase):

    def test_partition_matches_quadratic_reference(self):
        rng = np.random.default_rng(42)
        for case in range(100):
            n = int(rng.integers(1, 201))
            points = rng.integers(0, 40, size=(n, 2))
            eps = float(rng.choice([1.0, 1.5, 2.0, 3.0]))
            min_pts = int(rng.integers(1, 6))
            ours = dbscan(points, ClusterParams(eps=eps, min_pts=min_pts))
            reference = quadratic_dbscan(points, eps, min_pts)
            self.assertEqual(partition(ours), partition(reference), f'case {case}')

    def test_empty_input(self):
        self.assertEqual(len(dbscan(np.empty((0, 2)), ClusterParams())), 0)

    def test_isolated_points_are_noise(self):
        labels = dbscan([(0, 0), (20, 20), (40, 0)], ClusterParams(eps=3.0, min_pts=2))
        self.assertTrue((labels == NOISE).all())

    def test_invalid_params(self):
        with self.assertRaises(ValueError):
            ClusterParams(eps=0)
        with self.assertRaises(ValueError):
            ClusterParams(keep_top_k=0)


class FilterClustersTests(SimpleTestCase):

    def test_small_cluster_is_dropped(self):
        prob = np.zeros((40, 40), dtype=np.float32)
        blob(prob, 2, 2, 3, 10)
        blob(prob, 30, 30, 2, 3)
        label = filter_clusters(prob, 0.5, ClusterParams(min_cluster_size=20), source_frame='f0')
        self.assertEqual(int(label.mask.sum()), 30)
        self.assertTrue(label.mask[2:5, 2:12].all())
        self.assertFalse(label.mask[30:, 30:].any())
        self.assertEqual(len(label.cluster_stats), 1)
        self.assertEqual(label.cluster_stats[0].bbox, (2, 2, 4, 11))
        self.assertEqual(label.source_frame, 'f0')

    def test_keep_top_k_keeps_the_largest(self):
        prob = np.zeros((40, 40), dtype=np.float32)
        blob(prob, 2, 2, 3, 10)
        blob(prob, 20, 5, 4, 10)
        label = filter_clusters(prob, 0.5, ClusterParams(min_cluster_size=20, keep_top_k=1))
        self.assertEqual(int(label.mask.sum()), 40)
        self.assertTrue(label.mask[20:24, 5:15].all())

    def test_nothing_above_threshold_is_low_confidence(self):
        label = filter_clusters(np.full((16, 16), 0.2), 0.5, ClusterParams())
        self.assertTrue(label.low_confidence)
        self.assertEqual(label.mask.dtype, np.uint8)
        self.assertEqual(label.to_dict()['foreground_pixels'], 0)

    def test_threshold_is_inclusive(self):
        prob = np.zeros((20, 20))
        blob(prob, 5, 0, 2, 15, value=0.5)
        label = filter_clusters(prob, 0.5, ClusterParams(min_cluster_size=20))
        self.assertEqual(int(label.mask.sum()), 30)

    def test_mask_is_subset_of_thresholded_prediction(self):
        rng = np.random.default_rng(3)
        prob = rng.random((32, 32)).astype(np.float32)
        label = filter_clusters(RawPrediction(prob), 0.6, ClusterParams(min_cluster_size=5))
        self.assertTrue((label.mask <= (prob >= 0.6)).all())

    def test_probabilities_are_validated(self):
        with self.assertRaises(ValueError):
            RawPrediction(np.array([[1.5]]))
        with self.assertRaises(ValueError):
            filter_clusters(np.zeros((4, 4)), 1.0, ClusterParams())

    def test_filtering_does_not_lower_mean_iou(self):
        rng = np.random.default_rng(21)
        frames = generate_target_frames(SceneParams(height=64, width=64), 8, seed=5, noise_sigma=0.0)
        raw_iou, filtered_iou = [], []
        for frame in frames:
            prob = rng.uniform(0.0, 0.4, size=frame.shape)
            prob[rng.random(frame.shape) < 0.02] = 0.8
            prob[frame.mask == 1] = 0.9
            label = filter_clusters(prob, 0.5, ClusterParams())
            raw_iou.append(metrics(confusion((prob >= 0.5).astype(np.uint8), frame.mask)).iou)
            filtered_iou.append(metrics(confusion(label.mask, frame.mask)).iou)
        self.assertGreaterEqual(np.mean(filtered_iou), np.mean(raw_iou))
        self.assertGreater(np.mean(filtered_iou), np.mean(raw_iou))


class GenerationTests(SimpleTestCase):

    def setUp(self):
        torch.manual_seed(0)
        self.model = PromptableSegmenter(ModelConfig(
            image_size=(32, 32), patch_size=8, embed_dim=16, encoder_layers=1, attention_heads=2,
            decoder_kind=PLAIN_CONV_HEAD,
        ))
        rng = np.random.default_rng(0)
        self.frames = [
            Sample(image=rng.integers(0, 256, size=(32, 32)), domain_tag=DomainTag.TARGET, name=f'target_{i:04d}')
            for i in range(5)
        ]

    def test_one_label_per_frame_in_order(self):
        labels, failures = generate_pseudo_labels(self.model, self.frames, batch_size=2,
                                                  params=ClusterParams(min_cluster_size=3))
        self.assertEqual(failures, [])
        self.assertEqual([label.source_frame for label in labels], [f.name for f in self.frames])
        for label in labels:
            self.assertEqual(label.mask.shape, (32, 32))

    def test_worker_count_does_not_change_labels(self):
        params = ClusterParams(min_cluster_size=3)
        serial, _ = generate_pseudo_labels(self.model, self.frames, params=params, workers=1)
        parallel, _ = generate_pseudo_labels(self.model, self.frames, params=params, workers=3)
        for a, b in zip(serial, parallel):
            np.testing.assert_array_equal(a.mask, b.mask)

    def test_raw_prediction_is_a_probability_map(self):
        raw = infer_raw(self.model, self.frames[0].image)
        self.assertEqual(raw.prob.shape, (32, 32))
        self.assertTrue(((raw.prob >= 0) & (raw.prob <= 1)).all())

    def test_wrong_frame_size_is_recorded_as_failure(self):
        frames = self.frames[:2] + [Sample(image=np.zeros((16, 16)), name='small')]
        labels, failures = generate_pseudo_labels(self.model, frames, batch_size=4)
        self.assertEqual(len(labels), 3)
        self.assertEqual([f['frame'] for f in failures], ['small'])
        self.assertTrue(labels[2].low_confidence)

    def test_write_pseudo_labels(self):
        labels, failures = generate_pseudo_labels(self.model, self.frames[:2], params=ClusterParams(min_cluster_size=3))
        with tempfile.TemporaryDirectory() as tmp:
            manifest = write_pseudo_labels(labels, tmp, failures, ClusterParams(), 0.5)
            payload = json.loads(Path(manifest).read_text())
            written = sorted(p.name for p in (Path(tmp) / 'pseudo_masks').iterdir())
        self.assertEqual(written, ['target_0000.png', 'target_0001.png'])
        self.assertEqual(payload['threshold'], 0.5)
        self.assertEqual(len(payload['frames']), 2)

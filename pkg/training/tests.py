import json
import tempfile
from pathlib import Path
from unittest import mock

import numpy as np
import torch
from django.test import SimpleTestCase, TestCase

from guidewire_platform.exceptions import EmptyDatasetError, EmptyPoolError, ShapeMismatchError, TrainingAbortedError
from segmentation.lora import freeze_model, trainable_parameters
from segmentation.networks import PLAIN_CONV_HEAD, ModelConfig
from segmentation.prompts import PromptMode
from simulation.scenes import SceneParams, generate_scenes, generate_target_frames

from .augment import AugmentationPolicy, strong_perturb
from .losses import (
    ATTRACTION, INFONCE, LossConfig, LossParts, LossWeights, dice_loss, downsample_mask,
    embedding_consistency_loss, focal_loss, pooled_positive_embedding, pred_consistency_loss, total_loss,
    ts_loss, ws_loss,
)
from .manifest import EpochRecord, RunManifest
from .models import EpochLog, TrainingRun, record_run
from .trainer import (
    SELFTRAIN, WARMUP, ScheduleConfig, _fine_step, build_segmenter, evaluate_checkpoint, frame_prompts,
    init_fine_pair, train_coarse, train_fine, train_supervised_student,
)

CONFIG = LossConfig()


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def np_dice(prob, target, eps=1e-6):
    prob, target = prob.reshape(len(prob), -1), target.reshape(len(target), -1)
    return float(np.sum(1.0 - (2.0 * (prob * target).sum(1) + eps) / (prob.sum(1) + target.sum(1) + eps)))


def np_focal(prob, target, exponent=2.0, clamp=1e-6):
    p = np.clip(prob, clamp, 1 - clamp).reshape(len(prob), -1)
    t = target.reshape(len(target), -1)
    per_pixel = -(t * (1 - p) ** exponent * np.log(p) + (1 - t) * p ** exponent * np.log(1 - p))
    return float(per_pixel.mean(axis=1).sum())


def np_infonce(stu, tea, tau):
    stu = stu / np.linalg.norm(stu, axis=1, keepdims=True)
    tea = tea / np.linalg.norm(tea, axis=1, keepdims=True)
    logits = stu @ tea.T / tau
    log_norm = np.log(np.exp(logits - logits.max(axis=1, keepdims=True)).sum(axis=1)) + logits.max(axis=1)
    return float(np.mean(log_norm - np.diag(logits)))


class LossOracleTests(SimpleTestCase):

    def setUp(self):
        self.rng = np.random.default_rng(2024)

    def logits(self, batch=2):
        return self.rng.normal(0, 2, size=(batch, 8, 8))

    def mask(self, batch=2):
        return self.rng.integers(0, 2, size=(batch, 8, 8)).astype(np.float64)

    def test_dice_and_focal_match_numpy(self):
        for _ in range(50):
            logits, target = self.logits(), self.mask()
            prob = sigmoid(logits)
            self.assertAlmostEqual(float(dice_loss(torch.from_numpy(prob), torch.from_numpy(target))),
                                   np_dice(prob, target), places=9)
            self.assertAlmostEqual(float(focal_loss(torch.from_numpy(prob), torch.from_numpy(target))),
                                   np_focal(prob, target), places=9)

    def test_ts_and_pred_use_thresholded_teacher(self):
        for _ in range(50):
            p_stu, p_stu_aug, p_tea, p_tea_aug = (self.logits() for _ in range(4))
            target = (p_tea >= 0).astype(np.float64)
            expected_ts = np_dice(sigmoid(p_stu), target) + np_dice(sigmoid(p_stu_aug), target)
            got_ts = ts_loss(*(torch.from_numpy(t) for t in (p_stu, p_stu_aug, p_tea)), CONFIG)
            self.assertAlmostEqual(float(got_ts), expected_ts, places=9)

            prob_aug = sigmoid(p_tea_aug)
            expected_pred = 0.5 * np_focal(prob_aug, target) + 0.5 * np_dice(prob_aug, target)
            got_pred = pred_consistency_loss(torch.from_numpy(p_tea), torch.from_numpy(p_tea_aug), CONFIG)
            self.assertAlmostEqual(float(got_pred), expected_pred, places=9)

    def test_ws_weights_four_terms(self):
        for _ in range(50):
            preds = [self.logits() for _ in range(4)]
            y_p = self.mask()
            expected = sum(0.5 * np_dice(sigmoid(p), y_p) for p in preds)
            got = ws_loss(*(torch.from_numpy(p) for p in preds), torch.from_numpy(y_p), CONFIG)
            self.assertAlmostEqual(float(got), expected, places=9)

    def test_pooled_embedding_averages_covered_cells(self):
        for _ in range(50):
            z = self.rng.normal(size=(4, 4, 6))
            y_p = np.zeros((8, 8))
            y_p[self.rng.integers(0, 8), self.rng.integers(0, 8)] = 1
            y_p[self.rng.integers(0, 8), self.rng.integers(0, 8)] = 1
            cells = y_p.reshape(4, 2, 4, 2).max(axis=(1, 3))
            expected = (cells[..., None] * z).sum(axis=(0, 1)) / cells.sum()
            got = pooled_positive_embedding(torch.from_numpy(z), torch.from_numpy(y_p))
            np.testing.assert_allclose(got.numpy(), expected, rtol=1e-6)

    def test_empty_pseudo_label_cannot_be_pooled(self):
        with self.assertRaises(EmptyPoolError):
            pooled_positive_embedding(torch.zeros(4, 4, 6), torch.zeros(8, 8))

    def test_downsample_requires_tiling(self):
        self.assertEqual(tuple(downsample_mask(torch.ones(8, 8), (4, 4)).shape), (1, 4, 4))
        with self.assertRaises(ShapeMismatchError):
            downsample_mask(torch.ones(8, 8), (3, 3))

    def test_infonce_matches_numpy(self):
        for _ in range(50):
            stu = self.rng.normal(size=(3, 5))
            tea = self.rng.normal(size=(3, 5))
            got = embedding_consistency_loss(torch.from_numpy(stu), torch.from_numpy(tea), tau=0.3)
            self.assertAlmostEqual(float(got), np_infonce(stu, tea, 0.3), places=8)

    def test_infonce_closed_forms(self):
        same = torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
        self.assertAlmostEqual(float(embedding_consistency_loss(same, same)), np.log(2), places=9)
        orthogonal = torch.eye(2, dtype=torch.float64)
        got = embedding_consistency_loss(orthogonal, orthogonal, tau=0.3)
        self.assertAlmostEqual(float(got), np.log1p(np.exp(-1 / 0.3)), places=9)
        self.assertAlmostEqual(float(got), 0.03505, places=4)

    def test_attraction_form_and_single_pair(self):
        stu = self.rng.normal(size=(2, 5))
        tea = self.rng.normal(size=(2, 5))
        cosine = (stu * tea).sum(1) / np.linalg.norm(stu, axis=1) / np.linalg.norm(tea, axis=1)
        got = embedding_consistency_loss(torch.from_numpy(stu), torch.from_numpy(tea), form=ATTRACTION)
        self.assertAlmostEqual(float(got), float(np.mean(1 - cosine)), places=9)
        single = embedding_consistency_loss(torch.from_numpy(stu[:1]), torch.from_numpy(tea[:1]), form=INFONCE)
        self.assertAlmostEqual(float(single), float(1 - cosine[0]), places=9)
        aligned = embedding_consistency_loss(torch.from_numpy(stu[:1]), torch.from_numpy(stu[:1]))
        self.assertAlmostEqual(float(aligned), 0.0, places=9)

    def test_total_is_weighted_sum(self):
        for _ in range(50):
            values = self.rng.random(4)
            weights = LossWeights(*self.rng.random(4))
            parts = LossParts(*(torch.tensor(v) for v in values))
            expected = weights.alpha * values[0] + weights.beta * values[1] \
                + weights.gamma * values[2] + weights.delta * values[3]
            self.assertAlmostEqual(float(total_loss(parts, weights)), expected, places=6)

    def test_total_skips_missing_parts_and_rejects_nan(self):
        parts = LossParts(ws=torch.tensor(2.0))
        self.assertAlmostEqual(float(total_loss(parts, LossWeights())), 2.0)
        with self.assertRaises(TrainingAbortedError):
            total_loss(LossParts(ts=torch.tensor(float('nan'))), LossWeights())


class GradientTests(SimpleTestCase):

    def test_dice_gradcheck(self):
        rng = np.random.default_rng(5)
        logits = torch.tensor(rng.normal(size=(1, 4, 4)), dtype=torch.float64, requires_grad=True)
        target = torch.tensor(rng.integers(0, 2, size=(1, 4, 4)), dtype=torch.float64)
        self.assertTrue(torch.autograd.gradcheck(lambda x: dice_loss(torch.sigmoid(x), target), (logits,)))

    def test_ws_gradcheck(self):
        rng = np.random.default_rng(6)
        preds = [torch.tensor(rng.normal(size=(1, 4, 4)), dtype=torch.float64, requires_grad=True)
                 for _ in range(4)]
        y_p = torch.tensor(rng.integers(0, 2, size=(1, 4, 4)), dtype=torch.float64)
        self.assertTrue(torch.autograd.gradcheck(lambda *p: ws_loss(*p, y_p, CONFIG), tuple(preds)))

    def test_focal_gradcheck(self):
        rng = np.random.default_rng(10)
        logits = torch.tensor(rng.normal(size=(1, 4, 4)), dtype=torch.float64, requires_grad=True)
        target = torch.tensor(rng.integers(0, 2, size=(1, 4, 4)), dtype=torch.float64)
        self.assertTrue(torch.autograd.gradcheck(lambda x: focal_loss(torch.sigmoid(x), target), (logits,)))

    def test_pred_consistency_gradcheck(self):
        rng = np.random.default_rng(11)
        p_tea = torch.tensor(rng.normal(size=(1, 4, 4)), dtype=torch.float64)
        p_tea_aug = torch.tensor(rng.normal(size=(1, 4, 4)), dtype=torch.float64, requires_grad=True)
        self.assertTrue(torch.autograd.gradcheck(lambda x: pred_consistency_loss(p_tea, x, CONFIG), (p_tea_aug,)))

    def test_embedding_consistency_gradcheck(self):
        rng = np.random.default_rng(12)
        for form in (INFONCE, ATTRACTION):
            stu = torch.tensor(rng.normal(size=(3, 5)), dtype=torch.float64, requires_grad=True)
            tea = torch.tensor(rng.normal(size=(3, 5)), dtype=torch.float64, requires_grad=True)
            self.assertTrue(torch.autograd.gradcheck(
                lambda s, t: embedding_consistency_loss(s, t, 0.3, form), (stu, tea)), form)

    def test_ts_gradient_matches_central_differences(self):
        rng = np.random.default_rng(9)
        p_stu = torch.tensor(rng.normal(size=(1, 4, 4)), requires_grad=True)
        p_aug = torch.tensor(rng.normal(size=(1, 4, 4)))
        p_tea = torch.tensor(rng.normal(size=(1, 4, 4)))
        (grad,) = torch.autograd.grad(ts_loss(p_stu, p_aug, p_tea, CONFIG), (p_stu,))

        step = 1e-6
        numeric = np.zeros((1, 4, 4))
        base = p_stu.detach()
        for index in np.ndindex(1, 4, 4):
            shift = torch.zeros_like(base)
            shift[index] = step
            upper = float(ts_loss(base + shift, p_aug, p_tea, CONFIG))
            lower = float(ts_loss(base - shift, p_aug, p_tea, CONFIG))
            numeric[index] = (upper - lower) / (2 * step)
        np.testing.assert_allclose(grad.numpy(), numeric, atol=1e-6)

    def test_teacher_target_carries_no_gradient(self):
        rng = np.random.default_rng(7)
        p_stu = torch.tensor(rng.normal(size=(1, 4, 4)), requires_grad=True)
        p_tea = torch.tensor(rng.normal(size=(1, 4, 4)), requires_grad=True)
        p_tea_aug = torch.tensor(rng.normal(size=(1, 4, 4)), requires_grad=True)

        ts_grads = torch.autograd.grad(ts_loss(p_stu, p_stu, p_tea, CONFIG), (p_stu, p_tea), allow_unused=True)
        self.assertIsNotNone(ts_grads[0])
        self.assertTrue(ts_grads[1] is None or not ts_grads[1].any())

        pred_grads = torch.autograd.grad(pred_consistency_loss(p_tea, p_tea_aug, CONFIG), (p_tea, p_tea_aug),
                                         allow_unused=True)
        self.assertTrue(pred_grads[0] is None or not pred_grads[0].any())
        self.assertTrue(pred_grads[1].abs().sum() > 0)


class AugmentationTests(SimpleTestCase):

    def setUp(self):
        self.image = np.random.default_rng(0).integers(0, 256, size=(64, 64)).astype(np.float32)

    def test_identity_policy_is_exact(self):
        np.testing.assert_array_equal(strong_perturb(self.image, AugmentationPolicy.identity(), seed=3), self.image)

    def test_same_seed_same_perturbation(self):
        policy = AugmentationPolicy()
        np.testing.assert_array_equal(strong_perturb(self.image, policy, 9), strong_perturb(self.image, policy, 9))
        self.assertFalse(np.array_equal(strong_perturb(self.image, policy, 9), strong_perturb(self.image, policy, 10)))

    def test_blur_only_keeps_mean_and_range(self):
        policy = AugmentationPolicy(intensity_jitter=0.0, noise_sigma=0.0, erase_count=0)
        out = strong_perturb(self.image, policy, seed=1)
        self.assertAlmostEqual(float(out.mean()), float(self.image.mean()), delta=1.0)
        self.assertLess(out.std(), self.image.std())
        self.assertTrue((out >= 0).all() and (out <= 255).all())

    def test_invalid_policy(self):
        with self.assertRaises(ValueError):
            AugmentationPolicy(blur_sigma_range=(2.0, 1.0))
        with self.assertRaises(ValueError):
            AugmentationPolicy(intensity_jitter=1.5)


class ManifestTests(SimpleTestCase):

    def test_epochs_are_append_only(self):
        manifest = RunManifest(stage='fine')
        manifest.append_epoch(EpochRecord(stage='fine', epoch=0, phase=WARMUP))
        manifest.append_epoch(EpochRecord(stage='fine', epoch=1, phase=WARMUP))
        with self.assertRaises(ValueError):
            manifest.append_epoch(EpochRecord(stage='fine', epoch=1, phase=SELFTRAIN))

    def test_checkpoint_names_are_unique(self):
        manifest = RunManifest(stage='coarse')
        manifest.record_checkpoint('coarse', 'abc')
        with self.assertRaises(ValueError):
            manifest.record_checkpoint('coarse', 'def')

    def test_write_manifest_and_loss_table(self):
        manifest = RunManifest(stage='coarse', config={'seed': 1})
        manifest.append_epoch(EpochRecord(stage='coarse', epoch=0, phase='coarse', losses={'dice': 0.25}))
        with tempfile.TemporaryDirectory() as tmp:
            path = manifest.write(tmp, 'coarse')
            payload = json.loads(Path(path).read_text())
            rows = (Path(tmp) / 'coarse_losses.csv').read_text().splitlines()
        self.assertEqual(payload['epochs'][0]['losses'], {'dice': 0.25})
        self.assertEqual(rows[0], 'stage,epoch,phase,ts,ws,emb,pred,dice,total')
        self.assertEqual(rows[1], 'coarse,0,coarse,,,,,0.25,')


TINY = ModelConfig(image_size=(64, 64), patch_size=16, embed_dim=32, encoder_layers=1, attention_heads=2,
                   lora_rank=2)
SCENE = SceneParams(height=64, width=64)


class TrainerTests(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.frames = generate_target_frames(SCENE, 4, seed=3, noise_sigma=4.0)
        cls.pseudo = [frame.mask for frame in cls.frames]
        cls.schedule = ScheduleConfig(warmup_epochs=3, total_epochs=5, coarse_epochs=2, seed=1,
                                      learning_rate=1e-3, batch_size_train=2)

    def run_fine(self, **kwargs):
        return train_fine(self.frames, self.pseudo, model_config=TINY, schedule=self.schedule, **kwargs)

    def test_weights_switch_after_warmup(self):
        _, _, manifest = self.run_fine()
        phases = [record.phase for record in manifest.epochs]
        self.assertEqual(phases, [WARMUP] * 3 + [SELFTRAIN] * 2)
        self.assertEqual(manifest.epochs[2].weights, self.schedule.weights_warmup.as_dict())
        self.assertEqual(manifest.epochs[3].weights, self.schedule.weights_selftrain.as_dict())
        self.assertEqual([p['epoch'] for p in manifest.phases], [0, 3])

    def test_teacher_is_frozen_during_self_training(self):
        student, teacher, manifest = self.run_fine()
        self.assertEqual(manifest.epochs[3].teacher_digest, manifest.epochs[4].teacher_digest)
        self.assertNotEqual(manifest.epochs[3].student_digest, manifest.epochs[4].student_digest)
        self.assertEqual(manifest.epochs[3].teacher_adapter_grad_norm, 0.0)
        self.assertEqual(manifest.epochs[4].teacher_adapter_grad_norm, 0.0)
        self.assertGreater(manifest.epochs[0].teacher_adapter_grad_norm, 0.0)
        self.assertFalse(any(p.requires_grad for p in teacher.parameters()))
        self.assertIsNone(manifest.epochs[3].losses.get('ws'))
        self.assertIsNotNone(manifest.epochs[3].losses.get('ts'))

    def test_fine_stage_is_deterministic(self):
        _, _, first = self.run_fine()
        _, _, second = self.run_fine()
        self.assertEqual(first.to_json(), second.to_json())

    def test_phase_checkpoints_are_written(self):
        with tempfile.TemporaryDirectory() as tmp:
            _, _, manifest = self.run_fine(checkpoint_dir=tmp)
            written = sorted(p.name for p in Path(tmp).iterdir())
        self.assertEqual(written, ['student_final.ckpt', 'student_warmup.ckpt',
                                   'teacher_final.ckpt', 'teacher_warmup.ckpt'])
        self.assertEqual(set(manifest.checkpoints), {'student_final', 'student_warmup',
                                                     'teacher_final', 'teacher_warmup'})

    def test_all_empty_pseudo_labels_is_an_error(self):
        with self.assertRaises(EmptyDatasetError):
            train_fine(self.frames, [np.zeros_like(m) for m in self.pseudo], model_config=TINY,
                       schedule=self.schedule)

    def test_coarse_loss_decreases(self):
        source = generate_scenes(SCENE, 4, seed=2)
        schedule = ScheduleConfig(coarse_epochs=6, learning_rate=1e-3, batch_size_train=2, seed=0)
        model, manifest = train_coarse(source, TINY, schedule)
        dice = [record.losses['dice'] for record in manifest.epochs]
        self.assertEqual(len(dice), 6)
        self.assertLess(dice[-1], dice[0])
        self.assertEqual(model.config.decoder_kind, PLAIN_CONV_HEAD)
        self.assertIn('coarse', manifest.checkpoints)

    def test_evaluate_checkpoint_paths(self):
        model = build_segmenter(TINY, 'prompt_decoder', seed=0)
        end_to_end = evaluate_checkpoint(model, self.frames)
        prompted = evaluate_checkpoint(model, self.frames, PromptMode.BOX_POINT, point_count=3, seed=4)
        self.assertEqual(end_to_end.label, 'none')
        self.assertEqual(len(prompted.frames), 4)
        for report in (end_to_end, prompted):
            self.assertTrue(0.0 <= report.summary.iou <= 1.0)

    def test_nan_loss_aborts_with_partial_manifest(self):
        source = generate_scenes(SCENE, 2, seed=2)
        schedule = ScheduleConfig(coarse_epochs=1, batch_size_train=2, seed=0)
        with mock.patch('training.trainer.dice_loss', return_value=torch.tensor(float('nan'))):
            with self.assertRaises(TrainingAbortedError) as ctx:
                train_coarse(source, TINY, schedule)
        manifest = ctx.exception.manifest
        self.assertEqual(manifest.stage, 'coarse')
        self.assertEqual(manifest.epochs, [])
        self.assertEqual(len(manifest.failures), 1)
        self.assertEqual(manifest.failures[0]['error'], 'TrainingAbortedError')
        self.assertEqual(manifest.failures[0]['stage'], 'coarse')

    def test_nan_fine_loss_keeps_finished_epochs(self):
        calls = {'count': 0}
        real_total = total_loss

        def total_loss_failing_in_second_epoch(parts, weights):
            calls['count'] += 1
            if calls['count'] > 2:
                return torch.tensor(float('nan'))
            return real_total(parts, weights)

        with mock.patch('training.trainer.total_loss', side_effect=total_loss_failing_in_second_epoch):
            with self.assertRaises(TrainingAbortedError) as ctx:
                self.run_fine()
        manifest = ctx.exception.manifest
        self.assertEqual([record.epoch for record in manifest.epochs], [0])
        self.assertEqual((manifest.failures[0]['epoch'], manifest.failures[0]['step']), (1, 0))

    def test_nan_loss_part_is_recorded_with_its_position(self):
        with mock.patch('training.trainer.ws_loss', return_value=torch.tensor(float('nan'))):
            with self.assertRaises(TrainingAbortedError) as ctx:
                self.run_fine()
        failure = ctx.exception.manifest.failures[0]
        self.assertEqual(failure['part'], 'ws')
        self.assertEqual((failure['stage'], failure['epoch'], failure['step']), ('fine', 0, 0))

    def test_fine_pair_shares_no_storage(self):
        coarse = build_segmenter(TINY, PLAIN_CONV_HEAD, seed=0)
        teacher, student = init_fine_pair(coarse, None, self.schedule)

        def storage(model):
            tensors = list(model.parameters()) + list(model.buffers())
            return {tensor.data_ptr() for tensor in tensors if tensor.numel()}

        self.assertFalse(storage(teacher) & storage(student))
        self.assertFalse(storage(teacher) & storage(coarse))

    def test_student_step_leaves_frozen_teacher_untouched(self):
        coarse = build_segmenter(TINY, PLAIN_CONV_HEAD, seed=0)
        teacher, student = init_fine_pair(coarse, None, self.schedule)
        freeze_model(teacher)
        teacher.eval()
        before = {name: value.detach().clone() for name, value in teacher.state_dict().items()}
        student_before = [p.detach().clone() for p in trainable_parameters(student)]

        images = np.stack([frame.image for frame in self.frames[:2]]).astype(np.float32)
        x = torch.from_numpy(images)
        y_p = torch.from_numpy(np.stack(self.pseudo[:2])).to(torch.float32)
        prompts = [frame_prompts(self.pseudo[i], self.schedule.teacher_prompt_mode, self.schedule.point_count,
                                 [0, i]) for i in range(2)]
        optimizer = torch.optim.Adam(trainable_parameters(student), lr=1e-2)
        _, loss = _fine_step(student, teacher, x, x.clone(), y_p, prompts, self.schedule.weights_selftrain,
                             CONFIG, warmup=False)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        for name, value in teacher.state_dict().items():
            self.assertTrue(torch.equal(value, before[name]), name)
        self.assertTrue(all(p.grad is None for p in teacher.parameters()))
        self.assertTrue(any(not torch.equal(p, q) for p, q in zip(trainable_parameters(student), student_before)))

    def test_supervised_student_records_its_stage(self):
        schedule = ScheduleConfig(warmup_epochs=1, total_epochs=2, seed=1, learning_rate=1e-3, batch_size_train=2)
        _, manifest = train_supervised_student(self.frames, TINY, schedule, stage='real_supervised')
        self.assertEqual(manifest.stage, 'real_supervised')
        self.assertEqual([record.stage for record in manifest.epochs], ['real_supervised'] * 2)
        with self.assertRaises(ValueError):
            train_supervised_student(self.frames, TINY, schedule, stage='upper_bound')


class RunRegistryTests(TestCase):

    def test_record_run_indexes_epochs(self):
        manifest = RunManifest(stage='fine', config={'seed': 3})
        manifest.append_epoch(EpochRecord(stage='fine', epoch=0, phase=WARMUP, losses={'total': 1.0},
                                          teacher_digest='a' * 64, student_digest='b' * 64))
        manifest.append_epoch(EpochRecord(stage='fine', epoch=1, phase=SELFTRAIN, losses={'total': 0.5}))
        run = record_run(manifest, '/tmp/run', seed=3)

        self.assertEqual(TrainingRun.objects.count(), 1)
        self.assertEqual(run.manifest_digest, manifest.digest())
        self.assertEqual(EpochLog.objects.filter(run=run).count(), 2)
        self.assertEqual(run.final_epoch.phase, SELFTRAIN)
        self.assertIn('Fine Stage', str(run))

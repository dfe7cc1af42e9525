import json
import tempfile
from io import StringIO
from pathlib import Path
from unittest import mock, skipUnless

import numpy as np
import torch
import yaml
from django.conf import settings
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, TestCase
from scipy import ndimage

from guidewire_platform.exceptions import (
    BenchmarkFailedError, ConfigError, DatasetError, OutputLockedError, TrainingAbortedError,
)
from simulation.compositing import build_background_pool
from simulation.scenes import DomainTag, Sample, SceneParams, generate_scenes
from training.models import TrainingRun

from .cli import cli
from .commands import ERROR_RECORD, LOCK_NAME, OutputLock, PipelineCommand
from .config import RunConfig, dump_config, load_config, parse_config
from .datasets import export_pool, ingest_dataset, load_dataset, load_pool, write_dataset, write_image
from .stages import (
    COARSE_CHECKPOINT, enforce_checks, run_composite, run_eval, run_pool, run_pseudo_label, run_synth,
    run_train_coarse,
)

TINY_RUN = {
    'seed': 3,
    'scene': {'height': 64, 'width': 64},
    'synthesis': {'scene_count': 4, 'pool_size': 3, 'synthesized_count': 6},
    'cluster': {'min_cluster_size': 5},
    'model': {'image_size': [64, 64], 'patch_size': 16, 'embed_dim': 32, 'encoder_layers': 1,
              'attention_heads': 2, 'lora_rank': 2},
    'schedule': {'coarse_epochs': 1, 'warmup_epochs': 1, 'total_epochs': 2, 'batch_size_train': 2,
                 'batch_size_eval': 4},
    'benchmark': {'target_train_count': 4, 'target_eval_count': 2},
}


def write_config(directory, raw=TINY_RUN):
    path = Path(directory) / 'run.yaml'
    path.write_text(yaml.safe_dump(raw), encoding='utf-8')
    return path


class ConfigTests(SimpleTestCase):

    def test_empty_config_takes_defaults(self):
        config = parse_config({})
        self.assertEqual(config, RunConfig())
        self.assertEqual(config.schedule.learning_rate, 1e-4)
        self.assertEqual(config.schedule.batch_size_train, 2)
        self.assertEqual(config.schedule.warmup_epochs, 3)
        self.assertEqual(config.loss.tau, 0.3)
        self.assertEqual(config.loss.focal_exponent, 2.0)
        self.assertEqual(config.schedule.weights_selftrain.alpha, 5.0)

    def test_unknown_keys_are_reported_with_their_path(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_config({'schedule': {'warmup_epoch': 2}, 'extras': 1})
        self.assertIn('schedule.warmup_epoch: unknown key', ctx.exception.diagnostics)
        self.assertIn('extras: unknown key', ctx.exception.diagnostics)

    def test_invalid_values_are_reported(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_config({'schedule': {'warmup_epochs': 5, 'total_epochs': 5}, 'loss': {'tau': -1}})
        diagnostics = ' '.join(ctx.exception.diagnostics)
        self.assertIn('schedule:', diagnostics)
        self.assertIn('loss.tau', diagnostics)

    def test_image_size_must_match_scene(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_config({'scene': {'height': 128, 'width': 128}})
        self.assertIn('model.image_size: must equal [scene.height, scene.width]', ctx.exception.diagnostics)

    def test_nested_weights(self):
        config = parse_config({'schedule': {'weights_warmup': {'gamma': 0.0}}})
        self.assertEqual(config.schedule.weights_warmup.gamma, 0.0)
        self.assertEqual(config.schedule.weights_warmup.beta, 1.0)

    def test_dump_and_reload(self):
        config = parse_config(TINY_RUN)
        with tempfile.TemporaryDirectory() as tmp:
            reloaded = load_config(dump_config(config, Path(tmp) / 'effective.yaml'))
        self.assertEqual(reloaded, config)
        self.assertEqual(reloaded.digest(), config.digest())

    def test_seed_override_reaches_every_stream(self):
        config = parse_config(TINY_RUN).with_seed(11)
        self.assertEqual((config.seed, config.scene.seed, config.schedule.seed), (11, 11, 11))
        self.assertNotEqual(config.seeds, parse_config(TINY_RUN).seeds)

    def test_desk_config_is_valid(self):
        config = load_config(Path(settings.BASE_DIR) / 'configs' / 'desk.yaml')
        self.assertEqual(config.model.image_size, (config.scene.height, config.scene.width))

    def test_missing_or_broken_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(ConfigError):
                load_config(Path(tmp) / 'absent.yaml')
            broken = Path(tmp) / 'broken.yaml'
            broken.write_text('schedule: [unclosed', encoding='utf-8')
            with self.assertRaises(ConfigError):
                load_config(broken)


class DatasetTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        rng = np.random.default_rng(0)
        self.samples = [
            Sample(image=rng.integers(0, 256, size=(32, 32)), mask=rng.integers(0, 2, size=(32, 32)),
                   name=f'frame_{i:02d}')
            for i in range(10)
        ]

    def tearDown(self):
        self.tmp.cleanup()

    def test_ingest_images_with_masks(self):
        write_dataset(self.samples, self.root)
        samples, errors = ingest_dataset(self.root, DomainTag.TARGET)
        self.assertEqual(errors, [])
        self.assertEqual([s.name for s in samples], [s.name for s in self.samples])
        for loaded, original in zip(samples, self.samples):
            np.testing.assert_array_equal(loaded.image, original.image)
            np.testing.assert_array_equal(loaded.mask, original.mask)
            self.assertEqual(loaded.domain_tag, DomainTag.TARGET)

    def test_ingest_without_masks(self):
        write_dataset([Sample(image=s.image, name=s.name) for s in self.samples], self.root)
        samples, errors = ingest_dataset(self.root)
        self.assertEqual(len(samples), 10)
        self.assertFalse(any(s.has_mask for s in samples))
        with self.assertRaises(DatasetError):
            load_dataset(self.root, require_masks=True)

    def test_bad_files_are_reported_and_the_rest_loads(self):
        write_dataset(self.samples, self.root)
        write_image(np.zeros((16, 16)), self.root / 'masks' / 'frame_03.png')
        write_image(np.zeros((32, 32)), self.root / 'masks' / 'orphan.png')
        samples, errors = ingest_dataset(self.root)
        self.assertEqual(len(samples), 9)
        self.assertEqual(sorted(e['file'] for e in errors), ['frame_03.png', 'orphan.png'])
        self.assertIn('OrphanMask', [e['error'] for e in errors])
        with self.assertRaises(DatasetError):
            load_dataset(self.root)

    def test_missing_images_directory(self):
        with self.assertRaises(DatasetError):
            ingest_dataset(self.root / 'nowhere')

    def test_pool_export_and_reload(self):
        pool = build_background_pool([s.image.astype(np.uint8) for s in self.samples], (16, 16), K=4,
                                     seed=1, names=[s.name for s in self.samples])
        export_pool(pool, self.root)
        reloaded = load_pool(self.root)
        self.assertEqual(reloaded.provenance, pool.provenance)
        for a, b in zip(reloaded.patches, pool.patches):
            np.testing.assert_array_equal(a, b)


def wire_contrast(image, mask):
    """Mean intensity under ``mask`` over the mean of a 3-pixel ring around it."""
    mask = np.asarray(mask, dtype=bool)
    ring = ndimage.binary_dilation(mask, iterations=3) & ~mask
    return float(image[mask].mean() / image[ring].mean())


class BackgroundPoolStageTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.out = Path(self.tmp.name)
        self.config = parse_config(TINY_RUN)

    def tearDown(self):
        self.tmp.cleanup()

    def test_pool_needs_no_target_frames(self):
        self.assertEqual(run_pool(self.config, self.out), {'pool': 3})
        pool = load_pool(self.out)
        self.assertTrue(all(name.startswith('vessel_') for name in pool.provenance))
        self.assertTrue(all(patch.shape == (64, 64) for patch in pool.patches))

    def test_pool_patches_are_not_target_frames(self):
        run_synth(self.config, self.out, 'target')
        run_pool(self.config, self.out)
        targets = load_dataset(self.out / 'target', DomainTag.TARGET)
        for patch in load_pool(self.out).patches:
            for frame in targets:
                self.assertFalse(np.array_equal(patch, frame.image))

    def test_pool_patches_hold_no_dark_wire(self):
        run_synth(self.config, self.out, 'target')
        run_pool(self.config, self.out)
        masks = [scene.mask for scene in generate_scenes(SceneParams(height=64, width=64), 4, seed=0)]
        for patch in load_pool(self.out).patches:
            for mask in masks:
                self.assertGreaterEqual(wire_contrast(patch.astype(np.float64), mask), 0.8)
        # the same measure does flag a wire-bearing target frame
        for frame in load_dataset(self.out / 'target', DomainTag.TARGET, require_masks=True):
            self.assertLess(wire_contrast(frame.image.astype(np.float64), frame.mask), 0.8)

    def test_configured_backgrounds_are_cropped(self):
        rng = np.random.default_rng(4)
        backgrounds = self.out / 'backgrounds'
        write_dataset([Sample(image=rng.integers(100, 200, size=(80, 80)), name=f'plate_{i}') for i in range(2)],
                      backgrounds)
        config = parse_config({**TINY_RUN, 'paths': {'backgrounds': str(backgrounds)}})
        run_pool(config, self.out)
        pool = load_pool(self.out)
        self.assertEqual([name.split('@')[0] for name in pool.provenance], ['plate_0', 'plate_1', 'plate_0'])
        self.assertTrue(all(patch.shape == (64, 64) for patch in pool.patches))

    def test_empty_backgrounds_directory(self):
        (self.out / 'backgrounds' / 'images').mkdir(parents=True)
        config = parse_config({**TINY_RUN, 'paths': {'backgrounds': str(self.out / 'backgrounds')}})
        with self.assertRaises(DatasetError):
            run_pool(config, self.out)


class CommandTests(SimpleTestCase):

    def test_missing_config_is_a_usage_error(self):
        self.assertEqual(cli(['synth']), 2)

    def test_stage_error_writes_error_record(self):
        with tempfile.TemporaryDirectory() as tmp:
            code = cli(['synth', '--config', str(Path(tmp) / 'absent.yaml'), '--out', tmp])
            record = json.loads((Path(tmp) / ERROR_RECORD).read_text())
        self.assertEqual(code, 1)
        self.assertEqual(record['stage'], 'synth')
        self.assertEqual(record['error'], 'ConfigError')

    def test_synth_command_writes_dataset_and_effective_config(self):
        with tempfile.TemporaryDirectory() as tmp:
            stdout = StringIO()
            call_command('synth', config=str(write_config(tmp)), out=tmp, seed=5, stdout=stdout)
            effective = yaml.safe_load((Path(tmp) / 'effective_config.yaml').read_text())
            images = sorted(p.name for p in (Path(tmp) / 'source' / 'images').iterdir())
            lock_left = (Path(tmp) / LOCK_NAME).exists()
        self.assertEqual(effective['seed'], 5)
        self.assertEqual(images, [f'source_{i:04d}.png' for i in range(4)])
        self.assertFalse(lock_left)
        self.assertIn('synth finished', stdout.getvalue())

    def test_output_lock_is_exclusive(self):
        with tempfile.TemporaryDirectory() as tmp:
            with OutputLock(tmp):
                with self.assertRaises(OutputLockedError):
                    with OutputLock(tmp):
                        pass
            self.assertFalse((Path(tmp) / LOCK_NAME).exists())

    def test_unexpected_error_writes_error_record(self):
        class FailingCommand(PipelineCommand):
            stage = 'failing'

            def run_stage(self, config, out, options):
                raise RuntimeError('disk on fire')

        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(CommandError):
                call_command(FailingCommand(), config=str(write_config(tmp)), out=tmp, stdout=StringIO())
            record = json.loads((Path(tmp) / ERROR_RECORD).read_text())
            lock_left = (Path(tmp) / LOCK_NAME).exists()
        self.assertEqual(record['stage'], 'failing')
        self.assertEqual(record['error'], 'RuntimeError')
        self.assertEqual(record['message'], 'disk on fire')
        self.assertFalse(lock_left)


class BenchmarkCheckTests(SimpleTestCase):

    def test_passing_and_skipped_checks(self):
        enforce_checks({
            'adapted_beats_direct': {'value': 0.6, 'reference': 0.4, 'margin': 0.05, 'passed': True},
            'selftraining_improves': {'passed': None, 'reason': 'no warm-up phase'},
        })

    def test_failed_check_raises_with_its_record(self):
        failed = {'value': 0.3, 'reference': 0.4, 'margin': 0.0, 'passed': False}
        with self.assertRaises(BenchmarkFailedError) as ctx:
            enforce_checks({
                'beats_pseudo_supervised': failed,
                'adapted_beats_direct': {'value': 0.6, 'reference': 0.4, 'margin': 0.05, 'passed': True},
            })
        self.assertIn('beats_pseudo_supervised', str(ctx.exception))
        self.assertEqual(ctx.exception.details, {'beats_pseudo_supervised': failed})


class StagePipelineTests(TestCase):

    def test_stages_through_pseudo_labels(self):
        config = parse_config(TINY_RUN)
        with tempfile.TemporaryDirectory() as tmp:
            out = Path(tmp)
            self.assertEqual(run_synth(config, out, 'target'), {'target': 4, 'target_eval': 2})
            self.assertEqual(run_synth(config, out), {'source': 4})
            self.assertEqual(run_pool(config, out), {'pool': 3})
            self.assertEqual(run_composite(config, out), {'synthesized': 6})

            coarse = run_train_coarse(config, out)
            self.assertTrue((out / 'checkpoints' / COARSE_CHECKPOINT).is_file())
            self.assertTrue((out / 'coarse_manifest.json').is_file())
            self.assertEqual(len(coarse['checkpoint']), 64)

            labelled = run_pseudo_label(config, out)
            self.assertEqual(labelled['labels'], 4)
            self.assertEqual(len(list((out / 'pseudo_masks').iterdir())), 4)

            report = run_eval(config, out, checkpoint=out / 'checkpoints' / COARSE_CHECKPOINT,
                              prompt_mode='none', label='coarse')
            self.assertEqual(len(report.frames), 2)
            self.assertTrue((out / 'eval' / 'coarse.json').is_file())

    def test_stages_are_reproducible(self):
        config = parse_config(TINY_RUN)
        with tempfile.TemporaryDirectory() as first, tempfile.TemporaryDirectory() as second:
            for out in (first, second):
                run_synth(config, out)
                run_synth(config, out, 'target')
                run_pool(config, out)
                run_composite(config, out)
            a = sorted((Path(first) / 'synthesized' / 'images').iterdir())
            b = sorted((Path(second) / 'synthesized' / 'images').iterdir())
            self.assertEqual([p.read_bytes() for p in a], [p.read_bytes() for p in b])

    def test_aborted_training_leaves_manifest_and_registry_row(self):
        config = parse_config(TINY_RUN)
        with tempfile.TemporaryDirectory() as tmp:
            out = Path(tmp)
            run_synth(config, out)
            run_pool(config, out)
            run_composite(config, out)
            with mock.patch('training.trainer.dice_loss', return_value=torch.tensor(float('nan'))):
                with self.assertRaises(TrainingAbortedError):
                    run_train_coarse(config, out)
            manifest = json.loads((out / 'coarse_manifest.json').read_text())
            checkpoint_written = (out / 'checkpoints' / COARSE_CHECKPOINT).exists()
        self.assertFalse(checkpoint_written)
        self.assertEqual(len(manifest['failures']), 1)
        self.assertEqual(manifest['failures'][0]['error'], 'TrainingAbortedError')
        self.assertEqual((manifest['failures'][0]['epoch'], manifest['failures'][0]['step']), (0, 0))
        run = TrainingRun.objects.get(stage='coarse')
        self.assertEqual(run.status, 'aborted')
        self.assertEqual(run.manifest['failures'][0]['message'], manifest['failures'][0]['message'])


@skipUnless(settings.GUIDEWIRE_RUN_BENCH, 'set GUIDEWIRE_RUN_BENCH=True to run the desk benchmark')
class DeskBenchmarkTests(TestCase):

    def test_bench_summary(self):
        with tempfile.TemporaryDirectory() as tmp:
            call_command('bench', config=str(Path(settings.BASE_DIR) / 'configs' / 'desk.yaml'), out=tmp,
                         stdout=StringIO())
            summary = json.loads((Path(tmp) / 'bench_summary.json').read_text())
        self.assertEqual(set(summary['checks']), {
            'adapted_beats_direct', 'selftraining_improves', 'beats_pseudo_supervised',
            'prompted_close_to_end2end',
        })
        self.assertIn('real_supervised', summary['iou'])
        for value in summary['iou'].values():
            if value is not None:
                self.assertTrue(0.0 <= value <= 1.0)
        for name, check in summary['checks'].items():
            if name == 'selftraining_improves' and summary['iou']['student_warmup_end2end'] is None:
                self.assertIsNone(check['passed'])
            else:
                self.assertTrue(check['passed'], name)

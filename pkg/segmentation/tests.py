import json
import tempfile
from pathlib import Path

import numpy as np
import torch
from django.test import SimpleTestCase

from guidewire_platform.exceptions import (
    CheckpointError, DecoderKindError, InsufficientPixelsError, LoRAError, NoForegroundError,
    PromptBoundsError, ShapeMismatchError,
)

from .checkpoints import (
    checkpoint_digest, deserialize_checkpoint, load_checkpoint, save_checkpoint, serialize_checkpoint,
)
from .lora import (
    LoRALinear, attach_lora, freeze_adapters, has_lora, lora_modules, merge_lora, trainable_parameters,
)
from .networks import PLAIN_CONV_HEAD, ModelConfig, PromptableSegmenter, binarize
from .prompts import Box, PromptMode, PromptSet, box_prompt, dump_prompts, make_prompts, point_prompts

TINY = ModelConfig(image_size=(32, 32), patch_size=8, embed_dim=16, encoder_layers=1, attention_heads=2,
                   lora_rank=2)


def tiny_model(decoder_kind=None, seed=0):
    torch.manual_seed(seed)
    config = TINY if decoder_kind is None else ModelConfig(**{**TINY.to_dict(), 'decoder_kind': decoder_kind})
    return PromptableSegmenter(config)


def random_images(count=2, seed=0):
    return torch.from_numpy(np.random.default_rng(seed).uniform(0, 255, size=(count, 32, 32)).astype(np.float32))


def wire_mask():
    mask = np.zeros((32, 32), dtype=np.uint8)
    mask[10:13, 4:28] = 1
    return mask


class ModelConfigTests(SimpleTestCase):

    def test_patch_must_be_power_of_two(self):
        with self.assertRaises(ShapeMismatchError):
            ModelConfig(image_size=(48, 48), patch_size=12)

    def test_image_must_tile_into_patches(self):
        with self.assertRaises(ShapeMismatchError):
            ModelConfig(image_size=(36, 32), patch_size=8)

    def test_dict_round_trip(self):
        self.assertEqual(ModelConfig.from_dict(TINY.to_dict()), TINY)
        self.assertEqual(TINY.grid_shape, (4, 4))


class SegmenterTests(SimpleTestCase):

    def test_encoder_output_shape(self):
        model = tiny_model()
        self.assertEqual(tuple(model.encode_image(random_images()).shape), (2, 4, 4, 16))
        self.assertEqual(tuple(model.encode_image(random_images(1)[0]).shape), (4, 4, 16))

    def test_end_to_end_and_plain_head_logits_are_full_resolution(self):
        images = random_images()
        self.assertEqual(tuple(tiny_model().segment(images).shape), (2, 32, 32))
        self.assertEqual(tuple(tiny_model(PLAIN_CONV_HEAD).segment(images).shape), (2, 32, 32))

    def test_wrong_image_size_is_rejected(self):
        with self.assertRaises(ShapeMismatchError):
            tiny_model().encode_image(torch.zeros(1, 16, 16))

    def test_plain_head_refuses_prompts(self):
        model = tiny_model(PLAIN_CONV_HEAD)
        with self.assertRaises(DecoderKindError):
            model.encode_prompts(PromptSet(boxes=[(0, 0, 3, 3)]))
        with self.assertRaises(DecoderKindError):
            model.segment(random_images(1), [PromptSet(boxes=[(0, 0, 3, 3)])])

    def test_prompt_token_counts(self):
        model = tiny_model()
        mask = wire_mask()
        self.assertEqual(tuple(model.encode_prompts(PromptSet()).shape), (1, 16))
        self.assertEqual(tuple(model.encode_prompts(make_prompts(mask, 'box')).shape), (2, 16))
        prompts = make_prompts(mask, PromptMode.BOX_POINT, n=3, seed=1)
        self.assertEqual(prompts.token_count, 2 + 6)
        self.assertEqual(tuple(model.encode_prompts(prompts).shape), (8, 16))

    def test_out_of_bounds_prompt_is_rejected(self):
        with self.assertRaises(PromptBoundsError):
            tiny_model().encode_prompts(PromptSet(points=[(40, 2, True)]))

    def test_point_order_does_not_change_the_mask(self):
        model = tiny_model()
        z = model.encode_image(random_images(1))
        prompts = point_prompts(wire_mask(), 4, seed=3)
        reversed_prompts = PromptSet(points=tuple(reversed(prompts.points)))
        with torch.no_grad():
            a = model.decode_mask(z, model.encode_prompts(prompts))
            b = model.decode_mask(z, model.encode_prompts(reversed_prompts))
        self.assertTrue(torch.allclose(a, b, atol=1e-5))

    def test_prompts_change_the_prediction(self):
        model = tiny_model()
        images = random_images(1)
        with torch.no_grad():
            plain = model.segment(images)
            boxed = model.segment(images, [make_prompts(wire_mask(), 'box')])
        self.assertFalse(torch.equal(plain, boxed))

    def test_binarize_threshold(self):
        logits = torch.tensor([-1.0, 0.0, 1.0])
        self.assertEqual(binarize(logits).tolist(), [0, 1, 1])
        self.assertEqual(binarize(logits, 0.7).tolist(), [0, 0, 1])
        self.assertEqual(binarize(logits).dtype, torch.uint8)


class LoRATests(SimpleTestCase):

    def test_fresh_adapters_change_no_output_bit(self):
        model = tiny_model()
        images = random_images()
        with torch.no_grad():
            before = model.segment(images)
            attach_lora(model)
            after = model.segment(images)
        self.assertTrue(torch.equal(before, after))

    def test_delta_rank_is_bounded(self):
        model = attach_lora(tiny_model(), rank=2)
        for adapter in lora_modules(model):
            with torch.no_grad():
                adapter.lora_B.normal_()
            singular = torch.linalg.svdvals(adapter.delta_weight().detach().double())
            self.assertTrue((singular[2:] < 1e-5 * singular[0]).all())

    def test_attaching_twice_fails(self):
        model = attach_lora(tiny_model())
        with self.assertRaises(LoRAError):
            attach_lora(model)

    def test_zero_rank_adapter_is_rejected(self):
        with self.assertRaises(LoRAError):
            LoRALinear(torch.nn.Linear(4, 4), rank=0, scale=1.0)

    def test_only_adapters_train_inside_the_encoder(self):
        model = attach_lora(tiny_model())
        for name, parameter in model.named_parameters():
            if name.startswith('image_encoder.'):
                self.assertEqual(parameter.requires_grad, 'lora_' in name, name)
            else:
                self.assertTrue(parameter.requires_grad, name)

    def test_tune_base_encoder_keeps_encoder_trainable(self):
        torch.manual_seed(0)
        model = attach_lora(PromptableSegmenter(ModelConfig(**{**TINY.to_dict(), 'tune_base_encoder': True})))
        self.assertTrue(all(p.requires_grad for p in model.image_encoder.parameters()))

    def test_freeze_adapters(self):
        model = freeze_adapters(attach_lora(tiny_model()))
        for adapter in lora_modules(model):
            self.assertFalse(adapter.lora_A.requires_grad)
            self.assertFalse(adapter.lora_B.requires_grad)
        self.assertTrue(trainable_parameters(model))

    def test_merge_preserves_outputs(self):
        model = attach_lora(tiny_model())
        for adapter in lora_modules(model):
            with torch.no_grad():
                adapter.lora_B.normal_(std=0.05)
        images = random_images()
        with torch.no_grad():
            before = model.segment(images)
            merge_lora(model)
            after = model.segment(images)
        self.assertFalse(has_lora(model))
        self.assertTrue(torch.allclose(before, after, atol=1e-4))

    def test_effective_weight(self):
        adapter = LoRALinear(torch.nn.Linear(6, 5), rank=2, scale=4.0)
        with torch.no_grad():
            adapter.lora_B.normal_()
        expected = adapter.base.weight + 2.0 * adapter.lora_B @ adapter.lora_A
        self.assertTrue(torch.allclose(adapter.effective_weight(), expected))


class CheckpointTests(SimpleTestCase):

    def test_round_trip_is_byte_identical(self):
        model = attach_lora(tiny_model())
        with torch.no_grad():
            lora_modules(model)[0].lora_B.normal_()
        blob = serialize_checkpoint(model, {'stage': 'test'})
        restored, extra = deserialize_checkpoint(blob)
        self.assertEqual(extra, {'stage': 'test'})
        self.assertEqual(serialize_checkpoint(restored, {'stage': 'test'}), blob)
        images = random_images()
        with torch.no_grad():
            self.assertTrue(torch.equal(model.segment(images), restored.segment(images)))

    def test_trainable_flags_survive(self):
        model = freeze_adapters(attach_lora(tiny_model()))
        restored, _ = deserialize_checkpoint(serialize_checkpoint(model))
        flags = {name: p.requires_grad for name, p in model.named_parameters()}
        self.assertEqual({name: p.requires_grad for name, p in restored.named_parameters()}, flags)

    def test_save_load_and_digest(self):
        model = attach_lora(tiny_model(PLAIN_CONV_HEAD))
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'nested' / 'model.ckpt'
            digest = save_checkpoint(model, path)
            self.assertEqual(digest, checkpoint_digest(model))
            restored, _ = load_checkpoint(path)
            self.assertEqual(restored.config.decoder_kind, PLAIN_CONV_HEAD)
            self.assertEqual(checkpoint_digest(restored), digest)

    def test_bad_archives_are_rejected(self):
        with self.assertRaises(CheckpointError):
            deserialize_checkpoint(b'NOTACKPT' + b'\x00' * 16)
        blob = serialize_checkpoint(tiny_model())
        with self.assertRaises(CheckpointError):
            deserialize_checkpoint(blob[:-8])
        with self.assertRaises(CheckpointError):
            load_checkpoint('/nonexistent/model.ckpt')


class PromptTests(SimpleTestCase):

    def test_box_matches_brute_force_bounds(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            mask = (rng.random((16, 20)) < rng.uniform(0.02, 0.3)).astype(np.uint8)
            if not mask.any():
                continue
            rows = [r for r in range(16) for c in range(20) if mask[r, c]]
            cols = [c for r in range(16) for c in range(20) if mask[r, c]]
            self.assertEqual(box_prompt(mask), Box(min(rows), min(cols), max(rows), max(cols)))

    def test_point_draws_have_exact_counts_and_polarity(self):
        rng = np.random.default_rng(1)
        for draw in range(1000):
            mask = (rng.random((12, 12)) < 0.3).astype(np.uint8)
            if mask.sum() < 5 or (1 - mask).sum() < 5:
                continue
            prompts = point_prompts(mask, 5, seed=draw)
            positives = [p for p in prompts.points if p.positive]
            negatives = [p for p in prompts.points if not p.positive]
            self.assertEqual((len(positives), len(negatives)), (5, 5))
            self.assertTrue(all(mask[p.row, p.col] == 1 for p in positives))
            self.assertTrue(all(mask[p.row, p.col] == 0 for p in negatives))
            self.assertEqual(len({(p.row, p.col) for p in prompts.points}), 10)

    def test_points_are_seeded(self):
        self.assertEqual(point_prompts(wire_mask(), 5, seed=4), point_prompts(wire_mask(), 5, seed=4))

    def test_empty_mask_has_no_box(self):
        with self.assertRaises(NoForegroundError):
            box_prompt(np.zeros((8, 8)))

    def test_too_few_pixels_for_points(self):
        mask = np.zeros((8, 8), dtype=np.uint8)
        mask[0, :3] = 1
        with self.assertRaises(InsufficientPixelsError):
            point_prompts(mask, 5, seed=0)

    def test_wrong_polarity_is_rejected(self):
        with self.assertRaises(PromptBoundsError):
            PromptSet.for_mask(wire_mask(), points=[(0, 0, True)])

    def test_none_mode_is_empty(self):
        prompts = make_prompts(wire_mask(), 'none')
        self.assertTrue(prompts.is_empty)
        self.assertEqual(prompts.token_count, 0)

    def test_dump_prompts(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'prompts.json'
            dump_prompts({'frame_b': make_prompts(wire_mask(), 'box'), 'frame_a': PromptSet()}, path)
            payload = json.loads(path.read_text())
        self.assertEqual(list(payload), ['frame_a', 'frame_b'])
        self.assertEqual(payload['frame_b']['boxes'], [[10, 4, 12, 27]])

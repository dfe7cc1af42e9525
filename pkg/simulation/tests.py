from collections import deque

import numpy as np
from django.test import SimpleTestCase

from guidewire_platform.exceptions import EmptyPoolError, InvalidSampleError, SceneError, ShapeMismatchError

from .compositing import build_background_pool, composite, synthesize_dataset
from .scenes import (
    DomainTag, NoiseParams, Sample, SceneParams, generate_guidewire_scene, generate_scenes,
    generate_target_frame, generate_vessel_background, generate_vessel_backgrounds, rasterize_curve,
)


def flood_fill_components(mask):
    """Count 8-connected foreground components with a plain BFS."""
    seen = np.zeros(mask.shape, dtype=bool)
    height, width = mask.shape
    components = 0
    for start in zip(*np.nonzero(mask)):
        if seen[start]:
            continue
        components += 1
        queue = deque([start])
        seen[start] = True
        while queue:
            r, c = queue.popleft()
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    nr, nc = r + dr, c + dc
                    if 0 <= nr < height and 0 <= nc < width and mask[nr, nc] and not seen[nr, nc]:
                        seen[nr, nc] = True
                        queue.append((nr, nc))
    return components


class SceneGenerationTests(SimpleTestCase):

    def test_same_seed_gives_identical_scene(self):
        first = generate_guidewire_scene(SceneParams(seed=11, height=64, width=64))
        second = generate_guidewire_scene(SceneParams(seed=11, height=64, width=64))
        np.testing.assert_array_equal(first.image, second.image)
        np.testing.assert_array_equal(first.mask, second.mask)

    def test_mask_is_binary_and_single_component(self):
        for seed in range(10):
            scene = generate_guidewire_scene(SceneParams(seed=seed, height=96, width=96))
            self.assertEqual(scene.shape, (96, 96))
            self.assertTrue(set(np.unique(scene.mask)) <= {0, 1})
            self.assertGreater(scene.mask.sum(), 0)
            self.assertEqual(flood_fill_components(scene.mask), 1, f'seed {seed}')
            self.assertEqual(scene.domain_tag, DomainTag.SOURCE)

    def test_wire_pixels_are_darker_than_background(self):
        scene = generate_guidewire_scene(SceneParams(seed=4, height=64, width=64))
        self.assertLess(scene.image[scene.mask == 1].mean(), scene.image[scene.mask == 0].mean())

    def test_straight_line_rasterization(self):
        mask = rasterize_curve([(32, 10), (32, 50)], (64, 64), width_px=1.0)
        self.assertTrue(mask[32, 10:51].all())
        self.assertEqual(int(mask.sum()), 41)

    def test_wider_stroke_covers_neighbouring_rows(self):
        mask = rasterize_curve([(32, 10), (32, 50)], (64, 64), width_px=3.0)
        self.assertTrue(mask[31:34, 12:49].all())
        self.assertFalse(mask[29].any())

    def test_scene_smaller_than_minimum_is_rejected(self):
        with self.assertRaises(SceneError):
            generate_guidewire_scene(SceneParams(height=32, width=32))

    def test_invalid_scene_params(self):
        with self.assertRaises(SceneError):
            SceneParams(control_point_count=3)
        with self.assertRaises(SceneError):
            SceneParams(wire_intensity=100, background_intensity=100)

    def test_generate_scenes_names_and_distinct_content(self):
        scenes = generate_scenes(SceneParams(height=64, width=64), 3, seed=5)
        self.assertEqual([s.name for s in scenes], ['source_0000', 'source_0001', 'source_0002'])
        self.assertFalse(np.array_equal(scenes[0].mask, scenes[1].mask))

    def test_target_frame_attenuates_vessel_background(self):
        frame = generate_target_frame(SceneParams(height=64, width=64), seed=9, noise_sigma=0.0)
        self.assertEqual(frame.domain_tag, DomainTag.TARGET)
        self.assertEqual(flood_fill_components(frame.mask), 1)
        self.assertLess(frame.image[frame.mask == 1].mean(), frame.image[frame.mask == 0].mean())

    def test_vessel_background_is_deterministic(self):
        a = generate_vessel_background(64, 64, seed=2)
        b = generate_vessel_background(64, 64, seed=2)
        np.testing.assert_array_equal(a, b)
        self.assertEqual(a.dtype, np.uint8)

    def test_vessel_backgrounds_carry_no_mask(self):
        frames = generate_vessel_backgrounds(SceneParams(height=64, width=64), 3, seed=4)
        self.assertEqual([frame.name for frame in frames], ['vessel_0000', 'vessel_0001', 'vessel_0002'])
        self.assertFalse(any(frame.has_mask for frame in frames))
        again = generate_vessel_backgrounds(SceneParams(height=64, width=64), 3, seed=4)
        for a, b in zip(frames, again):
            np.testing.assert_array_equal(a.image, b.image)


class SampleTests(SimpleTestCase):

    def test_mask_shape_must_match(self):
        with self.assertRaises(InvalidSampleError):
            Sample(image=np.zeros((8, 8)), mask=np.zeros((8, 9)))

    def test_mask_must_be_binary(self):
        with self.assertRaises(InvalidSampleError):
            Sample(image=np.zeros((8, 8)), mask=np.full((8, 8), 2))

    def test_image_range_is_checked(self):
        with self.assertRaises(InvalidSampleError):
            Sample(image=np.full((8, 8), 300))


class BackgroundPoolTests(SimpleTestCase):

    def setUp(self):
        rng = np.random.default_rng(0)
        self.images = [rng.integers(0, 256, size=(80, 96), dtype=np.uint8) for _ in range(3)]

    def test_full_size_patch_is_identity_crop(self):
        pool = build_background_pool(self.images, (80, 96), K=3, seed=1)
        for patch, image in zip(pool.patches, self.images):
            np.testing.assert_array_equal(patch, image)

    def test_patch_matches_source_window(self):
        offsets = [(5, 7), (0, 0), (16, 32)]
        pool = build_background_pool(self.images, (64, 64), K=3, offsets=offsets)
        for k, (row, col) in enumerate(offsets):
            np.testing.assert_array_equal(pool.patches[k], self.images[k][row:row + 64, col:col + 64])
        self.assertEqual(pool.provenance[2], 'image_2@16,32')

    def test_pool_size_must_be_positive(self):
        with self.assertRaises(EmptyPoolError):
            build_background_pool(self.images, (64, 64), K=0)

    def test_patch_larger_than_image_is_rejected(self):
        with self.assertRaises(ShapeMismatchError):
            build_background_pool(self.images, (100, 100), K=1)

    def test_pool_copies_patches(self):
        pool = build_background_pool(self.images, (80, 96), K=1)
        self.images[0][:] = 0
        self.assertGreater(int(pool.patches[0].max()), 0)


class CompositorTests(SimpleTestCase):

    def test_noise_free_composite_keeps_wire_and_background_pixels(self):
        for case in range(20):
            scene = generate_guidewire_scene(SceneParams(seed=case, height=64, width=64))
            rng = np.random.default_rng(100 + case)
            backgrounds = [rng.integers(0, 256, size=(64, 64), dtype=np.uint8) for _ in range(4)]
            pool = build_background_pool(backgrounds, (64, 64), K=4, seed=case)
            frame = composite(scene, pool, NoiseParams(sigma=0.0, seed=case))

            wire = scene.mask == 1
            np.testing.assert_array_equal(frame.image[wire], scene.image[wire])
            self.assertTrue(any(np.array_equal(frame.image[~wire], patch[~wire]) for patch in pool.patches))
            np.testing.assert_array_equal(frame.mask, scene.mask)
            self.assertEqual(frame.domain_tag, DomainTag.SYNTHESIZED)

    def test_noise_level_matches_sigma(self):
        scene = generate_scenes(SceneParams(height=256, width=256), 1, seed=6)[0]
        pool = build_background_pool([generate_vessel_background(256, 256, seed=s) for s in range(3)],
                                     (256, 256), K=3, seed=1)
        clean = composite(scene, pool, NoiseParams(sigma=0.0, seed=3))
        noisy = composite(scene, pool, NoiseParams(sigma=5.0, seed=3))
        deviation = np.abs(noisy.image.astype(np.float64) - clean.image.astype(np.float64)).mean()
        self.assertGreaterEqual(deviation, 3.5)
        self.assertLessEqual(deviation, 4.5)

    def test_composite_requires_mask_and_matching_shape(self):
        pool = build_background_pool([np.zeros((64, 64), dtype=np.uint8)], (64, 64), K=1)
        with self.assertRaises(InvalidSampleError):
            composite(Sample(image=np.zeros((64, 64))), pool, NoiseParams())
        with self.assertRaises(ShapeMismatchError):
            composite(Sample(image=np.zeros((32, 32)), mask=np.zeros((32, 32))), pool, NoiseParams())

    def test_synthesize_default_dataset_size(self):
        source = generate_scenes(SceneParams(height=64, width=64), 10, seed=1)
        pool = build_background_pool([generate_vessel_background(64, 64, seed=s) for s in range(3)],
                                     (64, 64), K=6, seed=2)
        frames = synthesize_dataset(source, pool, 254, NoiseParams(sigma=5.0, seed=4), seed=5)
        self.assertEqual(len(frames), 254)
        self.assertEqual(frames[0].name, 'synth_0000')
        self.assertEqual(frames[-1].name, 'synth_0253')
        for i in (0, 17, 253):
            np.testing.assert_array_equal(frames[i].mask, source[i % 10].mask)

    def test_synthesize_is_deterministic(self):
        source = generate_scenes(SceneParams(height=64, width=64), 2, seed=1)
        pool = build_background_pool([generate_vessel_background(64, 64, seed=0)], (64, 64), K=3, seed=2)
        a = synthesize_dataset(source, pool, 5, NoiseParams(sigma=3.0, seed=4), seed=5)
        b = synthesize_dataset(source, pool, 5, NoiseParams(sigma=3.0, seed=4), seed=5)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.image, y.image)

    def test_empty_source_is_rejected(self):
        pool = build_background_pool([np.zeros((64, 64), dtype=np.uint8)], (64, 64), K=1)
        with self.assertRaises(EmptyPoolError):
            synthesize_dataset([], pool, 3, NoiseParams(), seed=0)

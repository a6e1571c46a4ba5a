import unittest
import os
import sys

import numpy as np
import torch

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))  # Add project root to Python path
from sources import conditioning
from sources.conditioning import MicroCondition
from sources.errors import ConfigError, InputError
from sources.rpe2d import make_rng


def ramp(size=32):
    ys, xs = np.meshgrid(np.arange(size, dtype=np.float32), np.arange(size, dtype=np.float32), indexing="ij")
    return torch.from_numpy(((xs + 2 * ys) / (3 * size))[None])


class TestAugment(unittest.TestCase):
    def test_resize_branch_is_full_frame(self):
        sample = conditioning.augment(ramp(), 256, make_rng(0), p_resize=1.0)
        self.assertEqual(sample.cond.c_crop, (0, 0, 32, 32))
        self.assertEqual(sample.cond.c_resize, (16, 16))
        self.assertEqual(tuple(sample.image.shape), (1, 16, 16))
        self.assertTrue(sample.cond.is_full_frame)

    def test_full_window_crop_matches_resize(self):
        sample = conditioning.augment(ramp(), 256, make_rng(0), p_resize=0.0, min_crop_frac=1.0)
        resized = conditioning.resize_view(ramp(), 256)
        self.assertEqual(sample.cond, resized.cond)
        self.assertTrue(torch.equal(sample.image, resized.image))

    def test_window_mean_is_preserved(self):
        image = ramp()
        out = conditioning.crop_and_resize(image, (8, 8, 24, 24), (16, 16))
        self.assertAlmostEqual(float(out.mean()), float(image[:, 8:24, 8:24].mean()), delta=1e-3)

    def test_downsampled_ramp_keeps_its_mean(self):
        image = ramp()
        out = conditioning.crop_and_resize(image, (0, 0, 32, 32), (16, 16))
        self.assertAlmostEqual(float(out.mean()), float(image.mean()), delta=1e-3)

    def test_crops_stay_inside_the_frame(self):
        rng = make_rng(7)
        for _ in range(200):
            sample = conditioning.augment(ramp(), 64, rng, p_resize=0.0, min_crop_frac=0.5)
            top, left, down, right = sample.cond.c_crop
            self.assertEqual(down - top, right - left)
            self.assertGreaterEqual(down - top, 16)
            self.assertTrue(0 <= top and down <= 32 and 0 <= left and right <= 32)

    def test_same_seed_same_sample(self):
        a = conditioning.augment(ramp(), 64, make_rng(3))
        b = conditioning.augment(ramp(), 64, make_rng(3))
        self.assertEqual(a.cond, b.cond)
        self.assertTrue(torch.equal(a.image, b.image))

    def test_tiny_image_rejected(self):
        with self.assertRaises(InputError):
            conditioning.augment(torch.zeros(1, 1, 8), 16, make_rng(0))

    def test_non_square_target_rejected(self):
        with self.assertRaises(ConfigError):
            conditioning.augment(ramp(), 200, make_rng(0))


class TestFourierEmbed(unittest.TestCase):
    def test_zero(self):
        out = conditioning.fourier_embed(0, 8)
        self.assertTrue(torch.equal(out[0::2], torch.zeros(4)))
        self.assertTrue(torch.equal(out[1::2], torch.ones(4)))

    def test_one(self):
        out = conditioning.fourier_embed(1, 8)
        self.assertAlmostEqual(float(out[0]), float(np.sin(1.0)), delta=1e-6)
        self.assertAlmostEqual(float(out[1]), float(np.cos(1.0)), delta=1e-6)

    def test_odd_dim(self):
        with self.assertRaises(ConfigError):
            conditioning.fourier_embed(3, 7)

    def test_integers_up_to_1024_are_distinguishable(self):
        values = np.arange(1025, dtype=np.float64)
        table = conditioning.sinusoidal(values, 32, conditioning.FOURIER_BASE).double().numpy()
        for i in range(len(values) - 1):
            gaps = np.abs(table[i + 1:] - table[i]).max(axis=1)
            self.assertGreater(gaps.min(), 1e-3)


class TestEmbedMicrocondition(unittest.TestCase):
    def test_deterministic(self):
        cond = MicroCondition((32, 32), (4, 2, 20, 18), (16, 16))
        self.assertTrue(torch.equal(conditioning.embed_microcondition(cond, 8),
                                    conditioning.embed_microcondition(cond, 8)))

    def test_order_matters(self):
        a = MicroCondition((32, 32), (4, 2, 20, 18), (16, 16))
        b = MicroCondition((32, 32), (2, 4, 18, 20), (16, 16))
        self.assertFalse(torch.equal(conditioning.embed_microcondition(a, 8),
                                     conditioning.embed_microcondition(b, 8)))

    def test_null_condition(self):
        null = MicroCondition((0, 0), (0, 0, 0, 0), (0, 0))
        out = conditioning.embed_microcondition(null, 8)
        self.assertTrue(torch.equal(out, conditioning.fourier_embed(0, 8).repeat(8)))

    def test_width_mismatch(self):
        cond = MicroCondition.full_frame(16, 16)
        with self.assertRaises(ConfigError):
            conditioning.embed_microcondition(cond, 8, width=48)

    def test_batched_matches_single(self):
        conds = [MicroCondition.full_frame(32, 32, (16, 16)), MicroCondition((24, 30), (1, 3, 17, 19), (16, 16))]
        batch = conditioning.embed_microconditions(conds, 8, width=64)
        self.assertEqual(tuple(batch.shape), (2, 64))
        for row, cond in zip(batch, conds):
            self.assertTrue(torch.allclose(row, conditioning.embed_microcondition(cond, 8)))

    def test_invalid_crop_box(self):
        with self.assertRaises(InputError):
            MicroCondition((16, 16), (4, 4, 20, 12), (16, 16))


if __name__ == '__main__':
    unittest.main()

import unittest
import os
import sys
import math

import numpy as np
import torch

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))  # Add project root to Python path
from sources import diffusion
from sources import model as dit
from sources.diffusion import DiffusionSchedule, Sampler
from sources.errors import ConfigError, InputError, NonFiniteError
from sources.posenc import PEConfig


def tiny_model(seed=0, **pe_overrides) -> dit.DiT:
    pe = dict(d=8, max_h=8, max_w=8, h_train=2, w_train=2)
    pe.update(pe_overrides)
    torch.manual_seed(seed)
    net = dit.DiT(dit.ModelConfig(hidden_dim=32, num_heads=4, depth=2, num_classes=3, pe=PEConfig(**pe),
                                  dim_per_scalar=4, freq_dim=16, timesteps=100))
    gen = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for param in net.parameters():
            param.add_(torch.randn(param.shape, generator=gen) * 0.05)
    return net


class OracleModel(torch.nn.Module):
    """Returns a fixed tensor whatever it is asked."""
    def __init__(self, output, config=None):
        super().__init__()
        self.output = output
        self.config = config

    def forward(self, x, t, labels, conds=None, grids=None, scale_mode="train", drop_labels=None):
        return self.output.expand_as(x) if self.output.dim() == 0 else self.output


class TestSchedule(unittest.TestCase):
    def setUp(self):
        self.schedule = DiffusionSchedule.linear(1000, 1e-4, 2e-2)

    def test_linear_schedule(self):
        self.assertEqual(self.schedule.T, 1000)
        self.assertAlmostEqual(self.schedule.betas[0], 1e-4)
        self.assertAlmostEqual(self.schedule.betas[-1], 2e-2)
        self.assertTrue(np.all(np.diff(self.schedule.alphas_bar) < 0))

    def test_rejects_bad_betas(self):
        with self.assertRaises(ConfigError):
            DiffusionSchedule.from_betas([0.1, 1.0])
        with self.assertRaises(ConfigError):
            DiffusionSchedule.linear(10, 0.2, 0.1)


class TestForwardProcess(unittest.TestCase):
    def setUp(self):
        self.schedule = DiffusionSchedule.linear(1000)
        gen = torch.Generator().manual_seed(0)
        self.x0 = torch.rand(2, 1, 8, 8, generator=gen) * 2 - 1
        self.noise = torch.randn(2, 1, 8, 8, generator=gen)

    def test_first_step_stays_close(self):
        x_t = diffusion.q_sample(self.schedule, self.x0, torch.tensor([0, 0]), self.noise)
        bound = math.sqrt(1 - self.schedule.alphas_bar[0]) * 3 * float(self.noise.abs().max()) + 1e-3
        self.assertLess(float((x_t - self.x0).abs().max()), bound)

    def test_quarter_signal_closed_form(self):
        schedule = DiffusionSchedule.from_betas([0.5, 0.5])
        x_t = diffusion.q_sample(schedule, self.x0, torch.tensor([1, 1]), self.noise)
        self.assertTrue(torch.allclose(x_t, 0.5 * self.x0 + math.sqrt(0.75) * self.noise, atol=1e-6))

    def test_zero_noise(self):
        t = torch.tensor([10, 700])
        x_t = diffusion.q_sample(self.schedule, self.x0, t, torch.zeros_like(self.x0))
        signal = torch.tensor(np.sqrt(self.schedule.alphas_bar[[10, 700]]), dtype=torch.float32).reshape(-1, 1, 1, 1)
        self.assertTrue(torch.equal(x_t, signal * self.x0))

    def test_timestep_out_of_range(self):
        with self.assertRaises(InputError):
            diffusion.q_sample(self.schedule, self.x0, torch.tensor([0, 1000]), self.noise)

    def test_oracle_model_has_zero_loss(self):
        t, labels = torch.tensor([3, 400]), torch.tensor([0, 1])
        value = diffusion.loss(OracleModel(self.noise), self.schedule, self.x0, t, labels, self.noise)
        self.assertEqual(float(value), 0.0)

    def test_zero_model_loss_is_noise_power(self):
        t, labels = torch.tensor([3, 400]), torch.tensor([0, 1])
        value = diffusion.loss(OracleModel(torch.tensor(0.0)), self.schedule, self.x0, t, labels, self.noise)
        self.assertAlmostEqual(float(value), float((self.noise ** 2).mean()), delta=1e-6)


class TestTimestepShift(unittest.TestCase):
    def test_identity_at_training_size(self):
        for t in (0, 1, 17, 500, 999, 1000):
            self.assertEqual(diffusion.timestep_shift(t, 256, 256, 1000), t)

    def test_endpoints(self):
        self.assertEqual(diffusion.timestep_shift(0, 1024, 256, 1000), 0)
        self.assertEqual(diffusion.timestep_shift(1000, 1024, 256, 1000), 1000)

    def test_direct_evaluation(self):
        self.assertEqual(diffusion.timestep_shift(500, 1024, 256, 1000), 666)

    def test_monotone_and_pushed_towards_noise(self):
        shifted = [diffusion.timestep_shift(t, 1024, 256, 1000) for t in range(1001)]
        self.assertTrue(all(b >= a for a, b in zip(shifted, shifted[1:])))
        self.assertTrue(all(s >= t for t, s in enumerate(shifted)))

    def test_unshifted_sequence_when_token_counts_match(self):
        self.assertEqual(diffusion.timestep_sequence(1000, 50, 64, 64, use_shift=True),
                         diffusion.timestep_sequence(1000, 50))

    def test_shifted_sequence_is_descending_and_in_range(self):
        sequence = diffusion.timestep_sequence(1000, 250, 1024, 256, use_shift=True)
        self.assertTrue(all(b < a for a, b in zip(sequence, sequence[1:])))
        self.assertLessEqual(sequence[0], 999)
        self.assertEqual(sequence[-1], 0)

    def test_base_timesteps(self):
        self.assertEqual(diffusion.base_timesteps(1000, 4), [750, 500, 250, 0])
        with self.assertRaises(ConfigError):
            diffusion.base_timesteps(10, 11)


class TestGuidance(unittest.TestCase):
    def test_exact_endpoints(self):
        cond = torch.tensor([0.1, 0.2, 0.3])
        uncond = torch.tensor([1.0, -1.0, 0.7])
        self.assertIs(diffusion.guided_noise(cond, uncond, 1.0), cond)
        self.assertIs(diffusion.guided_noise(cond, uncond, 0.0), uncond)
        self.assertTrue(torch.allclose(diffusion.guided_noise(cond, uncond, 4.0), uncond + 4 * (cond - uncond)))


class TestSampler(unittest.TestCase):
    def setUp(self):
        self.schedule = DiffusionSchedule.linear(100)

    def _sample(self, net, seed=0, **kwargs):
        sampler = Sampler(net, self.schedule, steps=kwargs.pop("steps", 5), method=kwargs.pop("method", "ancestral"))
        shape = kwargs.pop("shape", (2, 1, 4, 4))
        return sampler.sample(shape, torch.tensor([0, 2]), torch.Generator().manual_seed(seed), **kwargs)

    def test_same_seed_same_output(self):
        net = tiny_model()
        a = self._sample(net, seed=3)
        b = self._sample(net, seed=3)
        self.assertTrue(torch.equal(a, b))
        self.assertFalse(torch.equal(a, self._sample(net, seed=4)))

    def test_ddim_is_deterministic_given_initial_noise(self):
        net = tiny_model()
        out = self._sample(net, method="ddim", guidance_scale=1.0)
        self.assertTrue(torch.isfinite(out).all())
        self.assertTrue(torch.equal(out, self._sample(net, method="ddim", guidance_scale=1.0)))

    def test_higher_resolution_with_both_corrections(self):
        net = tiny_model()
        out = self._sample(net, shape=(2, 1, 8, 8), use_shift=True, use_attn_scale=True, guidance_scale=4.0)
        self.assertEqual(tuple(out.shape), (2, 1, 8, 8))
        self.assertTrue(torch.isfinite(out).all())

    def test_lower_resolution_is_in_capacity(self):
        net = tiny_model(h_train=4, w_train=4)
        out = self._sample(net, shape=(2, 1, 4, 4), use_shift=True, use_attn_scale=True)
        self.assertTrue(torch.isfinite(out).all())

    def test_negative_guidance_rejected(self):
        with self.assertRaises(ConfigError):
            self._sample(tiny_model(), guidance_scale=-1.0)

    def test_unknown_method(self):
        with self.assertRaises(ConfigError):
            Sampler(tiny_model(), self.schedule, method="heun")

    def test_non_finite_state_names_step(self):
        config = tiny_model().config
        broken = OracleModel(torch.tensor(float("nan")), config=config)
        with self.assertRaises(NonFiniteError) as ctx:
            self._sample(broken, guidance_scale=1.0)
        self.assertIn("step 0", str(ctx.exception))


if __name__ == '__main__':
    unittest.main()

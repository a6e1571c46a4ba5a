import unittest
import os
import sys
import math

import numpy as np
import torch

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))  # Add project root to Python path
from sources import numerics
from sources.errors import DimensionError, NonFiniteError


class TestMatmul(unittest.TestCase):
    def test_identity(self):
        b = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
        self.assertTrue(torch.equal(numerics.matmul(torch.eye(2), b), b))

    def test_projector(self):
        a = torch.tensor([[1.0, 0.0], [0.0, 0.0]])
        b = torch.tensor([[5.0], [7.0]])
        self.assertTrue(torch.equal(numerics.matmul(a, b), torch.tensor([[5.0], [0.0]])))

    def test_matches_triple_loop(self):
        gen = torch.Generator().manual_seed(3)
        a = torch.rand(3, 3, generator=gen) * 2 - 1
        b = torch.rand(3, 3, generator=gen) * 2 - 1
        out = numerics.matmul(a, b)
        for i in range(3):
            for j in range(3):
                expected = sum(float(a[i, k]) * float(b[k, j]) for k in range(3))
                self.assertAlmostEqual(float(out[i, j]), expected, delta=1e-6)

    def test_shape_mismatch_names_both_shapes(self):
        with self.assertRaises(DimensionError) as ctx:
            numerics.matmul(torch.zeros(2, 3), torch.zeros(2, 3))
        self.assertIn("(2, 3)", str(ctx.exception))

    def test_backward_reaches_both_inputs(self):
        a = torch.rand(2, 3, requires_grad=True)
        b = torch.rand(3, 4, requires_grad=True)
        numerics.matmul(a, b).sum().backward()
        self.assertEqual(a.grad.shape, a.shape)
        self.assertEqual(b.grad.shape, b.shape)


class TestSoftmax(unittest.TestCase):
    def test_uniform(self):
        out = numerics.softmax_lastdim(torch.zeros(3))
        for v in out:
            self.assertAlmostEqual(float(v), 1 / 3, delta=1e-6)

    def test_large_logits_do_not_overflow(self):
        out = numerics.softmax_lastdim(torch.tensor([1000.0, 1000.0]))
        self.assertTrue(torch.isfinite(out).all())
        self.assertAlmostEqual(float(out[0]), 0.5, delta=1e-6)

    def test_closed_form(self):
        out = numerics.softmax_lastdim(torch.tensor([0.0, math.log(3.0)]))
        self.assertAlmostEqual(float(out[0]), 0.25, delta=1e-6)
        self.assertAlmostEqual(float(out[1]), 0.75, delta=1e-6)

    def test_rows_sum_to_one(self):
        x = torch.randn(5, 7, generator=torch.Generator().manual_seed(0)) * 10
        sums = numerics.softmax_lastdim(x).sum(dim=-1)
        self.assertTrue(torch.allclose(sums, torch.ones(5), atol=1e-6))


class TestAdamW(unittest.TestCase):
    def _step(self, value, grad, **kwargs):
        param = torch.nn.Parameter(torch.tensor([value]))
        opt = numerics.build_adamw([param], **kwargs)
        param.grad = torch.tensor([grad])
        numerics.adamw_step(opt, [("p", param)])
        return float(param.detach()[0]), opt

    def test_zero_grad_leaves_params(self):
        value, _ = self._step(0.7, 0.0, lr=0.1)
        self.assertEqual(value, np.float32(0.7))

    def test_first_step_moves_by_lr(self):
        value, _ = self._step(1.0, 1.0, lr=0.1, eps=1e-12)
        self.assertAlmostEqual(value, 0.9, delta=1e-5)

    def test_decoupled_weight_decay(self):
        value, _ = self._step(1.0, 0.0, lr=0.1, weight_decay=0.1)
        self.assertAlmostEqual(value, 0.99, delta=1e-6)

    def test_non_finite_gradient_aborts_with_name(self):
        param = torch.nn.Parameter(torch.tensor([1.0]))
        opt = numerics.build_adamw([param])
        param.grad = torch.tensor([float("nan")])
        with self.assertRaises(NonFiniteError) as ctx:
            numerics.adamw_step(opt, [("blocks.0.weight", param)])
        self.assertIn("blocks.0.weight", str(ctx.exception))
        self.assertEqual(float(param.detach()[0]), 1.0)

    def test_state_export_import(self):
        param = torch.nn.Parameter(torch.tensor([1.0, -2.0]))
        opt = numerics.build_adamw([param], lr=0.05)
        param.grad = torch.tensor([0.3, -0.1])
        numerics.adamw_step(opt, [("p", param)])
        snapshot = numerics.export_optimizer_state(opt)
        self.assertEqual(snapshot.step_count, 1)
        self.assertEqual(snapshot.first_moment[0].shape, param.shape)

        twin = torch.nn.Parameter(param.detach().clone())
        opt2 = numerics.build_adamw([twin], lr=0.05)
        numerics.import_optimizer_state(opt2, snapshot)
        for p, o in ((param, opt), (twin, opt2)):
            p.grad = torch.tensor([0.2, 0.4])
            numerics.adamw_step(o, [("p", p)])
        self.assertTrue(torch.equal(param.detach(), twin.detach()))


class TestFiniteDifferences(unittest.TestCase):
    def setUp(self):
        self.gen = torch.Generator().manual_seed(11)

    def _leaf(self, *shape):
        return (torch.rand(*shape, generator=self.gen, dtype=torch.float64) * 2 - 1).requires_grad_(True)

    def test_elementwise_and_reshape(self):
        a, b = self._leaf(3, 4), self._leaf(3, 4)
        fn = lambda: ((a + b) * a).reshape(4, 3).transpose(0, 1).pow(2).sum()
        self.assertLess(numerics.audit_gradients(fn, [a, b], n_coords=100)["max_rel_error"], 1e-4)

    def test_matmul_softmax(self):
        a, b = self._leaf(4, 5), self._leaf(5, 6)
        fn = lambda: (numerics.softmax_lastdim(numerics.matmul(a, b)) ** 2).sum()
        self.assertLess(numerics.audit_gradients(fn, [a, b], n_coords=100)["max_rel_error"], 1e-4)

    def test_layer_norm_gelu_mse(self):
        x, target = self._leaf(4, 8), self._leaf(4, 8)
        fn = lambda: numerics.mse_loss(numerics.gelu(numerics.layer_norm(x)), target.detach())
        self.assertLess(numerics.audit_gradients(fn, [x], n_coords=100)["max_rel_error"], 1e-4)

    def test_forward_is_deterministic(self):
        x = torch.rand(4, 8, generator=self.gen)
        first = numerics.gelu(numerics.layer_norm(x))
        second = numerics.gelu(numerics.layer_norm(x))
        self.assertTrue(torch.equal(first, second))


if __name__ == '__main__':
    unittest.main()

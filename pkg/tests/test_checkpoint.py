import unittest
import os
import sys
import tempfile

import numpy as np
import torch

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))  # Add project root to Python path
from sources import checkpoint, numerics
from sources import model as dit
from sources.errors import CheckpointError
from sources.numerics import OptimizerState
from sources.posenc import PEConfig
from sources.rpe2d import make_rng


def small_checkpoint() -> checkpoint.Checkpoint:
    params = [("w", np.array([[1.5, -2.0], [0.25, 3.0]], dtype=np.float32)),
              ("b", np.array([0.125], dtype=np.float32))]
    optimizer = OptimizerState(step_count=3, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0,
                               first_moment=[torch.full((2, 2), 0.5), None],
                               second_moment=[torch.full((2, 2), 0.25), None])
    gen = torch.Generator().manual_seed(7)
    return checkpoint.Checkpoint(config_text="[train]\nsteps = 3\n", global_step=3, seed=11, parameters=params,
                                 optimizer=optimizer, numpy_rng_state=make_rng(5).bit_generator.state,
                                 torch_rng_state=gen.get_state().numpy().tobytes())


class TestEncoding(unittest.TestCase):
    def test_roundtrip_is_bitwise(self):
        ckpt = small_checkpoint()
        payload = checkpoint.encode(ckpt)
        self.assertTrue(payload.startswith(b"RPE2D1\n"))
        back = checkpoint.decode(payload)
        self.assertEqual(back.config_text, ckpt.config_text)
        self.assertEqual((back.global_step, back.seed), (3, 11))
        self.assertEqual([n for n, _ in back.parameters], ["w", "b"])
        for (_, a), (_, b) in zip(ckpt.parameters, back.parameters):
            self.assertEqual(a.tobytes(), b.tobytes())
        self.assertTrue(torch.equal(back.optimizer.first_moment[0], ckpt.optimizer.first_moment[0]))
        self.assertIsNone(back.optimizer.second_moment[1])
        self.assertEqual(back.optimizer.step_count, 3)
        self.assertEqual(back.numpy_rng_state, ckpt.numpy_rng_state)
        self.assertEqual(back.torch_rng_state, ckpt.torch_rng_state)
        self.assertEqual(checkpoint.encode(back), payload)

    def test_every_single_byte_flip_is_rejected(self):
        payload = checkpoint.encode(small_checkpoint())
        for index in range(len(payload)):
            corrupted = bytearray(payload)
            corrupted[index] ^= 0x01
            with self.assertRaises(CheckpointError):
                checkpoint.decode(bytes(corrupted))

    def test_every_truncation_is_rejected(self):
        payload = checkpoint.encode(small_checkpoint())
        for length in range(len(payload)):
            with self.assertRaises(CheckpointError):
                checkpoint.decode(payload[:length])

    def test_foreign_magic(self):
        payload = checkpoint.encode(small_checkpoint())
        with self.assertRaises(CheckpointError) as ctx:
            checkpoint.decode(b"RPE2D2\n" + payload[7:])
        self.assertIn("magic", str(ctx.exception))

    def test_moment_count_must_match(self):
        ckpt = small_checkpoint()
        ckpt.optimizer.first_moment.append(None)
        with self.assertRaises(CheckpointError):
            checkpoint.encode(ckpt)


class TestModelCheckpoint(unittest.TestCase):
    def setUp(self):
        self.config = dit.ModelConfig(hidden_dim=16, num_heads=2, depth=1, num_classes=2,
                                      pe=PEConfig(d=8, max_h=4, max_w=4, h_train=2, w_train=2),
                                      dim_per_scalar=2, freq_dim=8, timesteps=10)

    def _trained(self, seed):
        torch.manual_seed(seed)
        net = dit.DiT(self.config)
        opt = numerics.build_adamw(net.parameters(), lr=1e-2)
        x = torch.randn(2, 1, 4, 4, generator=torch.Generator().manual_seed(seed))
        for _ in range(2):
            opt.zero_grad()
            numerics.mse_loss(net(x, torch.tensor([1, 5]), torch.tensor([0, 1])), x).backward()
            numerics.adamw_step(opt, net.named_parameter_list())
        return net, opt

    def test_save_load_restores_model_optimizer_and_rngs(self):
        net, opt = self._trained(0)
        np_rng = make_rng(3)
        np_rng.random(5)
        torch_gen = torch.Generator().manual_seed(4)
        torch.randn(3, generator=torch_gen)
        ckpt = checkpoint.capture(net, numerics.export_optimizer_state(opt), "[train]\n", 2, 0, np_rng, torch_gen)
        with tempfile.TemporaryDirectory() as tmp:
            path = checkpoint.save_checkpoint(checkpoint.checkpoint_path(tmp, 2), ckpt)
            self.assertEqual(os.path.basename(path), "ckpt_00000002.bin")
            self.assertFalse(os.path.exists(path + ".tmp"))
            loaded = checkpoint.load_checkpoint(path)
            self.assertEqual(checkpoint.latest_checkpoint(tmp), path)

        other, other_opt = self._trained(1)
        checkpoint.restore_parameters(other, loaded)
        for (name, a), (_, b) in zip(net.named_parameters(), other.named_parameters()):
            self.assertTrue(torch.equal(a, b), name)
        numerics.import_optimizer_state(other_opt, loaded.optimizer)
        self.assertEqual(numerics.export_optimizer_state(other_opt).step_count, 2)

        fresh_np, fresh_torch = make_rng(99), torch.Generator().manual_seed(99)
        checkpoint.restore_rngs(loaded, fresh_np, fresh_torch)
        self.assertEqual(fresh_np.random(), np_rng.random())
        self.assertTrue(torch.equal(torch.randn(4, generator=fresh_torch), torch.randn(4, generator=torch_gen)))

    def test_same_state_saves_identical_bytes(self):
        payloads = []
        with tempfile.TemporaryDirectory() as tmp:
            for attempt in range(2):
                net, opt = self._trained(0)
                ckpt = checkpoint.capture(net, numerics.export_optimizer_state(opt), "[train]\nseed = 0\n", 2, 0,
                                          make_rng(0), torch.Generator().manual_seed(0))
                path = checkpoint.save_checkpoint(os.path.join(tmp, f"run{attempt}", "ckpt_00000002.bin"), ckpt)
                with open(path, "rb") as f:
                    payloads.append(f.read())
        self.assertEqual(payloads[0], payloads[1])

    def test_restore_rejects_other_architectures(self):
        net, opt = self._trained(0)
        ckpt = checkpoint.capture(net, numerics.export_optimizer_state(opt), "", 0, 0, make_rng(0), torch.Generator())
        deeper = dit.DiT(dit.ModelConfig(hidden_dim=16, num_heads=2, depth=2, num_classes=2,
                                         pe=PEConfig(d=8, max_h=4, max_w=4, h_train=2, w_train=2),
                                         dim_per_scalar=2, freq_dim=8, timesteps=10))
        with self.assertRaises(CheckpointError):
            checkpoint.restore_parameters(deeper, ckpt)

    def test_missing_file_and_latest_of_empty_dir(self):
        with tempfile.TemporaryDirectory() as tmp:
            self.assertIsNone(checkpoint.latest_checkpoint(tmp))
            with self.assertRaises(CheckpointError):
                checkpoint.load_checkpoint(os.path.join(tmp, "ckpt_00000000.bin"))

    def test_corrupted_file_on_disk(self):
        net, opt = self._trained(0)
        ckpt = checkpoint.capture(net, numerics.export_optimizer_state(opt), "", 0, 0, make_rng(0), torch.Generator())
        rng = np.random.default_rng(0)
        with tempfile.TemporaryDirectory() as tmp:
            path = checkpoint.save_checkpoint(os.path.join(tmp, "ckpt_00000000.bin"), ckpt)
            with open(path, "rb") as f:
                payload = bytearray(f.read())
            for index in rng.integers(0, len(payload), size=25):
                corrupted = bytearray(payload)
                corrupted[int(index)] ^= 0x80
                with open(path, "wb") as f:
                    f.write(corrupted)
                with self.assertRaises(CheckpointError):
                    checkpoint.load_checkpoint(path)


if __name__ == '__main__':
    unittest.main()

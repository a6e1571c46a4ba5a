import math
import os
from typing import List, Optional

import numpy as np
import torch
from tqdm import tqdm

from sources import checkpoint, diffusion, numerics, rpe2d
from sources.conditioning import AugmentedSample, augment, resize_view
from sources.config import config_to_ini, diffusion_schedule, model_config
from sources.data_eval import SyntheticSpec, generate
from sources.errors import CheckpointError, NonFiniteError
from sources.logger import Logger
from sources.model import DiT
from sources.schemas import RunConfig
from sources.utility import pretty_print

LOSS_LOG = "loss.log"
LOCK_FILE = ".lock"


class RunLock:
    """Exclusive ownership of a run directory through an O_EXCL lock file."""
    def __init__(self, directory: str):
        self.path = os.path.join(directory, LOCK_FILE)
        self.fd = None

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise CheckpointError(f"run directory is locked by another process ({self.path})") from None
        os.write(self.fd, str(os.getpid()).encode())
        return self

    def __exit__(self, exc_type, exc, tb):
        os.close(self.fd)
        os.remove(self.path)
        return False


class Trainer:
    """
    Training loop: per-sample position grids, crop/resize augmentation,
    uniform timesteps, epsilon MSE and guarded AdamW steps. Writes a
    `step<TAB>loss` log and checkpoints into the run directory.
    """
    def __init__(self, cfg: RunConfig, out_dir: Optional[str] = None, progress: bool = True):
        self.cfg = cfg
        self.out_dir = out_dir or cfg.train.out_dir
        self.progress = progress
        self.logger = Logger("trainer.log")
        numerics.configure_determinism(cfg.train.threads)
        torch.manual_seed(cfg.train.seed)
        self.model = DiT(model_config(cfg))
        self.schedule = diffusion_schedule(cfg)
        self.optimizer = numerics.build_adamw(self.model.parameters(), lr=cfg.train.lr,
                                              weight_decay=cfg.train.weight_decay)
        self.rng = rpe2d.make_rng(cfg.train.seed)
        self.noise_gen = torch.Generator().manual_seed(cfg.train.seed + 1)
        self.spec = SyntheticSpec(classes=tuple(cfg.data.classes), seed=cfg.train.seed, channels=cfg.model.channels)
        self.config_text = config_to_ini(cfg)
        self.global_step = 0

    @property
    def loss_log_path(self) -> str:
        return os.path.join(self.out_dir, LOSS_LOG)

    def draw_sample(self) -> AugmentedSample:
        cfg = self.cfg
        class_id = int(self.rng.choice(cfg.data.classes))
        image = generate(self.spec, class_id, cfg.aug.base_resolution, self.rng)
        area = cfg.data.train_resolution ** 2
        if cfg.aug.enabled:
            return augment(image, area, self.rng, p_resize=cfg.aug.p_resize,
                           min_crop_frac=cfg.aug.min_crop_frac, class_label=class_id)
        return resize_view(image, area, class_label=class_id)

    def draw_grids(self, batch: int) -> Optional[List[rpe2d.Positions]]:
        """One grid per sample under rpe2d; other strategies use the fixed test-time layout."""
        if self.cfg.pe.strategy != "rpe2d":
            return None
        h = self.cfg.h_train
        return [rpe2d.sample_positions(self.cfg.rpe.variant, h, h, self.cfg.rpe.max_h, self.cfg.rpe.max_w, self.rng)
                for _ in range(batch)]

    def train_step(self) -> float:
        cfg = self.cfg
        batch = cfg.train.batch_size
        samples = [self.draw_sample() for _ in range(batch)]
        grids = self.draw_grids(batch)
        x0 = torch.stack([s.image for s in samples])
        labels = torch.tensor([s.class_label for s in samples], dtype=torch.long)
        t = torch.from_numpy(self.rng.integers(0, self.schedule.T, size=batch).astype(np.int64))
        drop = torch.from_numpy(self.rng.random(batch) < cfg.model.class_dropout)
        noise = torch.randn(x0.shape, generator=self.noise_gen, dtype=x0.dtype)
        self.model.train()
        loss = diffusion.loss(self.model, self.schedule, x0, t, labels, noise,
                              conds=[s.cond for s in samples], grids=grids, drop_labels=drop)
        value = float(loss.item())
        step = self.global_step + 1
        if not math.isfinite(value):
            self.emergency_checkpoint(f"non-finite loss at step {step}")
            raise NonFiniteError(f"non-finite loss at step {step}")
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        try:
            numerics.adamw_step(self.optimizer, self.model.named_parameters())
        except NonFiniteError as exc:
            self.emergency_checkpoint(f"{exc} at step {step}")
            raise NonFiniteError(f"{exc} at step {step}") from None
        self.global_step = step
        return value

    def snapshot(self) -> checkpoint.Checkpoint:
        return checkpoint.capture(self.model, numerics.export_optimizer_state(self.optimizer), self.config_text,
                                  self.global_step, self.cfg.train.seed, self.rng, self.noise_gen)

    def save(self) -> str:
        path = checkpoint.checkpoint_path(self.out_dir, self.global_step)
        return checkpoint.save_checkpoint(path, self.snapshot())

    def emergency_checkpoint(self, reason: str) -> str:
        path = os.path.join(self.out_dir, f"emergency_{self.global_step:08d}.bin")
        self.logger.error(f"{reason}, writing emergency checkpoint {path}")
        pretty_print(f"{reason}, emergency checkpoint saved to {path}", color="failure")
        return checkpoint.save_checkpoint(path, self.snapshot())

    def resume(self) -> bool:
        path = checkpoint.latest_checkpoint(self.out_dir)
        if path is None:
            self.logger.warning(f"resume requested but no checkpoint in {self.out_dir}, starting fresh")
            return False
        ckpt = checkpoint.load_checkpoint(path)
        if ckpt.config_text != self.config_text:
            self.logger.warning(f"configuration of {path} differs from the current one")
        checkpoint.restore_parameters(self.model, ckpt)
        numerics.import_optimizer_state(self.optimizer, ckpt.optimizer)
        checkpoint.restore_rngs(ckpt, self.rng, self.noise_gen)
        self.global_step = ckpt.global_step
        self.truncate_loss_log(self.global_step)
        self.logger.info(f"resumed from {path} at step {self.global_step}")
        return True

    def truncate_loss_log(self, step: int) -> None:
        if not os.path.exists(self.loss_log_path):
            return
        with open(self.loss_log_path, "r", encoding="utf-8") as f:
            lines = [line for line in f if line.strip() and int(line.split("\t")[0]) <= step]
        with open(self.loss_log_path, "w", encoding="utf-8") as f:
            f.writelines(lines)

    def train(self) -> str:
        """Run to train.steps; returns the path of the last checkpoint written."""
        os.makedirs(self.out_dir, exist_ok=True)
        with RunLock(self.out_dir):
            resumed = self.cfg.train.resume and self.resume()
            if not resumed:
                open(self.loss_log_path, "w", encoding="utf-8").close()
                last = self.save()
            else:
                last = checkpoint.latest_checkpoint(self.out_dir)
            total = self.cfg.train.steps
            self.logger.info(f"training from step {self.global_step} to {total} in {self.out_dir}")
            steps = range(self.global_step, total)
            bar = tqdm(steps, desc="training", disable=not self.progress)
            with open(self.loss_log_path, "a", encoding="utf-8") as log:
                for _ in bar:
                    value = self.train_step()
                    log.write(f"{self.global_step}\t{value:.8e}\n")
                    bar.set_postfix(loss=f"{value:.4f}")
                    if self.global_step % self.cfg.train.checkpoint_interval == 0 or self.global_step == total:
                        log.flush()
                        last = self.save()
            self.logger.info(f"training finished at step {self.global_step}, last checkpoint {last}")
        return last


def read_loss_log(path: str) -> List[float]:
    with open(path, "r", encoding="utf-8") as f:
        return [float(line.split("\t")[1]) for line in f if line.strip()]

"""
DDPM schedule, epsilon objective, timestep shift and the sampling loops.
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from tqdm import tqdm

from sources import numerics, rpe2d
from sources.conditioning import MicroCondition
from sources.errors import ConfigError, InputError, NonFiniteError
from sources.logger import Logger

SAMPLERS = ("ancestral", "ddim")


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alphas_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    @classmethod
    def from_betas(cls, betas: Sequence[float]) -> "DiffusionSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) == 0:
            raise ConfigError("beta schedule must be a non-empty 1-D sequence", key="diffusion.timesteps")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ConfigError("every beta must lie in (0, 1)", key="diffusion.beta_start")
        alphas = 1.0 - betas
        alphas_bar = np.cumprod(alphas)
        if np.any(np.diff(alphas_bar) >= 0):
            raise ConfigError("cumulative alphas must be strictly decreasing")
        return cls(betas=betas, alphas=alphas, alphas_bar=alphas_bar)

    @classmethod
    def linear(cls, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> "DiffusionSchedule":
        if T < 1:
            raise ConfigError(f"need at least one step, got {T}", key="diffusion.timesteps")
        if not 0 < beta_start <= beta_end < 1:
            raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}",
                              key="diffusion.beta_start")
        return cls.from_betas(np.linspace(beta_start, beta_end, T, dtype=np.float64))

    def check_timesteps(self, t: torch.Tensor) -> None:
        if t.numel() and (int(t.min()) < 0 or int(t.max()) >= self.T):
            raise InputError(f"timesteps must lie in [0, {self.T}), got {t.tolist()}")

    def coefficients(self, t: torch.Tensor, like: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """sqrt(alphas_bar[t]) and sqrt(1 - alphas_bar[t]) broadcast against `like`."""
        ab = self.alphas_bar[t.detach().cpu().numpy()]
        shape = (-1,) + (1,) * (like.dim() - 1)
        signal = torch.from_numpy(np.sqrt(ab)).to(like.dtype).reshape(shape)
        noise = torch.from_numpy(np.sqrt(1.0 - ab)).to(like.dtype).reshape(shape)
        return signal, noise


def q_sample(schedule: DiffusionSchedule, x0: torch.Tensor, t: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) noise"""
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    schedule.check_timesteps(t)
    if noise.shape != x0.shape:
        raise InputError(f"noise shape {tuple(noise.shape)} differs from image shape {tuple(x0.shape)}")
    signal, sigma = schedule.coefficients(t, x0)
    return signal * x0 + sigma * noise


def loss(model, schedule: DiffusionSchedule, x0: torch.Tensor, t: torch.Tensor, labels: torch.Tensor,
         noise: torch.Tensor, conds: Optional[Sequence[MicroCondition]] = None,
         grids: Optional[Sequence[rpe2d.Positions]] = None,
         drop_labels: Optional[torch.Tensor] = None) -> torch.Tensor:
    """MSE between the model's noise prediction and the injected noise."""
    x_t = q_sample(schedule, x0, t, noise)
    prediction = model(x_t, t, labels, conds=conds, grids=grids, drop_labels=drop_labels)
    return numerics.mse_loss(prediction, noise)


def timestep_shift(t_n: int, m: int, n: int, T: int) -> int:
    """
    Map a training-resolution timestep to the step with matching SNR at m
    tokens (trained on n): s = sqrt(m/n), t_m = floor(T s u / (1 + (s-1) u)), u = t_n/T.
    """
    if m < 1 or n < 1:
        raise ConfigError(f"token counts must be >= 1, got m={m}, n={n}")
    if not 0 <= t_n <= T:
        raise InputError(f"timestep {t_n} outside [0, {T}]")
    if m == n:
        return int(t_n)
    s = math.sqrt(m / n)
    value = T * s * t_n / (T + (s - 1.0) * t_n)
    return int(min(T, max(0, math.floor(value + 1e-9))))


def base_timesteps(T: int, steps: int) -> List[int]:
    """Uniform stride over the T training steps, descending."""
    if not 1 <= steps <= T:
        raise ConfigError(f"sampling steps must lie in [1, {T}], got {steps}", key="sample.steps")
    stride = T // steps
    return [i * stride for i in range(steps)][::-1]


def timestep_sequence(T: int, steps: int, m: int = None, n: int = None, use_shift: bool = False) -> List[int]:
    """Visited timesteps, descending; shifted and deduplicated when use_shift and m != n."""
    timesteps = base_timesteps(T, steps)
    if not use_shift or m is None or n is None or m == n:
        return timesteps
    shifted = {min(T - 1, timestep_shift(t, m, n, T)) for t in timesteps}
    return sorted(shifted, reverse=True)


def guided_noise(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, guidance_scale: float) -> torch.Tensor:
    if guidance_scale == 1:
        return eps_cond
    if guidance_scale == 0:
        return eps_uncond
    return eps_uncond + guidance_scale * (eps_cond - eps_uncond)


class Sampler:
    """
    Ancestral DDPM (or deterministic DDIM) loop over a strided, optionally
    shifted timestep sequence with classifier-free guidance on class labels.
    """
    def __init__(self, model, schedule: DiffusionSchedule, steps: int = 250, method: str = "ancestral"):
        if method not in SAMPLERS:
            raise ConfigError(f"unknown sampler '{method}', expected one of {SAMPLERS}", key="sample.sampler")
        self.model = model
        self.schedule = schedule
        self.steps = steps
        self.method = method
        self.logger = Logger("sampler.log")

    def predict_noise(self, x: torch.Tensor, t: int, labels: torch.Tensor, conds: List[MicroCondition],
                      grids: Optional[Sequence[rpe2d.Positions]], guidance_scale: float,
                      scale_mode: str) -> torch.Tensor:
        batch = x.shape[0]
        t_batch = torch.full((batch,), t, dtype=torch.long)

        def run(drop: bool) -> torch.Tensor:
            mask = torch.full((batch,), drop, dtype=torch.bool)
            return self.model(x, t_batch, labels, conds=conds, grids=grids, scale_mode=scale_mode, drop_labels=mask)

        if guidance_scale == 1:
            return run(False)
        if guidance_scale == 0:
            return run(True)
        return guided_noise(run(False), run(True), guidance_scale)

    def step(self, x: torch.Tensor, eps: torch.Tensor, t: int, t_prev: int,
             generator: torch.Generator) -> torch.Tensor:
        ab_t = float(self.schedule.alphas_bar[t])
        ab_prev = float(self.schedule.alphas_bar[t_prev]) if t_prev >= 0 else 1.0
        x0 = ((x - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)).clamp(-1.0, 1.0)
        if self.method == "ddim":
            eps = (x - math.sqrt(ab_t) * x0) / math.sqrt(1.0 - ab_t)
            return math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps
        beta = 1.0 - ab_t / ab_prev
        mean = (math.sqrt(ab_prev) * beta / (1.0 - ab_t)) * x0 \
            + (math.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab_t)) * x
        if t_prev < 0:
            return mean
        variance = max(beta * (1.0 - ab_prev) / (1.0 - ab_t), 1e-20)
        noise = torch.randn(x.shape, generator=generator, dtype=x.dtype)
        return mean + math.sqrt(variance) * noise

    @torch.no_grad()
    def sample(self, shape: Tuple[int, int, int, int], labels: torch.Tensor, generator: torch.Generator,
               guidance_scale: float = 4.0, grids: Optional[Sequence[rpe2d.Positions]] = None,
               use_shift: bool = False, use_attn_scale: bool = False, progress: bool = False) -> torch.Tensor:
        if guidance_scale < 0:
            raise ConfigError(f"guidance scale must be >= 0, got {guidance_scale}", key="sample.cfg_scale")
        b, c, height, width = shape
        labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
        if labels.numel() != b:
            raise InputError(f"{labels.numel()} labels for a batch of {b}")
        cfg = self.model.config
        m = (height // cfg.patch_size) * (width // cfg.patch_size)
        n = cfg.train_tokens
        timesteps = timestep_sequence(self.schedule.T, self.steps, m, n, use_shift)
        scale_mode = "extrapolate" if use_attn_scale and m != n else "train"
        conds = [MicroCondition.full_frame(height, width)] * b
        self.logger.info(f"sampling {shape} method={self.method} steps={len(timesteps)} m={m} n={n} "
                         f"shift={use_shift} attn_scale={use_attn_scale} cfg={guidance_scale}")
        self.model.eval()
        x = torch.randn(shape, generator=generator, dtype=numerics.DTYPE)
        iterator = tqdm(range(len(timesteps)), desc="sampling", leave=False) if progress else range(len(timesteps))
        for i in iterator:
            t = timesteps[i]
            t_prev = timesteps[i + 1] if i + 1 < len(timesteps) else -1
            eps = self.predict_noise(x, t, labels, conds, grids, guidance_scale, scale_mode)
            x = self.step(x, eps, t, t_prev, generator)
            if not torch.isfinite(x).all():
                self.logger.error(f"non-finite sampler state at step {i} (t={t})")
                raise NonFiniteError(f"non-finite sampler state at step {i} (t={t})")
        return x


def sample(model, schedule: DiffusionSchedule, shape: Tuple[int, int, int, int], labels: torch.Tensor,
           generator: torch.Generator, guidance_scale: float = 4.0,
           grids: Optional[Sequence[rpe2d.Positions]] = None, use_shift: bool = False,
           use_attn_scale: bool = False, steps: int = 250, method: str = "ancestral") -> torch.Tensor:
    sampler = Sampler(model, schedule, steps=steps, method=method)
    return sampler.sample(shape, labels, generator, guidance_scale=guidance_scale, grids=grids,
                          use_shift=use_shift, use_attn_scale=use_attn_scale)

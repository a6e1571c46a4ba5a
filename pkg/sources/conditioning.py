"""
Crop/resize augmentation and micro-conditioning.

Training images are treated as views of a larger image: either the whole
frame resized to the training size, or a square crop resized to it. The
view is recorded as a MicroCondition (original size, crop box, resize
target) whose Fourier features are added to the timestep embedding.
"""

import math
from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from sources.errors import ConfigError, InputError
from sources.numerics import DTYPE
from sources.posenc import sinusoidal
from sources.rpe2d import SeededRng

FOURIER_BASE = 10000.0
N_SCALARS = 8


@dataclass(frozen=True)
class MicroCondition:
    c_original: Tuple[int, int]
    c_crop: Tuple[int, int, int, int]
    c_resize: Tuple[int, int]

    def __post_init__(self):
        if not any(self.scalars()):
            return  # all-zero null condition
        h0, w0 = self.c_original
        top, left, down, right = self.c_crop
        if not (0 <= top < down <= h0 and 0 <= left < right <= w0):
            raise InputError(f"crop box {self.c_crop} invalid for original size {self.c_original}")
        if min(self.c_resize) < 1:
            raise InputError(f"resize target must be positive, got {self.c_resize}")

    @classmethod
    def full_frame(cls, h: int, w: int, target: Tuple[int, int] = None) -> "MicroCondition":
        """Global resize (or uncropped sampling) encoding."""
        return cls(c_original=(h, w), c_crop=(0, 0, h, w), c_resize=target or (h, w))

    @property
    def is_full_frame(self) -> bool:
        return self.c_crop == (0, 0) + tuple(self.c_original)

    def scalars(self) -> Tuple[int, ...]:
        """(h_original, w_original, c_top, c_left, c_down, c_right, h_target, w_target)"""
        return tuple(self.c_original) + tuple(self.c_crop) + tuple(self.c_resize)


@dataclass
class AugmentedSample:
    image: torch.Tensor
    cond: MicroCondition
    class_label: int

    def __post_init__(self):
        if tuple(self.image.shape[-2:]) != tuple(self.cond.c_resize):
            raise InputError(f"image extents {tuple(self.image.shape[-2:])} differ from c_resize {self.cond.c_resize}")


def fourier_embed(value: float, dim: int) -> torch.Tensor:
    """Sinusoidal features of a scalar, same convention as the sinusoidal PE."""
    if dim <= 0 or dim % 2:
        raise ConfigError(f"Fourier feature dim must be positive and even, got {dim}", key="cond.dim_per_scalar")
    return sinusoidal(float(value), dim, FOURIER_BASE)


def embed_microcondition(cond: MicroCondition, dim_per_scalar: int, width: int = None) -> torch.Tensor:
    """Concatenate the Fourier features of the eight condition scalars."""
    total = N_SCALARS * dim_per_scalar
    if width is not None and width != total:
        raise ConfigError(f"micro-condition width {total} (8 x {dim_per_scalar}) does not match "
                          f"conditioning width {width}", key="cond.dim_per_scalar")
    return torch.cat([fourier_embed(v, dim_per_scalar) for v in cond.scalars()])


def embed_microconditions(conds: Sequence[MicroCondition], dim_per_scalar: int, width: int = None) -> torch.Tensor:
    """Batched embed_microcondition, shape (B, 8 * dim_per_scalar)."""
    total = N_SCALARS * dim_per_scalar
    if width is not None and width != total:
        raise ConfigError(f"micro-condition width {total} (8 x {dim_per_scalar}) does not match "
                          f"conditioning width {width}", key="cond.dim_per_scalar")
    values = np.array([c.scalars() for c in conds], dtype=np.float64)
    if dim_per_scalar <= 0 or dim_per_scalar % 2:
        raise ConfigError(f"Fourier feature dim must be positive and even, got {dim_per_scalar}",
                          key="cond.dim_per_scalar")
    return sinusoidal(values, dim_per_scalar, FOURIER_BASE).reshape(len(conds), total)


def square_side(target_area: int) -> int:
    side = math.isqrt(int(target_area))
    if side < 1 or side * side != target_area:
        raise ConfigError(f"target area {target_area} is not a perfect square", key="data.train_resolution")
    return side


def _as_image(image: Union[np.ndarray, torch.Tensor]) -> torch.Tensor:
    image = torch.as_tensor(image, dtype=DTYPE)
    if image.dim() != 3:
        raise InputError(f"expected a C x H x W image, got shape {tuple(image.shape)}")
    if image.shape[1] < 2 or image.shape[2] < 2:
        raise InputError(f"image must be at least 2x2, got {tuple(image.shape[1:])}")
    return image


def crop_and_resize(image: torch.Tensor, crop: Tuple[int, int, int, int], size: Tuple[int, int]) -> torch.Tensor:
    """Bilinear resample of image[:, top:down, left:right] to size, half-pixel centres."""
    top, left, down, right = crop
    window = image[:, top:down, left:right]
    if tuple(window.shape[1:]) == tuple(size):
        return window.clone()
    out = F.interpolate(window.unsqueeze(0), size=tuple(size), mode="bilinear",
                        align_corners=False, antialias=False)
    return out.squeeze(0)


def resize_view(image: Union[np.ndarray, torch.Tensor], target_area: int, class_label: int = 0) -> AugmentedSample:
    """Global resize only, used when Cond-Aug is switched off."""
    image = _as_image(image)
    side = square_side(target_area)
    h0, w0 = image.shape[1:]
    cond = MicroCondition(c_original=(h0, w0), c_crop=(0, 0, h0, w0), c_resize=(side, side))
    return AugmentedSample(crop_and_resize(image, cond.c_crop, cond.c_resize), cond, class_label)


def augment(image: Union[np.ndarray, torch.Tensor], target_area: int, rng: SeededRng,
            p_resize: float = 0.5, min_crop_frac: float = 0.5, class_label: int = 0) -> AugmentedSample:
    """
    With probability p_resize resize the whole frame, otherwise resize a random
    square crop whose side is uniform in [min_crop_frac, 1] x min(h0, w0).
    """
    image = _as_image(image)
    side = square_side(target_area)
    h0, w0 = int(image.shape[1]), int(image.shape[2])
    if rng.random() < p_resize:
        crop = (0, 0, h0, w0)
    else:
        short = min(h0, w0)
        lo = min(short, max(1, math.ceil(min_crop_frac * short)))
        window = int(rng.integers(lo, short + 1))
        top = int(rng.integers(0, h0 - window + 1))
        left = int(rng.integers(0, w0 - window + 1))
        crop = (top, left, top + window, left + window)
    cond = MicroCondition(c_original=(h0, w0), c_crop=crop, c_resize=(side, side))
    return AugmentedSample(crop_and_resize(image, crop, cond.c_resize), cond, class_label)

"""
Positional encodings as pure functions of (possibly real valued) positions.

Covers sinusoidal PE, 1-D RoPE, block-diagonal RoPE-2D and the extrapolation
strategies that decide which positions and which frequency base a patch grid
uses at test time: ext, pi, ntk and rpe2d. Angles are computed in float64 and
cast to the working dtype afterwards.
"""

from dataclasses import dataclass, replace
from typing import Optional, Tuple, Union

import numpy as np
import torch

from sources import rpe2d
from sources.errors import CapacityError, ConfigError, DimensionError, InputError
from sources.numerics import DTYPE

STRATEGIES = ("ext", "pi", "ntk", "rpe2d")
FORMS = ("rope", "sinpe")
NTK_DIMS = ("head", "axis")

ArrayLike = Union[float, int, np.ndarray, torch.Tensor]


@dataclass(frozen=True)
class PEConfig:
    """
    h_test/w_test default to the training extents. clamp_ratio and ntk_dim
    select the baseline variants: with clamp_ratio the pi/ntk rescaling only
    applies when extending (test/train >= 1); ntk_dim="axis" takes the NTK
    exponent over the d/2 components one RoPE-2D axis spans instead of d.
    """
    d: int = 32
    base: float = 10000.0
    max_h: int = 64
    max_w: int = 64
    strategy: str = "rpe2d"
    h_train: int = 8
    w_train: int = 8
    h_test: Optional[int] = None
    w_test: Optional[int] = None
    form: str = "rope"
    variant: str = "grid"
    clamp_ratio: bool = False
    ntk_dim: str = "head"

    def __post_init__(self):
        if self.h_test is None:
            object.__setattr__(self, "h_test", self.h_train)
        if self.w_test is None:
            object.__setattr__(self, "w_test", self.w_train)
        if self.d <= 0 or self.d % 2:
            raise ConfigError(f"embedding dim must be positive and even, got {self.d}", key="pe.d")
        if self.base <= 1.0:
            raise ConfigError(f"frequency base must exceed 1, got {self.base}", key="pe.base")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy '{self.strategy}', expected one of {STRATEGIES}", key="pe.strategy")
        if self.form not in FORMS:
            raise ConfigError(f"unknown form '{self.form}', expected one of {FORMS}", key="pe.form")
        if self.variant not in rpe2d.VARIANTS:
            raise ConfigError(f"unknown variant '{self.variant}'", key="rpe.variant")
        if self.ntk_dim not in NTK_DIMS:
            raise ConfigError(f"unknown ntk_dim '{self.ntk_dim}', expected one of {NTK_DIMS}", key="pe.ntk_dim")
        if min(self.h_train, self.w_train, self.h_test, self.w_test) < 1:
            raise ConfigError("patch-grid extents must be >= 1")
        if self.strategy == "rpe2d":
            for extent, bound, label in ((self.h_train, self.max_h, "h_train"), (self.h_test, self.max_h, "h_test"),
                                         (self.w_train, self.max_w, "w_train"), (self.w_test, self.max_w, "w_test")):
                if extent > bound:
                    raise CapacityError(f"{label}={extent} exceeds maximum positions H={self.max_h}, W={self.max_w}")

    def at_resolution(self, h_test: int, w_test: int) -> "PEConfig":
        return replace(self, h_test=h_test, w_test=w_test)


def frequencies(d: int, base: float) -> np.ndarray:
    """theta_i = base^(-2i/d), i = 0..d/2-1, float64."""
    if d <= 0 or d % 2:
        raise ConfigError(f"embedding dim must be positive and even, got {d}")
    return np.power(float(base), -np.arange(0, d, 2, dtype=np.float64) / d)


def _as_float64(positions: ArrayLike) -> np.ndarray:
    if isinstance(positions, torch.Tensor):
        return positions.detach().cpu().numpy().astype(np.float64)
    return np.asarray(positions, dtype=np.float64)


def sinusoidal(positions: ArrayLike, d: int, base: float = 10000.0, dtype: torch.dtype = DTYPE) -> torch.Tensor:
    """
    Sinusoidal features of shape (*positions.shape, d):
    component 2i = sin(p * theta_i), component 2i+1 = cos(p * theta_i).
    """
    angles = _as_float64(positions)[..., None] * frequencies(d, base)
    out = np.empty(angles.shape[:-1] + (d,), dtype=np.float64)
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return torch.from_numpy(out).to(dtype)


def sinpe(m: float, cfg: PEConfig) -> torch.Tensor:
    if m < 0:
        raise InputError(f"position must be >= 0, got {m}")
    return sinusoidal(m, cfg.d, cfg.base)


@dataclass(frozen=True)
class Rotation2D:
    """
    Per-pair cos/sin of shape (..., d/2). The first x_pairs pairs form the
    x-half (row position), the rest the y-half (column position). A 1-D
    rotation is the special case with an empty y-half.
    """
    cos: torch.Tensor
    sin: torch.Tensor
    x_pairs: int

    @property
    def cos_x(self) -> torch.Tensor:
        return self.cos[..., :self.x_pairs]

    @property
    def sin_x(self) -> torch.Tensor:
        return self.sin[..., :self.x_pairs]

    @property
    def cos_y(self) -> torch.Tensor:
        return self.cos[..., self.x_pairs:]

    @property
    def sin_y(self) -> torch.Tensor:
        return self.sin[..., self.x_pairs:]

    def unsqueeze(self, dim: int) -> "Rotation2D":
        return Rotation2D(self.cos.unsqueeze(dim), self.sin.unsqueeze(dim), self.x_pairs)


def _rotation_from_angles(angles: np.ndarray, x_pairs: int, dtype: torch.dtype) -> Rotation2D:
    return Rotation2D(cos=torch.from_numpy(np.cos(angles)).to(dtype),
                      sin=torch.from_numpy(np.sin(angles)).to(dtype),
                      x_pairs=x_pairs)


def rotation1d(m: ArrayLike, d: int, base: float, dtype: torch.dtype = DTYPE) -> Rotation2D:
    angles = _as_float64(m)[..., None] * frequencies(d, base)
    return _rotation_from_angles(angles, d // 2, dtype)


def rotation2d(x: ArrayLike, y: ArrayLike, d: int, base_x: float, base_y: float,
               dtype: torch.dtype = DTYPE) -> Rotation2D:
    """Block-diagonal rotation: first d/2 components follow x, last d/2 follow y."""
    if d % 4:
        raise ConfigError(f"RoPE-2D needs a head dim divisible by 4, got {d}")
    half = d // 2
    x, y = np.broadcast_arrays(_as_float64(x), _as_float64(y))
    angles = np.concatenate([x[..., None] * frequencies(half, base_x),
                             y[..., None] * frequencies(half, base_y)], axis=-1)
    return _rotation_from_angles(angles, half // 2, dtype)


def apply_rotation(v: torch.Tensor, rot: Rotation2D) -> torch.Tensor:
    """Rotate each pair (v_2i, v_2i+1) by the matching angle."""
    if v.shape[-1] != 2 * rot.cos.shape[-1]:
        raise DimensionError(f"vector of dim {v.shape[-1]} does not match rotation with {rot.cos.shape[-1]} pairs")
    cos = rot.cos.to(v.dtype)
    sin = rot.sin.to(v.dtype)
    even, odd = v[..., 0::2], v[..., 1::2]
    out = torch.stack([even * cos - odd * sin, even * sin + odd * cos], dim=-1)
    return out.flatten(-2)


def rope_apply(v: torch.Tensor, m: ArrayLike, cfg: PEConfig) -> torch.Tensor:
    if v.shape[-1] != cfg.d:
        raise DimensionError(f"vector dim {v.shape[-1]} differs from configured d={cfg.d}")
    return apply_rotation(v, rotation1d(m, cfg.d, cfg.base, dtype=v.dtype))


def rope2d_apply(v: torch.Tensor, x: ArrayLike, y: ArrayLike, cfg: PEConfig) -> torch.Tensor:
    if cfg.d % 4:
        raise ConfigError(f"RoPE-2D needs d divisible by 4, got {cfg.d}", key="pe.d")
    if v.shape[-1] != cfg.d:
        raise DimensionError(f"vector dim {v.shape[-1]} differs from configured d={cfg.d}")
    return apply_rotation(v, rotation2d(x, y, cfg.d, cfg.base, cfg.base, dtype=v.dtype))


def extension_ratio(train: int, test: int, clamp: bool = False) -> float:
    """test/train; with clamp, ratios below 1 become 1 so only extension rescales."""
    ratio = test / train
    return max(1.0, ratio) if clamp else ratio


def ntk_base(base: float, ratio: float, d_rot: int) -> float:
    """b' = b * ratio^(d_rot / (d_rot - 2))."""
    if d_rot <= 2:
        return base
    return base * ratio ** (d_rot / (d_rot - 2))


def strategy_bases(cfg: PEConfig, d_rot: int = None) -> Tuple[float, float]:
    """
    Frequency base per axis. Only ntk departs from cfg.base. d_rot is the
    dimension in the NTK exponent: cfg.d by default, d/2 with ntk_dim="axis".
    """
    if cfg.strategy != "ntk":
        return cfg.base, cfg.base
    if d_rot is None:
        d_rot = cfg.d if cfg.ntk_dim == "head" else cfg.d // 2
    return (ntk_base(cfg.base, extension_ratio(cfg.h_train, cfg.h_test, cfg.clamp_ratio), d_rot),
            ntk_base(cfg.base, extension_ratio(cfg.w_train, cfg.w_test, cfg.clamp_ratio), d_rot))


def strategy_positions(i: int, j: int, cfg: PEConfig) -> Tuple[float, float]:
    """Effective (x, y) position of 1-based patch (i, j) on the test grid."""
    if not (1 <= i <= cfg.h_test and 1 <= j <= cfg.w_test):
        raise InputError(f"patch ({i}, {j}) outside the {cfg.h_test}x{cfg.w_test} test grid")
    if cfg.strategy in ("ext", "ntk"):
        return float(i), float(j)
    if cfg.strategy == "pi":
        return (i / extension_ratio(cfg.h_train, cfg.h_test, cfg.clamp_ratio),
                j / extension_ratio(cfg.w_train, cfg.w_test, cfg.clamp_ratio))
    grid = rpe2d.test_positions(cfg.h_test, cfg.w_test, cfg.max_h, cfg.max_w)
    return float(grid.xs[i - 1]), float(grid.ys[j - 1])


def strategy_grid(cfg: PEConfig) -> rpe2d.PositionGrid:
    """Positions of the whole h_test x w_test grid under cfg.strategy."""
    if cfg.strategy == "rpe2d":
        return rpe2d.test_positions(cfg.h_test, cfg.w_test, cfg.max_h, cfg.max_w)
    xs = [strategy_positions(i, 1, cfg)[0] for i in range(1, cfg.h_test + 1)]
    ys = [strategy_positions(1, j, cfg)[1] for j in range(1, cfg.w_test + 1)]
    return rpe2d.PositionGrid(xs=tuple(xs), ys=tuple(ys))


def flat_strategy_positions(cfg: PEConfig) -> rpe2d.FlatPositions:
    """Flat counterpart of strategy_grid for the naive variant."""
    if cfg.strategy == "rpe2d":
        return rpe2d.test_flat_positions(cfg.h_test, cfg.w_test, cfg.max_h, cfg.max_w)
    total = cfg.h_test * cfg.w_test
    return rpe2d.FlatPositions(positions=tuple(range(1, total + 1)), h=cfg.h_test, w=cfg.w_test)

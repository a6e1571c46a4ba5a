"""
Randomised two dimensional position assignment.

During training every sample draws its own sorted row positions xs and
column positions ys from the larger ranges {1..H} and {1..W}; patch (i, j)
then sits at (xs[i], ys[j]). At test time the positions are spread as evenly
as possible over the whole range, anchored on 1 and H (resp. W), so every
test position has been seen during training.
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from sources.errors import CapacityError, ConfigError

VARIANTS = ("grid", "equispaced", "naive")

SeededRng = np.random.Generator


def make_rng(seed: int) -> SeededRng:
    """PCG64 generator; the same seed yields the same draws on a given platform."""
    return np.random.Generator(np.random.PCG64(int(seed)))


@dataclass(frozen=True)
class PositionGrid:
    """
    Cartesian product of row positions xs and column positions ys.
    Entries are integers for the RPE-2D samplers and may be real for
    interpolating baselines.
    """
    xs: Tuple[float, ...]
    ys: Tuple[float, ...]
    max_h: Optional[int] = None
    max_w: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "xs", tuple(self.xs))
        object.__setattr__(self, "ys", tuple(self.ys))
        for name, axis, bound in (("xs", self.xs, self.max_h), ("ys", self.ys, self.max_w)):
            if len(axis) == 0:
                raise ConfigError(f"{name} must hold at least one position")
            if any(b <= a for a, b in zip(axis, axis[1:])):
                raise ConfigError(f"{name} must be strictly increasing, got {list(axis)}")
            if bound is not None and (axis[0] < 1 or axis[-1] > bound):
                raise CapacityError(f"{name} must lie in [1, {bound}], got {list(axis)}")

    @property
    def h(self) -> int:
        return len(self.xs)

    @property
    def w(self) -> int:
        return len(self.ys)

    def token_positions(self) -> np.ndarray:
        """(h*w, 2) float64 array, row-major over patches: [x_i, y_j]."""
        xs, ys = np.meshgrid(np.asarray(self.xs, dtype=np.float64),
                             np.asarray(self.ys, dtype=np.float64), indexing="ij")
        return np.stack([xs.reshape(-1), ys.reshape(-1)], axis=-1)

    def describe(self) -> str:
        return (f"grid h={self.h} w={self.w} H={self.max_h} W={self.max_w}\n"
                f"xs\t{' '.join(_fmt(v) for v in self.xs)}\n"
                f"ys\t{' '.join(_fmt(v) for v in self.ys)}\n")


@dataclass(frozen=True)
class FlatPositions:
    """Flattened 1-D positions in {1..H*W} for an h x w patch grid (row-major)."""
    positions: Tuple[int, ...]
    h: int
    w: int
    max_len: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "positions", tuple(self.positions))
        if len(self.positions) != self.h * self.w:
            raise ConfigError(f"expected {self.h * self.w} flat positions, got {len(self.positions)}")
        if any(b <= a for a, b in zip(self.positions, self.positions[1:])):
            raise ConfigError("flat positions must be strictly increasing")

    def token_positions(self) -> np.ndarray:
        """(h*w, 1) float64 array."""
        return np.asarray(self.positions, dtype=np.float64).reshape(-1, 1)

    def describe(self) -> str:
        return (f"flat h={self.h} w={self.w} L={self.max_len}\n"
                f"positions\t{' '.join(str(p) for p in self.positions)}\n")


Positions = Union[PositionGrid, FlatPositions]


def _fmt(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else f"{value:.6g}"


def _check_capacity(h: int, w: int, max_h: int, max_w: int) -> None:
    if h < 1 or w < 1:
        raise CapacityError(f"patch grid must be at least 1x1, got {h}x{w}")
    if h > max_h or w > max_w:
        raise CapacityError(f"patch grid {h}x{w} exceeds maximum positions H={max_h}, W={max_w}")


def _draw_axis(n: int, limit: int, rng: SeededRng) -> np.ndarray:
    return np.sort(rng.choice(limit, size=n, replace=False)) + 1


def sample_grid_positions(h: int, w: int, max_h: int, max_w: int, rng: SeededRng) -> PositionGrid:
    """Independent uniform subsets per axis, sorted; the Cartesian product gives patch positions."""
    _check_capacity(h, w, max_h, max_w)
    xs = _draw_axis(h, max_h, rng)
    ys = _draw_axis(w, max_w, rng)
    return PositionGrid(xs=tuple(int(v) for v in xs), ys=tuple(int(v) for v in ys),
                        max_h=max_h, max_w=max_w)


def _max_interval(n: int, limit: int) -> Optional[int]:
    return (limit - 1) // (n - 1) if n >= 2 else None


def sample_equispaced_positions(h: int, w: int, max_h: int, max_w: int, rng: SeededRng) -> PositionGrid:
    """
    Constant spacing r shared by both axes, random start per axis.
    r is uniform over the intervals feasible on both axes at once.
    """
    _check_capacity(h, w, max_h, max_w)
    bounds = [b for b in (_max_interval(h, max_h), _max_interval(w, max_w)) if b is not None]
    r_max = min(bounds) if bounds else 1
    if r_max < 1:
        raise CapacityError(f"no feasible interval for {h}x{w} patches within H={max_h}, W={max_w}")
    r = int(rng.integers(1, r_max + 1))
    x1 = int(rng.integers(1, max_h - (h - 1) * r + 1))
    y1 = int(rng.integers(1, max_w - (w - 1) * r + 1))
    xs = tuple(x1 + i * r for i in range(h))
    ys = tuple(y1 + j * r for j in range(w))
    return PositionGrid(xs=xs, ys=ys, max_h=max_h, max_w=max_w)


def sample_naive_positions(h: int, w: int, max_h: int, max_w: int, rng: SeededRng) -> FlatPositions:
    """Flatten the patches and draw h*w sorted positions out of {1..H*W}."""
    if h < 1 or w < 1 or h * w > max_h * max_w:
        raise CapacityError(f"{h}x{w} patches exceed maximum positions H={max_h}, W={max_w}")
    flat = _draw_axis(h * w, max_h * max_w, rng)
    return FlatPositions(positions=tuple(int(v) for v in flat), h=h, w=w, max_len=max_h * max_w)


def sample_positions(variant: str, h: int, w: int, max_h: int, max_w: int, rng: SeededRng) -> Positions:
    samplers = {
        "grid": sample_grid_positions,
        "equispaced": sample_equispaced_positions,
        "naive": sample_naive_positions,
    }
    if variant not in samplers:
        raise ConfigError(f"unknown variant '{variant}', expected one of {VARIANTS}", key="rpe.variant")
    return samplers[variant](h, w, max_h, max_w, rng)


def spread_positions(n: int, limit: int) -> Tuple[int, ...]:
    """
    n integers in {1..limit}, first 1, last limit, rounded linspace in between
    (round half up, exact integer arithmetic). n == 1 gives the centre ceil(limit/2).
    """
    if n < 1 or n > limit:
        raise CapacityError(f"cannot place {n} positions within maximum position {limit}")
    if n == 1:
        return ((limit + 1) // 2,)
    span = limit - 1
    return tuple(1 + (2 * i * span + (n - 1)) // (2 * (n - 1)) for i in range(n))


def test_positions(h_test: int, w_test: int, max_h: int, max_w: int) -> PositionGrid:
    """Deterministic, maximally equidistant test-time grid."""
    _check_capacity(h_test, w_test, max_h, max_w)
    return PositionGrid(xs=spread_positions(h_test, max_h), ys=spread_positions(w_test, max_w),
                        max_h=max_h, max_w=max_w)


def test_flat_positions(h_test: int, w_test: int, max_h: int, max_w: int) -> FlatPositions:
    """Test-time counterpart of the naive variant: equidistant over {1..H*W}."""
    total = max_h * max_w
    if h_test * w_test > total:
        raise CapacityError(f"{h_test}x{w_test} patches exceed maximum positions H={max_h}, W={max_w}")
    return FlatPositions(positions=spread_positions(h_test * w_test, total),
                         h=h_test, w=w_test, max_len=total)


def inference_positions(variant: str, h_test: int, w_test: int, max_h: int, max_w: int) -> Positions:
    if variant == "naive":
        return test_flat_positions(h_test, w_test, max_h, max_w)
    return test_positions(h_test, w_test, max_h, max_w)


def stack_token_positions(positions: Sequence[Positions]) -> np.ndarray:
    """(B, N, k) float64 array, k = 2 for grids and 1 for flat positions."""
    arrays = [p.token_positions() for p in positions]
    if len({a.shape for a in arrays}) != 1:
        raise ConfigError("all samples in a batch need the same position layout")
    return np.stack(arrays, axis=0)

"""Nested coarse-to-fine visual token scales and training-free sampling baselines.

Grids are ``(H, W, C)`` arrays, optionally with leading batch dimensions.
Pooling works on numpy arrays and torch tensors alike, so the same code builds
pyramids for file I/O and for the differentiable toy model.
"""

from __future__ import annotations

from dataclasses import dataclass
import math
from typing import Any, Sequence

import numpy as np


class DimensionError(ValueError):
    """Grid shape is incompatible with the requested pooling or selection."""


def check_grid(grid: Any) -> tuple[int, int, int]:
    if grid.ndim < 3:
        raise DimensionError(f"expected an (..., H, W, C) grid, got shape {tuple(grid.shape)}")
    h, w, c = (int(s) for s in grid.shape[-3:])
    if h < 1 or w < 1 or c < 1:
        raise DimensionError(f"grid dimensions must be positive, got {(h, w, c)}")
    return h, w, c


def _block_mean(grid: Any, bh: int, bw: int) -> Any:
    *lead, h, w, c = grid.shape
    return grid.reshape(*lead, h // bh, bh, w // bw, bw, c).mean(axis=(-4, -2))


def pool_2x2(grid: Any) -> Any:
    """Average non-overlapping 2x2 blocks (stride 2)."""
    h, w, _ = check_grid(grid)
    if h % 2 or w % 2:
        bad = "H" if h % 2 else "W"
        raise DimensionError(f"2x2 pooling needs even dimensions; {bad} is odd in {h}x{w}")
    return _block_mean(grid, 2, 2)


def pool_3x3(grid: Any) -> Any:
    """Collapse a 3x3 grid into a single token."""
    h, w, _ = check_grid(grid)
    if (h, w) != (3, 3):
        raise DimensionError(f"3x3 pooling needs a 3x3 grid, got {h}x{w}")
    return _block_mean(grid, 3, 3)


def cascade_shapes(h: int, w: int) -> list[tuple[int, int]]:
    """Spatial shapes visited by the pooling cascade, finest first.

    Halving continues while both sides are even and larger than 3. A 3x3 grid
    is closed off with a final 3x3 pool; any other stopping shape is the
    coarsest scale. A cascade that stalls on an odd side above 3 is rejected.
    """
    if h < 1 or w < 1:
        raise DimensionError(f"grid dimensions must be positive, got {h}x{w}")
    shapes = [(h, w)]
    while True:
        if (h, w) == (3, 3):
            shapes.append((1, 1))
            break
        if h > 3 and w > 3 and h % 2 == 0 and w % 2 == 0:
            h, w = h // 2, w // 2
            shapes.append((h, w))
            continue
        for name, n in (("H", h), ("W", w)):
            if n > 3 and n % 2:
                raise DimensionError(f"pooling cascade stalls at {h}x{w}: odd dimension {name}={n}")
        break
    return shapes


@dataclass(frozen=True)
class TokenPyramid:
    """Pooled scales of one grid, coarsest first."""

    scales: tuple[Any, ...]

    @property
    def schedule(self) -> list[int]:
        return [int(s.shape[-3] * s.shape[-2]) for s in self.scales]

    @property
    def finest(self) -> Any:
        return self.scales[-1]

    @property
    def coarsest(self) -> Any:
        return self.scales[0]

    def __len__(self) -> int:
        return len(self.scales)

    def scale(self, k: int) -> Any:
        """Return the scale holding exactly ``k`` tokens."""
        sched = self.schedule
        if k not in sched:
            raise DimensionError(f"{k} tokens is not a scale of schedule {sched}")
        return self.scales[sched.index(k)]


def build_pyramid(grid: Any) -> TokenPyramid:
    h, w, _ = check_grid(grid)
    shapes = cascade_shapes(h, w)
    out = [grid]
    for shape in shapes[1:]:
        out.append(pool_3x3(out[-1]) if shape == (1, 1) else pool_2x2(out[-1]))
    return TokenPyramid(tuple(reversed(out)))


def schedule_for(h: int, w: int) -> list[int]:
    return [a * b for a, b in reversed(cascade_shapes(h, w))]


def flatten(grid: Any) -> Any:
    """Row-major ``(H*W, C)`` token sequence."""
    h, w, c = check_grid(grid)
    return grid.reshape(*grid.shape[:-3], h * w, c)


def spatial_sample(grid: Any, k: int) -> Any:
    """Pick an ``m x m`` lattice of tokens (``k = m**2``) at cell centers."""
    h, w, _ = check_grid(grid)
    m = math.isqrt(k) if k > 0 else 0
    if k < 1 or m * m != k:
        raise DimensionError(f"spatial sampling needs a positive perfect square, got {k}")
    if m > min(h, w):
        raise DimensionError(f"cannot sample a {m}x{m} lattice from a {h}x{w} grid")
    rows = lattice_indices(h, m)
    cols = lattice_indices(w, m)
    return grid[..., rows, :, :][..., cols, :]


def lattice_indices(n: int, m: int) -> list[int]:
    # integer form of floor((i + 0.5) * n / m)
    return [((2 * i + 1) * n) // (2 * m) for i in range(m)]


def sequential_sample(grid: Any, k: int) -> Any:
    """First ``k`` tokens in row-major order."""
    h, w, _ = check_grid(grid)
    if not 1 <= k <= h * w:
        raise DimensionError(f"k must lie in [1, {h * w}], got {k}")
    return flatten(grid)[..., :k, :]


def inference_pool(grid: Any, k: int) -> Any:
    """Average-pool a grid down to the schedule size ``k`` at inference time."""
    return build_pyramid(grid).scale(k)


def scale_index(schedule: Sequence[int], k: int) -> int:
    try:
        return list(schedule).index(k)
    except ValueError:
        raise DimensionError(f"{k} tokens is not a scale of schedule {list(schedule)}") from None


def as_array(grid: Any) -> np.ndarray:
    arr = np.asarray(grid)
    check_grid(arr)
    if not np.all(np.isfinite(arr)):
        raise ValueError("grid contains non-finite values")
    return arr

"""Grid-aligned block masking for dense pretraining.

The mask lives on a grid of block x block cells. Exactly
round(ratio * H * W / block^2) cells are masked, clamped to
[1, n_cells - 1] so neither nothing nor everything is masked, drawn
without replacement. The half-resolution mask is the top-left subsample
of the full mask (full[0::2, 0::2]), matching how the embedding grid
subsamples the input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MaskPlan:
    full: np.ndarray       # (H, W) bool, True = masked
    half: np.ndarray       # (ceil(H/2), ceil(W/2)) bool
    block: int
    ratio: float
    n_blocks_masked: int


def n_masked_blocks(h: int, w: int, ratio: float, block: int) -> int:
    if h % block or w % block:
        raise ValueError(f"mask block {block} must tile the {h}x{w} input")
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must be in [0, 1], got {ratio}")
    n_cells = (h // block) * (w // block)
    if n_cells < 2:
        raise ValueError("need at least two mask cells")
    want = int(round(ratio * h * w / (block * block)))
    return int(np.clip(want, 1, n_cells - 1))


def make_mask_plan(h: int, w: int, ratio: float, block: int,
                   rng: np.random.Generator) -> MaskPlan:
    k = n_masked_blocks(h, w, ratio, block)
    gh, gw = h // block, w // block
    chosen = rng.choice(gh * gw, size=k, replace=False)
    grid = np.zeros(gh * gw, dtype=bool)
    grid[chosen] = True
    full = np.repeat(np.repeat(grid.reshape(gh, gw), block, axis=0), block, axis=1)
    return MaskPlan(full=full, half=full[0::2, 0::2].copy(), block=block,
                    ratio=ratio, n_blocks_masked=k)


def batch_masks(n: int, h: int, w: int, ratio: float, block: int,
                rng: np.random.Generator):
    """Independent per-sample masks: (full (n,h,w), half (n,ceil,ceil))."""
    full = np.empty((n, h, w), dtype=bool)
    half = np.empty((n, (h + 1) // 2, (w + 1) // 2), dtype=bool)
    for i in range(n):
        plan = make_mask_plan(h, w, ratio, block, rng)
        full[i] = plan.full
        half[i] = plan.half
    return full, half

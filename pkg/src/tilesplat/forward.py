"""Tile rasterizer: front-to-back alpha compositing of depth-sorted splats.

Per pixel, over the tile's sorted list:

    alpha = min(0.99, o * exp(-q/2))        skip the splat when alpha < 1/255
    C += T * alpha * color;  D += T * alpha * depth;  T *= (1 - alpha)

and the pixel stops once T < 1e-4. Every 32 list positions the running
(T, C, D) state is checkpointed so the backward pass can restart any group
without replaying the whole prefix. Group boundaries are defined by position
in the tile's sorted list, not by how many splats actually blended, which is
what keeps group ownership well-defined for the per-Gaussian backward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .binning import TileIndex
from .projection import MIN_OPACITY, SplatBatch
from .scene import TILE

ALPHA_CAP = 0.99
MIN_ALPHA = MIN_OPACITY  # blending skip threshold, 1/255
T_TERMINATE = 1e-4
CHECKPOINT_INTERVAL = 32


@dataclass
class RenderBuffers:
    color: np.ndarray  # (H, W, 3), background composited in
    depth: np.ndarray  # (H, W) accumulated centroid depth (unnormalized)
    final_T: np.ndarray  # (H, W)
    n_contrib: np.ndarray  # (H, W) int32, splats actually blended
    n_considered: np.ndarray  # (H, W) int32, list positions consumed
    background: np.ndarray
    # per tile id: (G, 5, th, tw) with channels (T, Cr, Cg, Cb, D), one
    # record per completed 32-splat group
    checkpoints: dict[int, np.ndarray] = field(default_factory=dict)

    def normalized_depth(self):
        """Blended depth divided by accumulated weight (1 - final_T)."""
        denom = 1.0 - self.final_T
        out = np.zeros_like(self.depth)
        mask = self.n_contrib > 0
        out[mask] = self.depth[mask] / denom[mask]
        return out


@dataclass
class Contributions:
    """Scoring-mode record of which splats blended where with weight
    alpha * T >= 1/255; pixel indices are flat row-major into (H, W)."""

    pixel_idx: np.ndarray
    splat_rows: np.ndarray


def tile_window(tile_id: int, tiles_x: int, width: int, height: int):
    """Pixel bounds and center grids of one tile (partial at image edges)."""
    ty, tx = divmod(tile_id, tiles_x)
    x0, y0 = tx * TILE, ty * TILE
    x1, y1 = min(x0 + TILE, width), min(y0 + TILE, height)
    px = np.arange(x0, x1) + 0.5
    py = np.arange(y0, y1) + 0.5
    return x0, y0, x1, y1, px[None, :], py[:, None]


def splat_alpha(batch: SplatBatch, row: int, px, py):
    """Alpha and intermediates of one splat over a pixel grid.

    Shared by the forward pass and both backward paths so the blending
    weights are recomputed bit-identically.
    """
    a, b, c = batch.conics[row]
    dx = px - batch.means2d[row, 0]
    dy = py - batch.means2d[row, 1]
    q = a * dx * dx + 2.0 * b * (dx * dy) + c * dy * dy
    gauss = np.exp(-0.5 * q)
    raw = batch.opacities[row] * gauss
    alpha = np.minimum(ALPHA_CAP, raw)
    return alpha, raw, gauss, dx, dy


def render(batch: SplatBatch, tiles: TileIndex, colors: np.ndarray,
           background, *, record_checkpoints: bool = True,
           scoring: bool = False):
    """Rasterize a bound batch; returns RenderBuffers (and Contributions in
    scoring mode). `colors` are per-batch-row RGB."""
    width, height = batch.width, batch.height
    background = np.asarray(background, dtype=np.float64).reshape(3)
    bufs = RenderBuffers(
        color=np.empty((height, width, 3)),
        depth=np.zeros((height, width)),
        final_T=np.ones((height, width)),
        n_contrib=np.zeros((height, width), dtype=np.int32),
        n_considered=np.zeros((height, width), dtype=np.int32),
        background=background,
    )
    bufs.color[:] = background
    contrib_pix: list[np.ndarray] = []
    contrib_rows: list[np.ndarray] = []

    for tile_id in range(tiles.tiles_x * tiles.tiles_y):
        start, end = tiles.tile_range(tile_id)
        if start == end:
            continue
        rows = tiles.values[start:end]
        x0, y0, x1, y1, px, py = tile_window(tile_id, tiles.tiles_x, width, height)
        shape = (y1 - y0, x1 - x0)

        T = np.ones(shape)
        C = np.zeros(shape + (3,))
        D = np.zeros(shape)
        n_contrib = np.zeros(shape, dtype=np.int32)
        n_cons = np.zeros(shape, dtype=np.int32)
        alive = np.ones(shape, dtype=bool)
        n_groups = len(rows) // CHECKPOINT_INTERVAL
        ckpts = []

        for k, row in enumerate(rows):
            alpha, _, _, _, _ = splat_alpha(batch, row, px, py)
            blend = alive & (alpha >= MIN_ALPHA)
            w = np.where(blend, T * alpha, 0.0)
            C += w[:, :, None] * colors[row]
            D += w * batch.depths[row]
            T = np.where(blend, T * (1.0 - alpha), T)
            n_contrib += blend
            n_cons[alive] = k + 1
            if scoring:
                strong = blend & (w >= MIN_ALPHA)
                if strong.any():
                    yy, xx = np.nonzero(strong)
                    contrib_pix.append(((yy + y0) * width + (xx + x0)).astype(np.int64))
                    contrib_rows.append(np.full(len(yy), row, dtype=np.int64))
            alive &= T >= T_TERMINATE
            if record_checkpoints and (k + 1) % CHECKPOINT_INTERVAL == 0:
                ckpts.append(np.stack([T, C[:, :, 0], C[:, :, 1], C[:, :, 2], D]))
            if not alive.any():
                # remaining state is frozen; pad the outstanding checkpoints
                while record_checkpoints and len(ckpts) < n_groups:
                    ckpts.append(np.stack([T, C[:, :, 0], C[:, :, 1], C[:, :, 2], D]))
                break

        bufs.color[y0:y1, x0:x1] = C + T[:, :, None] * background
        bufs.depth[y0:y1, x0:x1] = D
        bufs.final_T[y0:y1, x0:x1] = T
        bufs.n_contrib[y0:y1, x0:x1] = n_contrib
        bufs.n_considered[y0:y1, x0:x1] = n_cons
        if ckpts:
            bufs.checkpoints[tile_id] = np.stack(ckpts)

    if scoring:
        contribs = Contributions(
            pixel_idx=np.concatenate(contrib_pix) if contrib_pix else np.empty(0, np.int64),
            splat_rows=np.concatenate(contrib_rows) if contrib_rows else np.empty(0, np.int64),
        )
        return bufs, contribs
    return bufs

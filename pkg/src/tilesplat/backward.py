"""Backpropagation from per-pixel loss gradients to 2D splat parameters.

Two interchangeable paths:

* backward_per_pixel — the reference: per pixel, re-traverse the tile's list
  back to front, reconstructing the transmittance before each splat by
  dividing it back out and carrying suffix color/depth accumulators.

* backward_per_gaussian — group path: the tile's list is cut into groups of
  32; each group restarts from the forward checkpoint recorded at its start
  and is replayed front to back, so the gradient of every splat in the group
  only needs its own prefix state plus the final composited pixel values.
  Each splat's gradient is accumulated privately over all pixels of the tile
  and merged into the shared accumulator exactly once.

Both accept an optional per-pixel gradient w.r.t. the final transmittance
(needed when a loss consumes depth normalized by 1 - final_T).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .binning import TileIndex
from .forward import (CHECKPOINT_INTERVAL, MIN_ALPHA, RenderBuffers,
                      splat_alpha, tile_window)
from .projection import SplatBatch


class CheckpointsMissingError(RuntimeError):
    """Per-Gaussian backward needs a forward pass run with checkpointing."""


@dataclass
class Grad2D:
    """Per-splat accumulators, aligned with SplatBatch rows."""

    d_means2d: np.ndarray
    d_conics: np.ndarray
    d_opacities: np.ndarray
    d_colors: np.ndarray
    d_depths: np.ndarray
    merges: int = 0  # instrumentation: shared-accumulator merge count

    @classmethod
    def zeros(cls, n: int) -> "Grad2D":
        return cls(np.zeros((n, 2)), np.zeros((n, 3)), np.zeros(n),
                   np.zeros((n, 3)), np.zeros(n))


def _tile_upstream(grad_color, grad_depth, grad_final_T, y0, y1, x0, x1):
    g_c = grad_color[y0:y1, x0:x1]
    g_d = grad_depth[y0:y1, x0:x1] if grad_depth is not None else None
    g_t = grad_final_T[y0:y1, x0:x1] if grad_final_T is not None else None
    return g_c, g_d, g_t


def _alpha_chain(out: Grad2D, row, dL_dalpha, alpha, raw, gauss, dx, dy,
                 conic, g_c, w, g_d):
    """Common chain from dL/dalpha to conic/mean/opacity plus the direct
    color and depth terms; reduces over the pixel window."""
    capped = raw > alpha  # alpha hit the 0.99 cap: flat w.r.t. q and opacity
    g_q = np.where(capped, 0.0, dL_dalpha * (-0.5) * alpha)
    a, b, c = conic
    out.d_conics[row, 0] += np.sum(g_q * dx * dx)
    out.d_conics[row, 1] += np.sum(g_q * 2.0 * dx * dy)
    out.d_conics[row, 2] += np.sum(g_q * dy * dy)
    out.d_means2d[row, 0] += np.sum(g_q * (-2.0 * a * dx - 2.0 * b * dy))
    out.d_means2d[row, 1] += np.sum(g_q * (-2.0 * b * dx - 2.0 * c * dy))
    out.d_opacities[row] += np.sum(np.where(capped, 0.0, dL_dalpha * gauss))
    out.d_colors[row] += np.einsum("yx,yxc->c", w, g_c)
    if g_d is not None:
        out.d_depths[row] += np.sum(g_d * w)


def backward_per_pixel(buffers: RenderBuffers, batch: SplatBatch,
                       tiles: TileIndex, colors: np.ndarray,
                       grad_color: np.ndarray, grad_depth: np.ndarray | None = None,
                       grad_final_T: np.ndarray | None = None,
                       deterministic: bool = True) -> Grad2D:
    """Reference path: back-to-front re-traversal per pixel."""
    out = Grad2D.zeros(len(batch))
    width, height = batch.width, batch.height
    bg = buffers.background

    tile_order = range(tiles.tiles_x * tiles.tiles_y)
    for tile_id in tile_order:
        start, end = tiles.tile_range(tile_id)
        if start == end:
            continue
        rows = tiles.values[start:end]
        x0, y0, x1, y1, px, py = tile_window(tile_id, tiles.tiles_x, width, height)
        g_c, g_d, g_t = _tile_upstream(grad_color, grad_depth, grad_final_T,
                                       y0, y1, x0, x1)
        if not (np.any(g_c) or (g_d is not None and np.any(g_d))
                or (g_t is not None and np.any(g_t))):
            continue

        n_cons = buffers.n_considered[y0:y1, x0:x1]
        final_T = buffers.final_T[y0:y1, x0:x1]
        T_run = final_T.copy()
        S_C = final_T[:, :, None] * bg  # suffix color incl. the background
        S_D = np.zeros_like(final_T)
        g_tf_term = -g_t * final_T if g_t is not None else None

        for p in range(int(n_cons.max()) - 1, -1, -1):
            row = rows[p]
            alpha, raw, gauss, dx, dy = splat_alpha(batch, row, px, py)
            part = (p < n_cons) & (alpha >= MIN_ALPHA)
            if not part.any():
                continue
            one_minus = 1.0 - alpha
            T_before = np.where(part, T_run / one_minus, T_run)
            w = np.where(part, T_before * alpha, 0.0)

            dL_dalpha = np.einsum(
                "yxc,yxc->yx", g_c,
                T_before[:, :, None] * colors[row] - S_C / one_minus[:, :, None])
            if g_d is not None:
                dL_dalpha += g_d * (T_before * batch.depths[row] - S_D / one_minus)
            if g_t is not None:
                dL_dalpha += g_tf_term / one_minus
            dL_dalpha = np.where(part, dL_dalpha, 0.0)

            _alpha_chain(out, row, dL_dalpha, alpha, raw, gauss, dx, dy,
                         batch.conics[row], g_c, w, g_d)
            out.merges += 1

            S_C = S_C + w[:, :, None] * colors[row]
            S_D = S_D + w * batch.depths[row]
            T_run = T_before
    return out


def backward_per_gaussian(buffers: RenderBuffers, batch: SplatBatch,
                          tiles: TileIndex, colors: np.ndarray,
                          grad_color: np.ndarray, grad_depth: np.ndarray | None = None,
                          grad_final_T: np.ndarray | None = None,
                          group_size: int = CHECKPOINT_INTERVAL) -> Grad2D:
    """Group path: restart each 32-splat group from its forward checkpoint,
    replay it front to back, one merged write per (splat, tile) pair."""
    out = Grad2D.zeros(len(batch))
    width, height = batch.width, batch.height

    for tile_id in range(tiles.tiles_x * tiles.tiles_y):
        start, end = tiles.tile_range(tile_id)
        if start == end:
            continue
        rows = tiles.values[start:end]
        n = len(rows)
        x0, y0, x1, y1, px, py = tile_window(tile_id, tiles.tiles_x, width, height)
        g_c, g_d, g_t = _tile_upstream(grad_color, grad_depth, grad_final_T,
                                       y0, y1, x0, x1)
        if not (np.any(g_c) or (g_d is not None and np.any(g_d))
                or (g_t is not None and np.any(g_t))):
            continue

        ckpts = buffers.checkpoints.get(tile_id)
        if n > group_size and (ckpts is None or len(ckpts) < n // group_size):
            raise CheckpointsMissingError(
                f"tile {tile_id} has {n} splats but no stored checkpoints; "
                "rerun the forward pass with checkpointing enabled")

        n_cons = buffers.n_considered[y0:y1, x0:x1]
        final_T = buffers.final_T[y0:y1, x0:x1]
        color_total = buffers.color[y0:y1, x0:x1]
        depth_total = buffers.depth[y0:y1, x0:x1]
        g_tf_term = -g_t * final_T if g_t is not None else None

        for g in range(-(-n // group_size)):
            p0 = g * group_size
            p1 = min(n, p0 + group_size)
            if g == 0:
                T = np.ones_like(final_T)
                C = np.zeros(final_T.shape + (3,))
                D = np.zeros_like(final_T)
            else:
                state = ckpts[g - 1]
                T = state[0].copy()
                C = np.moveaxis(state[1:4], 0, -1).copy()
                D = state[4].copy()

            local = Grad2D.zeros(p1 - p0)  # lane-private accumulators
            for p in range(p0, p1):
                row = rows[p]
                alpha, raw, gauss, dx, dy = splat_alpha(batch, row, px, py)
                part = (p < n_cons) & (alpha >= MIN_ALPHA)
                if not part.any():
                    continue
                one_minus = 1.0 - alpha
                w = np.where(part, T * alpha, 0.0)
                C_after = C + w[:, :, None] * colors[row]
                D_after = D + w * batch.depths[row]

                dL_dalpha = np.einsum(
                    "yxc,yxc->yx", g_c,
                    T[:, :, None] * colors[row]
                    - (color_total - C_after) / one_minus[:, :, None])
                if g_d is not None:
                    dL_dalpha += g_d * (T * batch.depths[row]
                                        - (depth_total - D_after) / one_minus)
                if g_t is not None:
                    dL_dalpha += g_tf_term / one_minus
                dL_dalpha = np.where(part, dL_dalpha, 0.0)

                _alpha_chain(local, p - p0, dL_dalpha, alpha, raw, gauss,
                             dx, dy, batch.conics[row], g_c, w, g_d)
                T = np.where(part, T * one_minus, T)
                C = C_after
                D = D_after

            for p in range(p0, p1):  # single merged write per splat
                row = rows[p]
                i = p - p0
                out.d_means2d[row] += local.d_means2d[i]
                out.d_conics[row] += local.d_conics[i]
                out.d_opacities[row] += local.d_opacities[i]
                out.d_colors[row] += local.d_colors[i]
                out.d_depths[row] += local.d_depths[i]
                out.merges += 1
    return out

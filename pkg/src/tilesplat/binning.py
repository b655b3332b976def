"""Tile binning: SnugBox computation, exact ellipse/tile intersection via two
strategies, and the depth-sorted per-tile splat index.

Tiles are 16x16 pixels; tile (tx, ty) owns the closed pixel-space rectangle
[16 tx, 16 tx + 16] x [16 ty, 16 ty + 16]. A tile is touched by a splat iff
the minimum of its quadratic form over that rectangle is <= the level t, so
tangency (min q == t) is inclusive: a single boundary pixel contribution is
never dropped.

Both strategies enumerate candidates in the same splat-major, column-major
order, therefore the (tile, depth)-sorted output is bitwise identical even
when packed sort keys collide.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .projection import SplatBatch
from .scene import TILE


@dataclass
class SnugBox:
    """Pixel-space ellipse extents and the inclusive tile rectangle."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    tile_rect: tuple[int, int, int, int]  # (tx0, tx1, ty0, ty1); tx0 > tx1 if empty


@dataclass
class TileIndex:
    """Depth-sorted (tile, splat) pairs with per-tile ranges.

    keys    (P,) uint64: tile id in the high 32 bits, order-preserving
            float32 depth bits in the low 32
    values  (P,) int64 splat rows into the originating SplatBatch
    offsets (T+1,) prefix array; tile t owns [offsets[t], offsets[t+1])
    """

    keys: np.ndarray
    values: np.ndarray
    offsets: np.ndarray
    tiles_x: int
    tiles_y: int

    @property
    def n_pairs(self):
        return len(self.keys)

    def tile_range(self, tile_id: int):
        return int(self.offsets[tile_id]), int(self.offsets[tile_id + 1])

    def depths(self):
        """Sorted per-pair depths (float32 precision, as packed)."""
        return (self.keys & 0xFFFFFFFF).astype(np.uint32).view(np.float32)

    def tile_ids(self):
        return (self.keys >> 32).astype(np.int64)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.keys.tobytes())
        h.update(self.values.astype(np.int64).tobytes())
        return h.hexdigest()[:16]


def _tile_span(lo, hi, n_tiles):
    """Inclusive tile ids covered by the closed interval [lo, hi].

    A tile is included when its closed 16px interval intersects [lo, hi],
    so an extent landing exactly on a tile edge includes both neighbors.
    """
    t0 = np.ceil(np.asarray(lo) / TILE - 1.0).astype(np.int64)
    t1 = np.floor(np.asarray(hi) / TILE).astype(np.int64)
    t0 = np.maximum(t0, 0)
    t1 = np.minimum(t1, n_tiles - 1)
    return t0, t1


def compute_snugboxes(batch: SplatBatch) -> SplatBatch:
    """Fill the batch's SnugBox extents and tile rectangles in place."""
    a, b, c = batch.conics[:, 0], batch.conics[:, 1], batch.conics[:, 2]
    t = batch.level_t
    det = a * c - b * b
    ex = np.sqrt(c * t / det)  # tangent-point extents
    ey = np.sqrt(a * t / det)
    batch.x_min = batch.means2d[:, 0] - ex
    batch.x_max = batch.means2d[:, 0] + ex
    batch.y_min = batch.means2d[:, 1] - ey
    batch.y_max = batch.means2d[:, 1] + ey

    tiles_x = -(-batch.width // TILE)
    tiles_y = -(-batch.height // TILE)
    tx0, tx1 = _tile_span(batch.x_min, batch.x_max, tiles_x)
    ty0, ty1 = _tile_span(batch.y_min, batch.y_max, tiles_y)
    batch.tile_rect = np.stack([tx0, tx1, ty0, ty1], axis=1)
    return batch


def snugbox(conic, t, mean, image_dims) -> SnugBox:
    """Single-splat SnugBox; image_dims is (width, height)."""
    a, b, c = (float(v) for v in conic)
    if not (a > 0 and c > 0 and a * c - b * b > 0):
        raise ValueError("conic is not positive definite")
    if t < 0:
        raise ValueError("level t must be >= 0")
    det = a * c - b * b
    ex = np.sqrt(c * t / det)
    ey = np.sqrt(a * t / det)
    mx, my = float(mean[0]), float(mean[1])
    width, height = image_dims
    tx0, tx1 = _tile_span(mx - ex, mx + ex, -(-width // TILE))
    ty0, ty1 = _tile_span(my - ey, my + ey, -(-height // TILE))
    return SnugBox(mx - ex, mx + ex, my - ey, my + ey,
                   (int(tx0), int(tx1), int(ty0), int(ty1)))


def _expand_counts(counts):
    """Row index and within-row rank for ragged expansion by `counts`."""
    counts = np.asarray(counts, dtype=np.int64)
    if len(counts) == 0 or counts.sum() == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    total = int(counts.sum())
    owner = np.repeat(np.arange(len(counts)), counts)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    within = np.arange(total) - np.repeat(starts, counts)
    return owner, within


def _depth_bits(depths):
    """Order-preserving uint32 bit-cast of positive float depths."""
    return np.asarray(depths, dtype=np.float32).view(np.uint32).astype(np.uint64)


def radix_argsort_u64(keys: np.ndarray) -> np.ndarray:
    """Stable LSD radix sort over uint64 keys, four 16-bit digit passes."""
    order = np.arange(len(keys), dtype=np.int64)
    for shift in (0, 16, 32, 48):
        digits = ((keys[order] >> np.uint64(shift)) & np.uint64(0xFFFF)).astype(np.uint16)
        order = order[np.argsort(digits, kind="stable")]
    return order


def _build_index(tile_ids, splat_rows, depths, tiles_x, tiles_y) -> TileIndex:
    keys = (tile_ids.astype(np.uint64) << np.uint64(32)) | _depth_bits(depths)
    order = radix_argsort_u64(keys)
    keys = keys[order]
    values = splat_rows[order].astype(np.int64)
    sorted_tids = (keys >> np.uint64(32)).astype(np.int64)
    offsets = np.searchsorted(sorted_tids, np.arange(tiles_x * tiles_y + 1))
    return TileIndex(keys, values, offsets, tiles_x, tiles_y)


def _require_snugboxes(batch: SplatBatch):
    if batch.tile_rect is None:
        compute_snugboxes(batch)


def bin_sequential(batch: SplatBatch) -> TileIndex:
    """Column walk: for each splat, visit the SnugBox tile columns and derive
    the exact touched row span from the ellipse's y-interval over the column.
    """
    _require_snugboxes(batch)
    tiles_x = -(-batch.width // TILE)
    tiles_y = -(-batch.height // TILE)
    m = len(batch)
    if m == 0:
        return _build_index(np.empty(0, np.int64), np.empty(0, np.int64),
                            np.empty(0), tiles_x, tiles_y)

    rect = batch.tile_rect
    ncols = np.maximum(0, rect[:, 1] - rect[:, 0] + 1)
    splat, within = _expand_counts(ncols)
    tx = rect[splat, 0] + within

    mx = batch.means2d[splat, 0]
    my = batch.means2d[splat, 1]
    a = batch.conics[splat, 0]
    b = batch.conics[splat, 1]
    c = batch.conics[splat, 2]
    t = batch.level_t[splat]
    det = a * c - b * b

    # column x-interval clamped to the ellipse extents, relative to the mean
    xl = np.maximum(TILE * tx, batch.x_min[splat]) - mx
    xr = np.minimum(TILE * tx + TILE, batch.x_max[splat]) - mx

    def y_bounds(dx):
        rad = np.sqrt(np.maximum(0.0, (b * b - a * c) * dx * dx + t * c))
        return (-b * dx - rad) / c, (-b * dx + rad) / c

    lo_l, hi_l = y_bounds(xl)
    lo_r, hi_r = y_bounds(xr)
    ylo = np.minimum(lo_l, lo_r)
    yhi = np.maximum(hi_l, hi_r)

    # global y tangent points, when their x lies inside this column
    ymax_rel = np.sqrt(a * t / det)
    dx_up = -(b / a) * ymax_rel
    dx_dn = -dx_up
    yhi = np.where((dx_up >= xl) & (dx_up <= xr), np.maximum(yhi, ymax_rel), yhi)
    ylo = np.where((dx_dn >= xl) & (dx_dn <= xr), np.minimum(ylo, -ymax_rel), ylo)

    ty0, ty1 = _tile_span(ylo + my, yhi + my, tiles_y)
    # confine to the SnugBox rect so both strategies share one candidate domain
    ty0 = np.maximum(ty0, rect[splat, 2])
    ty1 = np.minimum(ty1, rect[splat, 3])
    nrows = np.maximum(0, ty1 - ty0 + 1)

    col, row_within = _expand_counts(nrows)
    ty = ty0[col] + row_within
    tile_ids = ty * tiles_x + tx[col]
    splat_rows = splat[col]
    return _build_index(tile_ids, splat_rows, batch.depths[splat_rows],
                        tiles_x, tiles_y)


def min_q_box(conics, rx0, rx1, ry0, ry1):
    """Exact minimum of q(d) = a dx^2 + 2b dx dy + c dy^2 over the closed box
    [rx0, rx1] x [ry0, ry1] given relative to the splat mean.

    The quadratic is convex, so the minimum is either the interior center or
    lies on one of the four edges, where the 1D minimizer clamps to the edge.
    """
    a, b, c = conics[:, 0], conics[:, 1], conics[:, 2]
    inside = (rx0 <= 0.0) & (0.0 <= rx1) & (ry0 <= 0.0) & (0.0 <= ry1)

    def q(dx, dy):
        return a * dx * dx + 2.0 * b * dx * dy + c * dy * dy

    y_at_x0 = np.clip(-(b / c) * rx0, ry0, ry1)
    y_at_x1 = np.clip(-(b / c) * rx1, ry0, ry1)
    x_at_y0 = np.clip(-(b / a) * ry0, rx0, rx1)
    x_at_y1 = np.clip(-(b / a) * ry1, rx0, rx1)
    edge_min = np.minimum(
        np.minimum(q(rx0, y_at_x0), q(rx1, y_at_x1)),
        np.minimum(q(x_at_y0, ry0), q(x_at_y1, ry1)),
    )
    return np.where(inside, 0.0, edge_min)


def _candidate_tiles(batch: SplatBatch):
    """All SnugBox-rect tiles, splat-major and column-major within a splat."""
    rect = batch.tile_rect
    ncols = np.maximum(0, rect[:, 1] - rect[:, 0] + 1)
    nrows = np.maximum(0, rect[:, 3] - rect[:, 2] + 1)
    counts = ncols * nrows
    splat, within = _expand_counts(counts)
    nr = nrows[splat]
    tx = rect[splat, 0] + within // nr
    ty = rect[splat, 2] + within % nr
    return splat, within, tx, ty


def bin_load_balanced(batch: SplatBatch, group_size: int = 32) -> TileIndex:
    """Group-testing strategy: each splat's candidate tiles are assigned
    round-robin to the lanes of a worker group; every lane runs the analytic
    box/ellipse test (min q <= t). Produces exactly bin_sequential's pairs.
    """
    _require_snugboxes(batch)
    tiles_x = -(-batch.width // TILE)
    tiles_y = -(-batch.height // TILE)
    if len(batch) == 0:
        return _build_index(np.empty(0, np.int64), np.empty(0, np.int64),
                            np.empty(0), tiles_x, tiles_y)

    splat, within, tx, ty = _candidate_tiles(batch)
    del within  # lane = within % group_size; assignment does not affect output
    mx = batch.means2d[splat, 0]
    my = batch.means2d[splat, 1]
    rx0 = TILE * tx - mx
    ry0 = TILE * ty - my
    q_min = min_q_box(batch.conics[splat], rx0, rx0 + TILE, ry0, ry0 + TILE)
    hit = q_min <= batch.level_t[splat]

    splat_rows = splat[hit]
    tile_ids = ty[hit] * tiles_x + tx[hit]
    return _build_index(tile_ids, splat_rows, batch.depths[splat_rows],
                        tiles_x, tiles_y)


def lane_test_counts(batch: SplatBatch, splat_row: int, group_size: int = 32):
    """How many candidate tiles each lane of the group tests for one splat."""
    _require_snugboxes(batch)
    rect = batch.tile_rect[splat_row]
    n = max(0, rect[1] - rect[0] + 1) * max(0, rect[3] - rect[2] + 1)
    counts = np.zeros(group_size, dtype=np.int64)
    full, rem = divmod(int(n), group_size)
    counts[:] = full
    counts[:rem] += 1
    return counts


def bin_aabb(batch: SplatBatch) -> TileIndex:
    """Radius-based baseline: a square of half-side sqrt(t * lambda_max)
    around the mean (the bounding circle of the same level set); every tile
    in the square's rectangle is emitted without an intersection test.
    """
    _require_snugboxes(batch)
    tiles_x = -(-batch.width // TILE)
    tiles_y = -(-batch.height // TILE)
    a, b, c = batch.conics[:, 0], batch.conics[:, 1], batch.conics[:, 2]
    lam_min_conic = (a + c) / 2.0 - np.sqrt(((a - c) / 2.0) ** 2 + b * b)
    radius = np.sqrt(batch.level_t / lam_min_conic)

    tx0, tx1 = _tile_span(batch.means2d[:, 0] - radius,
                          batch.means2d[:, 0] + radius, tiles_x)
    ty0, ty1 = _tile_span(batch.means2d[:, 1] - radius,
                          batch.means2d[:, 1] + radius, tiles_y)
    ncols = np.maximum(0, tx1 - tx0 + 1)
    nrows = np.maximum(0, ty1 - ty0 + 1)
    counts = ncols * nrows
    splat, within = _expand_counts(counts)
    nr = nrows[splat]
    tx = tx0[splat] + within // nr
    ty = ty0[splat] + within % nr
    tile_ids = ty * tiles_x + tx
    return _build_index(tile_ids, splat, batch.depths[splat], tiles_x, tiles_y)

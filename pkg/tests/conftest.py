"""Shared test helpers: batch builders, the dense-sampling tile oracle, and
finite-difference utilities."""

import numpy as np
import pytest

from tilesplat.binning import min_q_box
from tilesplat.projection import SplatBatch
from tilesplat.scene import TILE


def make_batch(conics, means, level_t, depths=None, opacities=None,
               width=128, height=128):
    """SplatBatch straight from 2D quantities (bypasses projection)."""
    conics = np.atleast_2d(np.asarray(conics, dtype=np.float64))
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    n = len(conics)
    level_t = np.broadcast_to(np.asarray(level_t, dtype=np.float64), (n,)).copy()
    if depths is None:
        depths = np.linspace(1.0, 2.0, n)
    if opacities is None:
        opacities = np.exp(level_t / 2.0) / 255.0  # invert t = 2 ln(255 o)
    return SplatBatch(
        means2d=means,
        conics=conics,
        level_t=level_t,
        depths=np.asarray(depths, dtype=np.float64),
        opacities=np.asarray(opacities, dtype=np.float64),
        source_ids=np.arange(n, dtype=np.int64),
        width=width,
        height=height,
    )


def oracle_tiles(conic, mean, t, width, height, step=0.25):
    """Dense-sampling oracle: rasterize the ellipse region at `step` pixel
    resolution and mark the tiles containing in-image sample points."""
    a, b, c = conic
    det = a * c - b * b
    ex = np.sqrt(c * t / det)
    ey = np.sqrt(a * t / det)
    xs = np.arange(mean[0] - ex, mean[0] + ex + step, step)
    ys = np.arange(mean[1] - ey, mean[1] + ey + step, step)
    if len(xs) == 0 or len(ys) == 0:
        xs = np.array([mean[0]])
        ys = np.array([mean[1]])
    dx = (xs - mean[0])[None, :]
    dy = (ys - mean[1])[:, None]
    q = a * dx * dx + 2 * b * dx * dy + c * dy * dy
    yy, xx = np.nonzero(q <= t)
    px, py = xs[xx], ys[yy]
    ok = (px >= 0) & (px <= width) & (py >= 0) & (py <= height)
    tx = np.clip(np.floor(px[ok] / TILE).astype(int), 0, -(-width // TILE) - 1)
    ty = np.clip(np.floor(py[ok] / TILE).astype(int), 0, -(-height // TILE) - 1)
    return set(zip(tx.tolist(), ty.tolist()))


def reconcile_tile_sets(analytic: set, sampled: set, conic, mean, t) -> bool:
    """Tile-set exactness per the binning invariant: the analytic set must
    cover every sampled tile, and any extra analytic tile must genuinely
    touch the level set (min q <= t, evaluated exactly)."""
    if not sampled <= analytic:
        return False
    extras = analytic - sampled
    if not extras:
        return True
    conics = np.tile(np.asarray(conic, dtype=np.float64), (len(extras), 1))
    rect = np.array(sorted(extras), dtype=np.float64) * TILE
    rx0 = rect[:, 0] - mean[0]
    ry0 = rect[:, 1] - mean[1]
    q = min_q_box(conics, rx0, rx0 + TILE, ry0, ry0 + TILE)
    return bool(np.all(q <= t))


def per_splat_tilesets(index, n_splats):
    """Extract each splat's tile set from a TileIndex."""
    tiles = index.tile_ids()
    out = [set() for _ in range(n_splats)]
    tx = tiles % index.tiles_x
    ty = tiles // index.tiles_x
    for x, y, v in zip(tx.tolist(), ty.tolist(), index.values.tolist()):
        out[v].add((x, y))
    return out


def central_difference(f, x, h=1e-4):
    """Dense central-difference gradient of scalar f at array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def assert_gradients_close(analytic, numeric, rel=1e-3, name=""):
    scale = max(np.abs(numeric).max(), 1e-10)
    err = np.abs(analytic - numeric).max() / scale
    assert err < rel, f"{name}: rel gradient error {err:.3e} >= {rel}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def write_scene_to_disk(scene, root):
    """Materialize an in-memory scene as COLMAP text + PNG images + PFM
    depth priors, as the CLI consumes them."""
    from tilesplat.ingest import (SparseReconstruction, write_colmap_text,
                                  write_pfm, write_png)

    root.mkdir(parents=True, exist_ok=True)
    colmap_dir = root / "sparse"
    images_dir = root / "images"
    depth_dir = root / "depth"
    images_dir.mkdir(exist_ok=True)
    depth_dir.mkdir(exist_ok=True)
    recon = SparseReconstruction(scene.cameras, scene.points, scene.colors)
    write_colmap_text(recon, colmap_dir)
    for cam in scene.cameras:
        write_png(images_dir / cam.name, cam.gt_image)
        if cam.depth_prior is not None:
            stem = cam.name.rsplit(".", 1)[0]
            write_pfm(depth_dir / f"{stem}.pfm", cam.depth_prior)
    return colmap_dir, images_dir, depth_dir

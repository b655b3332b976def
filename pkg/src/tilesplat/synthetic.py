"""Seeded synthetic inputs: random conic batches with controlled anisotropy
for the tiling benchmark, and fully self-consistent multi-view scenes
(ground-truth splats, camera ring, rendered GT images and depth priors) for
tests and demos."""

from __future__ import annotations

import numpy as np

from .ingest import Scene
from .projection import SplatBatch
from .scene import Camera, GaussianSet, inverse_sigmoid
from .trainer import TrainConfig, render_view


def random_splat_batch(n_splats: int, anisotropy: float = 1.0, seed: int = 0,
                       width: int = 640, height: int = 480,
                       sigma_range=(0.8, 4.0)) -> SplatBatch:
    """Random positive-definite conics at the requested anisotropy ratio,
    rotated uniformly, with opacity-derived level sets."""
    rng = np.random.default_rng(seed)
    means = np.stack([rng.uniform(0, width, n_splats),
                      rng.uniform(0, height, n_splats)], axis=1)
    minor = rng.uniform(*sigma_range, n_splats)
    major = minor * anisotropy
    theta = rng.uniform(0.0, np.pi, n_splats)
    ct, st = np.cos(theta), np.sin(theta)
    # covariance R diag(major^2, minor^2) R^T, inverted analytically
    inv1, inv2 = 1.0 / major**2, 1.0 / minor**2
    a = ct * ct * inv1 + st * st * inv2
    c = st * st * inv1 + ct * ct * inv2
    b = ct * st * (inv1 - inv2)
    opacities = rng.uniform(0.05, 0.98, n_splats)
    return SplatBatch(
        means2d=means,
        conics=np.stack([a, b, c], axis=1),
        level_t=np.maximum(0.0, 2.0 * np.log(255.0 * opacities)),
        depths=rng.uniform(0.1, 20.0, n_splats),
        opacities=opacities,
        source_ids=np.arange(n_splats, dtype=np.int64),
        width=width,
        height=height,
    )


def look_at_camera(eye, target, fx, width, height, up=(0.0, 1.0, 0.0),
                   name="") -> Camera:
    """Pinhole camera at `eye` looking at `target` (x right, y down, z fwd)."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-8:
        right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return Camera(fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0, width=width,
                  height=height, rotation=R, translation=-R @ eye, name=name)


def camera_ring(n_views: int, radius: float = 4.0, fx: float = 45.0,
                width: int = 48, height: int = 48, z_offset: float = 0.0,
                arc_degrees: float = 360.0):
    """Cameras on a ring (or an arc of it) looking at the origin."""
    cams = []
    full = abs(arc_degrees - 360.0) < 1e-9
    for i in range(n_views):
        span = np.deg2rad(arc_degrees)
        phi = (span * i / n_views if full
               else span * (i / max(n_views - 1, 1) - 0.5))
        eye = np.array([radius * np.sin(phi), z_offset, -radius * np.cos(phi)])
        cams.append(look_at_camera(eye, (0.0, 0.0, 0.0), fx, width, height,
                                   name=f"view_{i:04d}.png"))
    return cams


def random_gaussian_set(n_splats: int, seed: int = 0, spread: float = 0.8,
                        scale_range=(0.12, 0.3), opacity_range=(0.5, 0.9),
                        sh_degree: int = 0) -> GaussianSet:
    rng = np.random.default_rng(seed)
    colors = np.zeros((n_splats, (sh_degree + 1) ** 2, 3))
    colors[:, 0, :] = rng.uniform(0.15, 0.85, (n_splats, 3))
    if sh_degree > 0:
        colors[:, 1:, :] = rng.normal(0.0, 0.05, colors[:, 1:, :].shape)
    quats = rng.normal(0.0, 1.0, (n_splats, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    return GaussianSet(
        positions=rng.uniform(-spread, spread, (n_splats, 3)),
        log_scales=np.log(rng.uniform(*scale_range, (n_splats, 3))),
        rotations=quats,
        opacity_logits=inverse_sigmoid(rng.uniform(*opacity_range, n_splats)),
        colors=colors,
    )


def synthetic_scene(n_splats: int = 10, n_views: int = 5, width: int = 48,
                    height: int = 48, seed: int = 0, fx: float = 45.0,
                    with_depth: bool = True, background=(0.0, 0.0, 0.0),
                    arc_degrees: float = 360.0):
    """Self-consistent scene: GT splats rendered by the engine itself become
    the ground-truth images (and, optionally, exact depth priors).

    Returns (scene, gt_set). The scene's seed points are the GT positions.
    """
    gt_set = random_gaussian_set(n_splats, seed=seed)
    cams = camera_ring(n_views, fx=fx, width=width, height=height,
                       arc_degrees=arc_degrees)
    cfg = TrainConfig(round_profile="round2", max_iters=1, background=background)
    for cam in cams:
        vr = render_view(gt_set, cam, cfg, checkpoints=False)
        cam.gt_image = np.clip(vr.buffers.color, 0.0, 1.0)
        if with_depth:
            cam.depth_prior = vr.buffers.normalized_depth()
            cam.depth_valid = (vr.buffers.n_contrib > 0) & (cam.depth_prior > 0)
    extent = 4.0 * 1.1
    scene = Scene(cameras=cams,
                  points=gt_set.positions.copy(),
                  colors=(np.clip(gt_set.colors[:, 0, :], 0, 1) * 255).astype(np.uint8),
                  extent=extent)
    return scene, gt_set

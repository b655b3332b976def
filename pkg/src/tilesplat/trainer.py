"""Training orchestration: view sampling, render, loss, backward, optimizer,
densify/prune cadence, pose bake cadence, wall-clock budget stop, checkpoint
save, and PSNR evaluation.

Two round profiles mirror the two competition regimes: round1 (noisy poses:
pose refinement on, no depth supervision) and round2 (accurate poses: pose
refinement off, depth supervision on). Everything is overridable per config.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import binning, density, ingest, losses
from .backward import backward_per_gaussian, backward_per_pixel
from .forward import render
from .optim import Adam, position_lr
from .pose import PoseDelta, apply_delta, bake, compose, identity_delta
from .projection import project, project_vjp
from .scene import (Camera, GaussianSet, eval_sh, eval_sh_vjp,
                    inverse_sigmoid, validate)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


_PROFILE_DEFAULTS = {
    "round1": {"max_iters": 6000, "pose_opt": True, "depth_supervision": False},
    "round2": {"max_iters": 15000, "pose_opt": False, "depth_supervision": True},
}


@dataclass
class TrainConfig:
    round_profile: str = "round2"
    max_iters: int | None = None
    budget_seconds: float = 60.0
    pose_opt: bool | None = None
    depth_supervision: bool | None = None

    lambda_: float = 0.2
    depth_weight0: float = 0.1

    densify: bool = True
    densify_interval: int = 300
    densify_start: int = 500
    densify_end: int | None = None  # defaults to 0.8 * max_iters
    consistency_views: int = 10  # K
    error_tau: float = 0.5
    theta_plus: float = 16.0
    theta_minus: float = 0.9
    scale_split_threshold_frac: float = 0.01
    min_splats: int = 16

    pose_bake_interval: int = 300

    sh_degree: int = 0
    background: tuple = (0.0, 0.0, 0.0)
    near: float = 0.01
    seed: int = 0
    eval_interval: int = 100
    holdout_views: tuple = ()  # camera indices excluded from training and
    # used for PSNR evaluation; empty = evaluate on the training views
    deterministic: bool = True
    threads: int = 1
    binning_strategy: str = "sequential"  # sequential | load_balanced
    backward_path: str = "per_gaussian"  # per_gaussian | per_pixel
    init_opacity: float = 0.1
    lrs: dict = field(default_factory=dict)

    # CLI data paths; unused by in-memory training
    colmap_dir: str | None = None
    images_dir: str | None = None
    depth_dir: str | None = None
    output_dir: str | None = None
    depth_samples_per_view: int = 0

    def __post_init__(self):
        if self.round_profile not in _PROFILE_DEFAULTS:
            raise ValueError(f"unknown round_profile {self.round_profile!r}")
        prof = _PROFILE_DEFAULTS[self.round_profile]
        if self.max_iters is None:
            self.max_iters = prof["max_iters"]
        if self.pose_opt is None:
            self.pose_opt = prof["pose_opt"]
        if self.depth_supervision is None:
            self.depth_supervision = prof["depth_supervision"]
        if self.densify_end is None:
            self.densify_end = int(0.8 * self.max_iters)
        if self.budget_seconds <= 0:
            raise ValueError("budget_seconds must be > 0")

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path) as fh:
            data = json.load(fh)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, default=list)


@dataclass
class ViewRender:
    batch: object
    tiles: object
    colors: np.ndarray
    dirs: np.ndarray | None
    buffers: object
    contributions: object = None


@dataclass
class TrainResult:
    gset: GaussianSet
    metrics: list
    delta: PoseDelta
    baked_total: PoseDelta
    iterations: int
    elapsed: float
    stop_reason: str  # completed | budget
    eval_split: str = "train"


def init_gaussians(scene: ingest.Scene, sh_degree: int = 0,
                   init_opacity: float = 0.1) -> GaussianSet:
    """Seed splats from the scene's point cloud, 3DGS-style: isotropic with
    radius from the mean distance to the 3 nearest neighbors."""
    pts = np.asarray(scene.points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if n == 0:
        raise ValueError("cannot initialize from an empty point cloud")
    if n >= 4:
        dist, _ = cKDTree(pts).query(pts, k=4)
        radius = np.maximum(dist[:, 1:].mean(axis=1), 1e-7)
    else:
        radius = np.full(n, 0.1 * scene.extent)
    colors = np.zeros((n, (sh_degree + 1) ** 2, 3))
    colors[:, 0, :] = scene.colors / 255.0
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    return GaussianSet(
        positions=pts.copy(),
        log_scales=np.log(radius)[:, None].repeat(3, axis=1),
        rotations=rot,
        opacity_logits=np.full(n, inverse_sigmoid(init_opacity)),
        colors=colors,
    )


def _bin(batch, cfg: TrainConfig):
    if cfg.binning_strategy == "load_balanced":
        return binning.bin_load_balanced(batch)
    return binning.bin_sequential(batch)


def _splat_colors(gset, batch, camera, delta):
    """Per-row RGB (and view directions when SH degree > 0)."""
    if gset.sh_degree == 0:
        return gset.colors[batch.source_ids, 0, :], None
    R_eff, t_eff = apply_delta(camera, delta)
    center = -R_eff.T @ t_eff
    v = gset.positions[batch.source_ids] - center
    dirs = v / np.linalg.norm(v, axis=1, keepdims=True)
    return eval_sh(gset.colors[batch.source_ids], dirs), dirs


def render_view(gset: GaussianSet, camera: Camera, cfg: TrainConfig,
                delta: PoseDelta | None = None, *, checkpoints: bool = True,
                scoring: bool = False) -> ViewRender:
    batch = project(gset, camera, near=cfg.near, delta=delta)
    tiles = _bin(batch, cfg)
    colors, dirs = _splat_colors(gset, batch, camera, delta)
    out = render(batch, tiles, colors, cfg.background,
                 record_checkpoints=checkpoints, scoring=scoring)
    if scoring:
        bufs, contribs = out
        return ViewRender(batch, tiles, colors, dirs, bufs, contribs)
    return ViewRender(batch, tiles, colors, dirs, out)


def view_loss_and_grads(camera, cfg, vr: ViewRender, depth_weight: float):
    """Photometric + scheduled disparity loss, backpropagated to 2D splat
    gradients (Grad2D); the 3D/pose chain is applied by _full_grads."""
    bufs = vr.buffers
    report, grad_color = losses.photometric(bufs.color, camera.gt_image, cfg.lambda_)

    grad_depth = grad_final_T = None
    depth_loss = 0.0
    if depth_weight > 0.0 and camera.depth_prior is not None:
        mask = bufs.n_contrib > 0
        if camera.depth_valid is not None:
            mask &= camera.depth_valid
        d_norm = bufs.normalized_depth()
        depth_loss, g_dnorm = losses.disparity_loss(
            d_norm, camera.depth_prior, mask, depth_weight)
        # chain through d_norm = D / (1 - final_T)
        denom = 1.0 - bufs.final_T
        grad_depth = np.where(mask, g_dnorm / np.where(mask, denom, 1.0), 0.0)
        grad_final_T = np.where(mask, g_dnorm * bufs.depth
                                / np.where(mask, denom**2, 1.0), 0.0)

    if cfg.backward_path == "per_pixel":
        g2 = backward_per_pixel(bufs, vr.batch, vr.tiles, vr.colors, grad_color,
                                grad_depth, grad_final_T,
                                deterministic=cfg.deterministic)
    else:
        g2 = backward_per_gaussian(bufs, vr.batch, vr.tiles, vr.colors,
                                   grad_color, grad_depth, grad_final_T)

    report = losses.LossReport(
        l1=report.l1, ssim=report.ssim, photometric=report.photometric,
        depth_loss=depth_loss, total=report.photometric + depth_loss,
        lambda_=cfg.lambda_, depth_weight=depth_weight)
    return report, g2


def _full_grads(gset, camera, cfg, delta, vr, g2):
    """project_vjp plus the color/SH chain; returns a dict keyed like the
    optimizer groups."""
    g3, gpose = project_vjp(gset, camera, vr.batch, g2, near=cfg.near, delta=delta)
    grad_colors = np.zeros_like(gset.colors)
    src = vr.batch.source_ids
    if gset.sh_degree == 0:
        grad_colors[src, 0, :] = g2.d_colors
    else:
        g_coeff, g_dirs = eval_sh_vjp(gset.colors[src], vr.dirs, g2.d_colors)
        grad_colors[src] = g_coeff
        # unit-direction chain back to positions: d = v/|v|
        R_eff, t_eff = apply_delta(camera, delta)
        v = gset.positions[src] - (-R_eff.T @ t_eff)
        norm = np.linalg.norm(v, axis=1, keepdims=True)
        d = v / norm
        g_v = (g_dirs - d * np.einsum("ij,ij->i", g_dirs, d)[:, None]) / norm
        g3.positions[src] += g_v
    return {
        "positions": g3.positions,
        "log_scales": g3.log_scales,
        "rotations": g3.rotations,
        "opacity_logits": g3.opacity_logits,
        "colors": grad_colors,
        "pose_rot": gpose.rot_vec,
        "pose_trans": gpose.trans,
    }


def evaluate(gset: GaussianSet, cameras, cfg: TrainConfig | None = None,
             delta: PoseDelta | None = None) -> float:
    """Mean PSNR over the cameras' ground-truth images ([0,1], capped 99)."""
    cfg = cfg or TrainConfig()
    values = []
    for cam in cameras:
        if cam.gt_image is None:
            continue
        vr = render_view(gset, cam, cfg, delta, checkpoints=False)
        values.append(losses.psnr(vr.buffers.color, cam.gt_image))
    if not values:
        raise ValueError("no cameras with ground-truth images to evaluate")
    return float(np.mean(values))


def _densify_round(gset, scene, cfg, delta, rng, pool):
    """Sample K training views, render in scoring mode, return (s+, s-)."""
    k = cfg.consistency_views
    view_ids = pool[rng.integers(0, len(pool), size=k)]
    masks, pix, ids, e_photos = [], [], [], []
    for v in view_ids:
        cam = scene.cameras[int(v)]
        vr = render_view(gset, cam, cfg, delta, checkpoints=False, scoring=True)
        rep, _ = losses.photometric(vr.buffers.color, cam.gt_image, cfg.lambda_)
        masks.append(density.error_mask(vr.buffers.color, cam.gt_image, cfg.error_tau))
        pix.append(vr.contributions.pixel_idx)
        ids.append(vr.batch.source_ids[vr.contributions.splat_rows])
        e_photos.append(rep.photometric)
    s_plus = density.score_densify(masks, pix, ids, len(gset))
    s_minus = density.score_prune(masks, pix, ids, e_photos, len(gset))
    return s_plus, s_minus


def train(scene: ingest.Scene, cfg: TrainConfig, *, ply_path=None,
          metrics_path=None, decisions_path=None,
          initial: GaussianSet | None = None) -> TrainResult:
    """Run the full loop; terminates at max_iters or at the wall-clock budget
    (whichever first), always leaving a saved point cloud when ply_path is
    given. Budget expiry is a normal termination, not an error."""
    if not scene.cameras:
        raise ValueError("scene has no cameras")
    rng = np.random.default_rng(cfg.seed)
    gset = initial.copy() if initial is not None else init_gaussians(
        scene, cfg.sh_degree, cfg.init_opacity)

    holdout = set(int(i) for i in cfg.holdout_views)
    pool = np.array([i for i in range(len(scene.cameras)) if i not in holdout])
    if len(pool) == 0:
        raise ValueError("holdout_views leaves no training cameras")
    eval_cams = ([scene.cameras[i] for i in sorted(holdout)]
                 if holdout else scene.cameras)

    opt = Adam({k: v for k, v in cfg.lrs.items() if k != "positions"})
    pos_base_lr = cfg.lrs.get("positions", 1.6e-4 * scene.extent)
    delta = identity_delta() if cfg.pose_opt else None
    baked_total = identity_delta()
    metrics = []
    decision_rows = []
    stop_reason = "completed"
    start = time.perf_counter()
    iteration = 0

    while iteration < cfg.max_iters:
        iteration += 1
        cam = scene.cameras[int(pool[rng.integers(0, len(pool))])]
        depth_weight = (losses.depth_weight_schedule(iteration - 1, cfg.max_iters,
                                                     cfg.depth_weight0)
                        if cfg.depth_supervision else 0.0)

        vr = render_view(gset, cam, cfg, delta)
        report, g2 = view_loss_and_grads(cam, cfg, vr, depth_weight)
        if not np.isfinite(report.total):
            dump = {"iteration": iteration, "loss": report.total,
                    "l1": report.l1, "ssim": report.ssim,
                    "invariant_report": validate(gset)}
            if ply_path:
                Path(ply_path).with_suffix(".diverged.json").write_text(
                    json.dumps(dump, indent=2))
            raise TrainingDiverged(f"non-finite loss at iteration {iteration}", dump)

        grads = _full_grads(gset, cam, cfg, delta, vr, g2)
        params = {"positions": gset.positions, "log_scales": gset.log_scales,
                  "rotations": gset.rotations,
                  "opacity_logits": gset.opacity_logits, "colors": gset.colors}
        opt.step(params, grads,
                 {"positions": position_lr(pos_base_lr, iteration, cfg.max_iters)})
        if cfg.pose_opt:
            opt.step({"pose_rot": delta.rot_vec, "pose_trans": delta.trans},
                     {"pose_rot": grads["pose_rot"], "pose_trans": grads["pose_trans"]})
            delta.steps_since_bake += 1

        if (cfg.densify and cfg.densify_start <= iteration < cfg.densify_end
                and iteration % cfg.densify_interval == 0):
            s_plus, s_minus = _densify_round(gset, scene, cfg, delta, rng, pool)
            threshold = cfg.scale_split_threshold_frac * scene.extent
            gset, decisions = density.apply_decisions(
                gset, s_plus, s_minus, cfg.theta_plus, cfg.theta_minus,
                threshold, rng, min_splats=cfg.min_splats)
            opt.resize(decisions)
            decision_rows.append({
                "iter": iteration,
                "clones": sum(d.action == "clone" for d in decisions),
                "splits": sum(d.action == "split" for d in decisions),
                "prunes": sum(d.action == "prune" for d in decisions),
                "total": len(gset),
            })

        if cfg.pose_opt and delta.steps_since_bake >= cfg.pose_bake_interval:
            baked = bake(delta, scene.cameras)
            baked_total = compose(baked_total, baked)
            opt.reset_group("pose_rot")
            opt.reset_group("pose_trans")

        row = {"iter": iteration, "l1": report.l1, "ssim": report.ssim,
               "depth_loss": report.depth_loss, "total": report.total,
               "psnr": np.nan}
        if iteration % cfg.eval_interval == 0 or iteration == cfg.max_iters:
            row["psnr"] = evaluate(gset, eval_cams, cfg, delta)
        metrics.append(row)

        if time.perf_counter() - start > cfg.budget_seconds:
            stop_reason = "budget"
            break

    elapsed = time.perf_counter() - start
    result = TrainResult(gset=gset, metrics=metrics, delta=delta or identity_delta(),
                         baked_total=baked_total, iterations=iteration,
                         elapsed=elapsed, stop_reason=stop_reason,
                         eval_split="holdout" if holdout else "train")
    if ply_path:
        ingest.write_ply(gset, ply_path)
    if metrics_path:
        write_metrics_csv(metrics_path, metrics, eval_split=result.eval_split)
    if decisions_path:
        write_decisions_csv(decisions_path, decision_rows)
    return result


def write_metrics_csv(path, metrics, eval_split="train") -> None:
    with open(path, "w") as fh:
        fh.write(f"# eval split: {eval_split}\n")
        fh.write("iter,l1,ssim,depth_loss,total,psnr\n")
        for row in metrics:
            psnr = "" if np.isnan(row["psnr"]) else f"{row['psnr']:.6f}"
            fh.write(f"{row['iter']},{row['l1']:.8f},{row['ssim']:.8f},"
                     f"{row['depth_loss']:.8f},{row['total']:.8f},{psnr}\n")


def write_decisions_csv(path, rows) -> None:
    with open(path, "w") as fh:
        fh.write("iter,clones,splits,prunes,total\n")
        for row in rows:
            fh.write(f"{row['iter']},{row['clones']},{row['splits']},"
                     f"{row['prunes']},{row['total']}\n")

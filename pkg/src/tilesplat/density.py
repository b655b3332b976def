"""Multi-view score-guided densification and pruning.

Each densify round samples K training views, renders them in scoring mode,
and marks high-error pixels with a normalized error mask. A splat's
densification score s+ counts masked pixels it contributed to (averaged over
views); its pruning score s- weights those counts by each view's photometric
loss and is min-max normalized over splats. Scores are per-primitive because
the pixel sums are restricted to pixels the splat actually blended into
(contribution weight alpha * T >= 1/255).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import GaussianSet


@dataclass
class ErrorMask:
    mask: np.ndarray  # (H, W) bool, e > tau
    tau: float
    e: np.ndarray  # (H, W) min-max normalized error


@dataclass
class DensifyDecision:
    splat_id: int
    action: str  # keep | clone | split | prune
    s_plus: float
    s_minus: float


def error_mask(rendered, gt, tau: float) -> ErrorMask:
    """Channel-summed L1 error, min-max normalized per image, thresholded."""
    rendered = np.asarray(rendered, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if rendered.shape != gt.shape:
        raise ValueError(f"shape mismatch: {rendered.shape} vs {gt.shape}")
    err = np.abs(rendered - gt).sum(axis=2)
    lo, hi = err.min(), err.max()
    if hi > lo:
        e = (err - lo) / (hi - lo)
    else:
        e = np.zeros_like(err)  # constant error map: degenerate normalization
    return ErrorMask(mask=e > tau, tau=tau, e=e)


def _masked_counts(mask: ErrorMask, pixel_idx, splat_ids, n_splats):
    hits = mask.mask.reshape(-1)[pixel_idx]
    return np.bincount(splat_ids[hits], minlength=n_splats).astype(np.float64)


def score_densify(masks, pixel_indices, splat_id_lists, n_splats: int) -> np.ndarray:
    """s+ per splat: masked-pixel contribution counts averaged over the K
    sampled views. Inputs are parallel per-view lists."""
    k = len(masks)
    s_plus = np.zeros(n_splats)
    for mask, pix, ids in zip(masks, pixel_indices, splat_id_lists):
        s_plus += _masked_counts(mask, pix, ids, n_splats)
    return s_plus / max(k, 1)


def score_prune(masks, pixel_indices, splat_id_lists, e_photos,
                n_splats: int) -> np.ndarray:
    """s- per splat: photometric-loss-weighted masked counts, min-max
    normalized over splats (all-equal raw scores normalize to zero)."""
    raw = np.zeros(n_splats)
    for mask, pix, ids, e in zip(masks, pixel_indices, splat_id_lists, e_photos):
        raw += e * _masked_counts(mask, pix, ids, n_splats)
    lo, hi = (raw.min(), raw.max()) if n_splats else (0.0, 0.0)
    if hi > lo:
        return (raw - lo) / (hi - lo)
    return np.zeros(n_splats)


SPLIT_SCALE_SHRINK = np.log(1.6)


def apply_decisions(gset: GaussianSet, s_plus, s_minus, theta_plus: float,
                    theta_minus: float, scale_split_threshold: float,
                    rng: np.random.Generator, min_splats: int = 16):
    """Prune / clone / split per scores; returns (new set, decisions).

    Prune wins over densify. Small splats (max activated scale below the
    split threshold) are cloned in place; large ones are replaced by two
    children sampled from the parent's own distribution with scales / 1.6.
    The new set is laid out [survivors, clones, split children x2] so the
    optimizer can mirror the mutation from the decision list alone.
    """
    n = len(gset)
    s_plus = np.asarray(s_plus, dtype=np.float64)
    s_minus = np.asarray(s_minus, dtype=np.float64)

    prune = s_minus > theta_minus
    allowed = max(0, n - int(min_splats))
    if prune.sum() > allowed:  # floor guard: keep the worst offenders only
        order = np.lexsort((np.arange(n), -s_minus))
        keep_pruning = order[:allowed]
        prune = np.zeros(n, dtype=bool)
        prune[keep_pruning] = True

    densify = ~prune & (s_plus > theta_plus)
    max_scale = np.exp(gset.log_scales).max(axis=1)
    clone = densify & (max_scale < scale_split_threshold)
    split = densify & ~clone

    actions = np.full(n, "keep", dtype=object)
    actions[prune] = "prune"
    actions[clone] = "clone"
    actions[split] = "split"
    decisions = [DensifyDecision(i, actions[i], float(s_plus[i]), float(s_minus[i]))
                 for i in range(n)]

    survivors = ~prune & ~split
    parts = {
        name: [getattr(gset, name)[survivors], getattr(gset, name)[clone]]
        for name in ("positions", "log_scales", "rotations", "opacity_logits", "colors")
    }

    split_ids = np.flatnonzero(split)
    if len(split_ids):
        from .scene import quat_to_rotmat

        R = quat_to_rotmat(gset.rotations[split_ids])
        s = np.exp(gset.log_scales[split_ids])
        M = R * s[:, None, :]
        noise = rng.standard_normal((len(split_ids), 2, 3))
        child_pos = gset.positions[split_ids][:, None, :] + np.einsum(
            "mij,mkj->mki", M, noise)
        parts["positions"].append(child_pos.reshape(-1, 3))
        child_ls = np.repeat(gset.log_scales[split_ids] - SPLIT_SCALE_SHRINK, 2, axis=0)
        parts["log_scales"].append(child_ls)
        parts["rotations"].append(np.repeat(gset.rotations[split_ids], 2, axis=0))
        parts["opacity_logits"].append(np.repeat(gset.opacity_logits[split_ids], 2))
        parts["colors"].append(np.repeat(gset.colors[split_ids], 2, axis=0))

    new_set = GaussianSet(**{k: np.concatenate(v) for k, v in parts.items()})
    return new_set, decisions

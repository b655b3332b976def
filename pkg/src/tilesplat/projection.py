"""Per-view vertex stage: frustum culling and EWA projection of 3D Gaussians
to screen-space ellipses, plus the analytic vector-Jacobian product for the
backward pass (including gradients w.r.t. the shared pose delta).

Screen convention: pixel (ix, iy) has its center at (ix + 0.5, iy + 0.5);
projected means live in the same continuous pixel coordinates.

The per-splat footprint is the level set

    q(d) = a dx^2 + 2 b dx dy + c dy^2 <= t,     t = 2 ln(255 * opacity)

where {a, b, c} is the *conic* (inverse of the dilated 2D covariance) and
d is the offset from the projected mean. t is clamped at zero, so a splat
with opacity exactly 1/255 degenerates to its center point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .pose import PoseDelta, apply_delta, so3_left_jacobian
from .scene import Camera, GaussianSet, quat_to_rotmat

COV_DILATION = 0.3
MIN_OPACITY = 1.0 / 255.0


@dataclass
class SplatBatch:
    """Projected per-view state for the splats that survived culling.

    Rows are in source order; source_ids maps each row back into the
    GaussianSet. SnugBox fields are filled by the tile-binning stage.
    """

    means2d: np.ndarray  # (M, 2) pixel coords
    conics: np.ndarray  # (M, 3) {a, b, c}, pixel^-2
    level_t: np.ndarray  # (M,)
    depths: np.ndarray  # (M,) camera-frame z
    opacities: np.ndarray  # (M,) activated
    source_ids: np.ndarray  # (M,) int64
    width: int
    height: int
    # SnugBox extents and inclusive tile rectangle [tx0, tx1, ty0, ty1]
    x_min: np.ndarray | None = None
    x_max: np.ndarray | None = None
    y_min: np.ndarray | None = None
    y_max: np.ndarray | None = None
    tile_rect: np.ndarray | None = None  # (M, 4) int64

    def __len__(self):
        return len(self.means2d)


@dataclass
class Grad3D:
    """Full-set parameter gradients produced by project_vjp."""

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray


@dataclass
class PoseGrad:
    rot_vec: np.ndarray = field(default_factory=lambda: np.zeros(3))
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))


def _effective_pose(camera: Camera, delta: PoseDelta | None):
    return apply_delta(camera, delta)


def _geometry(gset: GaussianSet, camera: Camera, delta, near):
    """Shared forward intermediates for project and project_vjp."""
    R_eff, t_eff = _effective_pose(camera, delta)
    p_cam = gset.positions @ R_eff.T + t_eff
    o_all = gset.opacities()
    keep = (p_cam[:, 2] > near) & (o_all >= MIN_OPACITY)
    ids = np.flatnonzero(keep)

    X, Y, Z = p_cam[ids, 0], p_cam[ids, 1], p_cam[ids, 2]
    fx, fy = camera.fx, camera.fy
    m = len(ids)

    R_q = quat_to_rotmat(gset.rotations[ids]) if m else np.zeros((0, 3, 3))
    s = np.exp(gset.log_scales[ids])
    M_mat = R_q * s[:, None, :]  # R_q @ diag(s)
    Sigma3 = M_mat @ np.transpose(M_mat, (0, 2, 1))

    J = np.zeros((m, 2, 3))
    J[:, 0, 0] = fx / Z
    J[:, 0, 2] = -fx * X / Z**2
    J[:, 1, 1] = fy / Z
    J[:, 1, 2] = -fy * Y / Z**2

    A = J @ R_eff
    Sigma2 = A @ Sigma3 @ np.transpose(A, (0, 2, 1))
    Sigma2[:, 0, 0] += COV_DILATION
    Sigma2[:, 1, 1] += COV_DILATION

    return {
        "R_eff": R_eff, "t_eff": t_eff, "ids": ids, "X": X, "Y": Y, "Z": Z,
        "o": o_all[ids], "R_q": R_q, "s": s, "M_mat": M_mat,
        "Sigma3": Sigma3, "J": J, "A": A, "Sigma2": Sigma2,
    }


def project(gset: GaussianSet, camera: Camera, near: float = 0.01,
            delta: PoseDelta | None = None) -> SplatBatch:
    """Project the set into `camera`; splats behind the near plane or with
    activated opacity below 1/255 are culled. Output preserves source order."""
    g = _geometry(gset, camera, delta, near)
    ids, X, Y, Z = g["ids"], g["X"], g["Y"], g["Z"]
    Sigma2 = g["Sigma2"]

    means2d = np.stack([camera.fx * X / Z + camera.cx,
                        camera.fy * Y / Z + camera.cy], axis=1)
    s11, s12, s22 = Sigma2[:, 0, 0], Sigma2[:, 0, 1], Sigma2[:, 1, 1]
    det = s11 * s22 - s12 * s12
    conics = np.stack([s22 / det, -s12 / det, s11 / det], axis=1)
    level_t = np.maximum(0.0, 2.0 * np.log(255.0 * g["o"]))

    return SplatBatch(
        means2d=means2d,
        conics=conics,
        level_t=level_t,
        depths=Z.copy(),
        opacities=g["o"].copy(),
        source_ids=ids.astype(np.int64),
        width=camera.width,
        height=camera.height,
    )


def project_vjp(gset: GaussianSet, camera: Camera, batch: SplatBatch, grads2d,
                near: float = 0.01, delta: PoseDelta | None = None):
    """Backpropagate per-splat 2D gradients to 3D parameters and the pose.

    grads2d must expose d_means2d (M,2), d_conics (M,3), d_depths (M,),
    d_opacities (M,) aligned with `batch` rows (e.g. a raster Grad2D).
    Returns (Grad3D over the full set, PoseGrad for the delta).
    """
    g = _geometry(gset, camera, delta, near)
    ids = g["ids"]
    if not np.array_equal(ids, batch.source_ids):
        raise ValueError("batch does not match projection inputs (culling differs)")
    m = len(ids)

    grad = Grad3D(
        positions=np.zeros_like(gset.positions),
        log_scales=np.zeros_like(gset.log_scales),
        rotations=np.zeros_like(gset.rotations),
        opacity_logits=np.zeros_like(gset.opacity_logits),
    )
    pose_grad = PoseGrad()
    if m == 0:
        return grad, pose_grad

    fx, fy = camera.fx, camera.fy
    X, Y, Z = g["X"], g["Y"], g["Z"]
    A, J, Sigma3, M_mat, R_q, s = g["A"], g["J"], g["Sigma3"], g["M_mat"], g["R_q"], g["s"]
    R_eff = g["R_eff"]

    gm = np.asarray(grads2d.d_means2d, dtype=np.float64)
    gconic = np.asarray(grads2d.d_conics, dtype=np.float64)
    gdepth = np.asarray(grads2d.d_depths, dtype=np.float64)
    gopac = np.asarray(grads2d.d_opacities, dtype=np.float64)

    # conic -> 2D covariance: dC = -C dSigma C for C = Sigma^-1
    C = np.empty((m, 2, 2))
    C[:, 0, 0] = batch.conics[:, 0]
    C[:, 0, 1] = C[:, 1, 0] = batch.conics[:, 1]
    C[:, 1, 1] = batch.conics[:, 2]
    Gbar = np.empty((m, 2, 2))
    Gbar[:, 0, 0] = gconic[:, 0]
    Gbar[:, 0, 1] = Gbar[:, 1, 0] = 0.5 * gconic[:, 1]
    Gbar[:, 1, 1] = gconic[:, 2]
    G_Sigma = -C @ Gbar @ C

    # Sigma2 = A Sigma3 A^T + dilation
    G_A = 2.0 * (G_Sigma @ A @ Sigma3)
    G_Sigma3 = np.transpose(A, (0, 2, 1)) @ G_Sigma @ A
    G_J = G_A @ R_eff.T
    G_Reff = np.transpose(J, (0, 2, 1)) @ G_A  # (m, 3, 3), covariance path

    # camera-space point gradient: projection mean, Jacobian entries, depth
    inv_z = 1.0 / Z
    inv_z2 = inv_z * inv_z
    g_pcam = np.zeros((m, 3))
    g_pcam[:, 0] = gm[:, 0] * fx * inv_z - G_J[:, 0, 2] * fx * inv_z2
    g_pcam[:, 1] = gm[:, 1] * fy * inv_z - G_J[:, 1, 2] * fy * inv_z2
    g_pcam[:, 2] = (
        -gm[:, 0] * fx * X * inv_z2
        - gm[:, 1] * fy * Y * inv_z2
        + gdepth
        - G_J[:, 0, 0] * fx * inv_z2
        - G_J[:, 1, 1] * fy * inv_z2
        + G_J[:, 0, 2] * 2.0 * fx * X * inv_z2 * inv_z
        + G_J[:, 1, 2] * 2.0 * fy * Y * inv_z2 * inv_z
    )

    # Sigma3 = M M^T with M = R_q diag(s)
    G_M = 2.0 * (G_Sigma3 @ M_mat)
    G_Rq = G_M * s[:, None, :]
    grad_s = np.einsum("mij,mij->mj", G_M, R_q)
    grad.log_scales[ids] = grad_s * s

    # rotation matrix -> quaternion (with normalization chain)
    qhat = gset.rotations[ids]
    qnorm = np.linalg.norm(qhat, axis=1, keepdims=True)
    qhat = qhat / qnorm
    w, x, y, z = qhat[:, 0], qhat[:, 1], qhat[:, 2], qhat[:, 3]
    zeros = np.zeros(m)
    dR = np.empty((m, 4, 3, 3))
    dR[:, 0] = 2.0 * np.stack([zeros, -z, y, z, zeros, -x, -y, x, zeros], axis=1).reshape(m, 3, 3)
    dR[:, 1] = 2.0 * np.stack([zeros, y, z, y, -2 * x, -w, z, w, -2 * x], axis=1).reshape(m, 3, 3)
    dR[:, 2] = 2.0 * np.stack([-2 * y, x, w, x, zeros, z, -w, z, -2 * y], axis=1).reshape(m, 3, 3)
    dR[:, 3] = 2.0 * np.stack([-2 * z, -w, x, w, -2 * z, y, x, y, zeros], axis=1).reshape(m, 3, 3)
    grad_qhat = np.einsum("mij,mkij->mk", G_Rq, dR)
    proj = grad_qhat - np.einsum("mk,mk->m", grad_qhat, qhat)[:, None] * qhat
    grad.rotations[ids] = proj / qnorm

    # p_cam = R_eff p + t_eff
    grad.positions[ids] = g_pcam @ R_eff
    go = gopac * batch.opacities * (1.0 - batch.opacities)
    grad.opacity_logits[ids] = go

    # pose delta: R_eff = R_cam R_delta, t_eff = R_cam t_delta + t_cam
    G_Reff_sum = G_Reff.sum(axis=0) + g_pcam.T @ gset.positions[ids]
    pose_grad.trans = camera.rotation.T @ g_pcam.sum(axis=0)
    G_Rdelta = camera.rotation.T @ G_Reff_sum
    R_delta = delta.rotation() if delta is not None else np.eye(3)
    B = R_delta @ G_Rdelta.T
    g_omega = np.array([B[1, 2] - B[2, 1], B[2, 0] - B[0, 2], B[0, 1] - B[1, 0]])
    rot_vec = delta.rot_vec if delta is not None else np.zeros(3)
    pose_grad.rot_vec = so3_left_jacobian(rot_vec).T @ g_omega
    return grad, pose_grad

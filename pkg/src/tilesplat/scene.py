"""Canonical Gaussian and camera data types plus parameter activations.

All arrays are float64. A GaussianSet is a structure-of-arrays over N splats;
pre-activation storage (log scales, opacity logits, raw quaternions) keeps
optimizer steps well-scaled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TILE = 16


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def inverse_sigmoid(y):
    return np.log(y / (1.0 - y))


def quat_normalize(quats):
    """Normalize (..., 4) quaternions; zero-norm rows raise."""
    norms = np.linalg.norm(quats, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm quaternion")
    return quats / norms


def quat_to_rotmat(quats):
    """(N, 4) quaternions (w, x, y, z), not necessarily unit -> (N, 3, 3)."""
    q = quat_normalize(np.atleast_2d(np.asarray(quats, dtype=np.float64)))
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


@dataclass
class GaussianSet:
    """Structure-of-arrays of 3D Gaussian primitives (the optimized state).

    positions      (N, 3) world units
    log_scales     (N, 3) exp-activated to per-axis lengths
    rotations      (N, 4) quaternions (w, x, y, z); renormalized after each
                   optimizer step, normalized again inside every activation
    opacity_logits (N,)   sigmoid-activated to opacity in (0, 1)
    colors         (N, C, 3) spherical-harmonic coefficients; C = (deg+1)^2,
                   degree 0 means colors[:, 0, :] is plain RGB
    """

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(-1, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 4)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(-1)
        colors = np.asarray(self.colors, dtype=np.float64)
        if colors.ndim == 2:
            colors = colors[:, None, :]
        self.colors = colors
        n = len(self.positions)
        for name in ("log_scales", "rotations", "opacity_logits", "colors"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"field {name} has length {len(getattr(self, name))}, expected {n}")

    def __len__(self):
        return len(self.positions)

    @property
    def sh_degree(self):
        return int(round(np.sqrt(self.colors.shape[1]))) - 1

    def scales(self):
        return np.exp(self.log_scales)

    def opacities(self):
        return sigmoid(self.opacity_logits)

    def rotation_matrices(self):
        return quat_to_rotmat(self.rotations)

    def copy(self):
        return GaussianSet(
            self.positions.copy(),
            self.log_scales.copy(),
            self.rotations.copy(),
            self.opacity_logits.copy(),
            self.colors.copy(),
        )


def activate(gset: GaussianSet, index: int):
    """Activated (scale, opacity, rotation matrix) of one splat."""
    if not 0 <= index < len(gset):
        raise IndexError(f"splat index {index} out of range [0, {len(gset)})")
    scale = np.exp(gset.log_scales[index])
    opacity = float(sigmoid(gset.opacity_logits[index]))
    rot = quat_to_rotmat(gset.rotations[index : index + 1])[0]
    return scale, opacity, rot


def validate(gset: GaussianSet) -> list[str]:
    """Report violated invariants; empty list means the set is clean."""
    report = []
    named = [
        ("positions", gset.positions),
        ("log_scales", gset.log_scales),
        ("rotations", gset.rotations),
        ("opacity_logits", gset.opacity_logits),
        ("colors", gset.colors),
    ]
    for name, arr in named:
        bad = ~np.isfinite(arr.reshape(len(gset), -1)).all(axis=1)
        for i in np.flatnonzero(bad):
            report.append(f"splat {i}: non-finite {name}")
    norms = np.linalg.norm(gset.rotations, axis=1)
    for i in np.flatnonzero(~(norms > 0.0)):
        report.append(f"splat {i}: zero-norm quaternion")
    return report


@dataclass
class Camera:
    """Pinhole camera: intrinsics in pixels plus a world-to-camera rigid
    transform, optionally paired with a ground-truth image and a depth prior.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # (3, 3) world-to-camera
    translation: np.ndarray  # (3,)
    gt_image: np.ndarray | None = None  # (H, W, 3) in [0, 1]
    depth_prior: np.ndarray | None = None  # (H, W) world units, aligned scale
    depth_valid: np.ndarray | None = None  # (H, W) bool
    name: str = ""
    camera_id: int = 0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err >= 1e-5:
            raise ValueError(f"world_to_cam rotation not orthonormal (|R R^T - I|_inf = {err:.3g})")

    @property
    def tiles_x(self):
        return -(-self.width // TILE)

    @property
    def tiles_y(self):
        return -(-self.height // TILE)

    def center(self):
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_cam(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def replace_pose(self, rotation, translation):
        self.rotation = np.asarray(rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(translation, dtype=np.float64).reshape(3)


# Real spherical-harmonic basis; l=0 term is used directly (degree 0 == RGB).
_SH_C1 = 0.4886025119029199
_SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
          -1.0925484305920792, 0.5462742152960396)
_SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
          0.3731763325901154, -0.4570457994644658, 1.445305721320277,
          -0.5900435899266435)


def sh_basis(degree: int, dirs: np.ndarray) -> np.ndarray:
    """Basis values (N, (degree+1)^2) at unit directions; constant 1 for l=0."""
    dirs = np.atleast_2d(dirs)
    n = dirs.shape[0]
    out = np.empty((n, (degree + 1) ** 2))
    out[:, 0] = 1.0
    if degree >= 1:
        x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        out[:, 1] = -_SH_C1 * y
        out[:, 2] = _SH_C1 * z
        out[:, 3] = -_SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 4] = _SH_C2[0] * x * y
        out[:, 5] = _SH_C2[1] * y * z
        out[:, 6] = _SH_C2[2] * (2 * zz - xx - yy)
        out[:, 7] = _SH_C2[3] * x * z
        out[:, 8] = _SH_C2[4] * (xx - yy)
    if degree >= 3:
        out[:, 9] = _SH_C3[0] * y * (3 * xx - yy)
        out[:, 10] = _SH_C3[1] * x * y * z
        out[:, 11] = _SH_C3[2] * y * (4 * zz - xx - yy)
        out[:, 12] = _SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        out[:, 13] = _SH_C3[4] * x * (4 * zz - xx - yy)
        out[:, 14] = _SH_C3[5] * z * (xx - yy)
        out[:, 15] = _SH_C3[6] * x * (xx - 3 * yy)
    return out


def eval_sh(coeffs: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """View-dependent colors (N, 3) from SH coefficients (N, C, 3)."""
    degree = int(round(np.sqrt(coeffs.shape[1]))) - 1
    if degree == 0:
        return coeffs[:, 0, :].copy()
    basis = sh_basis(degree, dirs)
    return np.einsum("nc,ncd->nd", basis, coeffs)


def sh_basis_grad(degree: int, dirs: np.ndarray) -> np.ndarray:
    """d(basis)/d(dir): (N, (degree+1)^2, 3); the basis entries are polynomials."""
    dirs = np.atleast_2d(dirs)
    n = dirs.shape[0]
    g = np.zeros((n, (degree + 1) ** 2, 3))
    if degree >= 1:
        x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        g[:, 1, 1] = -_SH_C1
        g[:, 2, 2] = _SH_C1
        g[:, 3, 0] = -_SH_C1
    if degree >= 2:
        g[:, 4, 0] = _SH_C2[0] * y
        g[:, 4, 1] = _SH_C2[0] * x
        g[:, 5, 1] = _SH_C2[1] * z
        g[:, 5, 2] = _SH_C2[1] * y
        g[:, 6, 0] = _SH_C2[2] * (-2 * x)
        g[:, 6, 1] = _SH_C2[2] * (-2 * y)
        g[:, 6, 2] = _SH_C2[2] * (4 * z)
        g[:, 7, 0] = _SH_C2[3] * z
        g[:, 7, 2] = _SH_C2[3] * x
        g[:, 8, 0] = _SH_C2[4] * (2 * x)
        g[:, 8, 1] = _SH_C2[4] * (-2 * y)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        g[:, 9, 0] = _SH_C3[0] * 6 * x * y
        g[:, 9, 1] = _SH_C3[0] * 3 * (xx - yy)
        g[:, 10, 0] = _SH_C3[1] * y * z
        g[:, 10, 1] = _SH_C3[1] * x * z
        g[:, 10, 2] = _SH_C3[1] * x * y
        g[:, 11, 0] = _SH_C3[2] * (-2 * x * y)
        g[:, 11, 1] = _SH_C3[2] * (4 * zz - xx - 3 * yy)
        g[:, 11, 2] = _SH_C3[2] * 8 * y * z
        g[:, 12, 0] = _SH_C3[3] * (-6 * x * z)
        g[:, 12, 1] = _SH_C3[3] * (-6 * y * z)
        g[:, 12, 2] = _SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)
        g[:, 13, 0] = _SH_C3[4] * (4 * zz - 3 * xx - yy)
        g[:, 13, 1] = _SH_C3[4] * (-2 * x * y)
        g[:, 13, 2] = _SH_C3[4] * 8 * x * z
        g[:, 14, 0] = _SH_C3[5] * 2 * x * z
        g[:, 14, 1] = _SH_C3[5] * (-2 * y * z)
        g[:, 14, 2] = _SH_C3[5] * (xx - yy)
        g[:, 15, 0] = _SH_C3[6] * 3 * (xx - yy)
        g[:, 15, 1] = _SH_C3[6] * (-6 * x * y)
    return g


def eval_sh_vjp(coeffs, dirs, grad_color):
    """VJP of eval_sh: gradients w.r.t. coefficients and (unit) directions."""
    degree = int(round(np.sqrt(coeffs.shape[1]))) - 1
    grad_coeffs = np.zeros_like(coeffs)
    grad_dirs = np.zeros((coeffs.shape[0], 3))
    if degree == 0:
        grad_coeffs[:, 0, :] = grad_color
        return grad_coeffs, grad_dirs
    basis = sh_basis(degree, dirs)
    grad_coeffs[:] = basis[:, :, None] * grad_color[:, None, :]
    dbasis = sh_basis_grad(degree, dirs)
    grad_dirs[:] = np.einsum("nca,ncd,nd->na", dbasis, coeffs, grad_color)
    return grad_coeffs, grad_dirs

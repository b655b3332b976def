"""Global pose correction shared by every camera.

A single learnable rigid delta (axis-angle rotation + translation) acts on
world points before the stored world-to-camera transform:

    effective(x) = R_cam @ (exp(rot_vec) @ x + trans) + t_cam

The delta is periodically "baked" into all camera poses and reset to the
identity, so its rotation stays far from the pi singularity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scene import Camera


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rodrigues(rot_vec) -> np.ndarray:
    """exp of an axis-angle vector, Taylor-expanded near zero."""
    v = np.asarray(rot_vec, dtype=np.float64).reshape(3)
    angle = np.linalg.norm(v)
    K = skew(v)
    if angle < 1e-8:
        return np.eye(3) + K + 0.5 * (K @ K)
    s = np.sin(angle) / angle
    c = (1.0 - np.cos(angle)) / (angle * angle)
    return np.eye(3) + s * K + c * (K @ K)


def so3_log(R) -> np.ndarray:
    """Axis-angle vector of a rotation matrix (angle in [0, pi))."""
    R = np.asarray(R, dtype=np.float64)
    cos_angle = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    angle = np.arccos(cos_angle)
    if angle < 1e-8:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    if angle > np.pi - 1e-6:
        # near pi: recover the axis from the symmetric part
        A = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(A), 0.0, None))
        # fix signs against the off-diagonals
        i = int(np.argmax(axis))
        axis = A[i] / axis[i]
        axis /= np.linalg.norm(axis)
        return axis * angle
    vec = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return vec * angle / (2.0 * np.sin(angle))


def so3_left_jacobian(rot_vec) -> np.ndarray:
    """Left Jacobian of SO(3); maps d(rot_vec) to the left-multiplied tangent."""
    v = np.asarray(rot_vec, dtype=np.float64).reshape(3)
    angle = np.linalg.norm(v)
    K = skew(v)
    if angle < 1e-6:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    a2 = angle * angle
    return (np.eye(3)
            + ((1.0 - np.cos(angle)) / a2) * K
            + ((angle - np.sin(angle)) / (a2 * angle)) * (K @ K))


@dataclass
class PoseDelta:
    """Learnable world-frame correction {rotation, translation}."""

    rot_vec: np.ndarray = field(default_factory=lambda: np.zeros(3))
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))
    steps_since_bake: int = 0

    def __post_init__(self):
        self.rot_vec = np.asarray(self.rot_vec, dtype=np.float64).reshape(3)
        self.trans = np.asarray(self.trans, dtype=np.float64).reshape(3)

    def rotation(self):
        return rodrigues(self.rot_vec)

    def is_identity(self):
        return not (np.any(self.rot_vec) or np.any(self.trans))

    def transform_points(self, points):
        return np.asarray(points) @ self.rotation().T + self.trans

    def copy(self):
        return PoseDelta(self.rot_vec.copy(), self.trans.copy(), self.steps_since_bake)


def identity_delta() -> PoseDelta:
    return PoseDelta()


def apply_delta(camera: Camera, delta: PoseDelta | None):
    """Effective (rotation, translation) with the delta folded in.

    Points map as R_cam @ (R_delta @ x + t_delta) + t_cam, so the effective
    world-to-camera transform is (R_cam R_delta, R_cam t_delta + t_cam).
    """
    if delta is None or delta.is_identity():
        return camera.rotation.copy(), camera.translation.copy()
    R_d = delta.rotation()
    R_eff = camera.rotation @ R_d
    t_eff = camera.rotation @ delta.trans + camera.translation
    return R_eff, t_eff


def compose(first: PoseDelta, second: PoseDelta) -> PoseDelta:
    """Delta equivalent to applying `second` to points, then `first`."""
    R1, R2 = first.rotation(), second.rotation()
    R = R1 @ R2
    t = R1 @ second.trans + first.trans
    return PoseDelta(so3_log(R), t)


def bake(delta: PoseDelta, cameras) -> PoseDelta:
    """Fold the delta into every camera's stored pose and reset it.

    Returns a copy of the delta that was baked (for logging / composition).
    Optimizer moments for the delta must be reset by the caller.
    """
    baked = delta.copy()
    for cam in cameras:
        R_eff, t_eff = apply_delta(cam, delta)
        cam.replace_pose(R_eff, t_eff)
    delta.rot_vec[:] = 0.0
    delta.trans[:] = 0.0
    delta.steps_since_bake = 0
    return baked

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tilesplat.scene import (Camera, GaussianSet, activate, eval_sh,
                             eval_sh_vjp, inverse_sigmoid, quat_to_rotmat,
                             validate)

from conftest import central_difference


def simple_set(n=3):
    return GaussianSet(
        positions=np.zeros((n, 3)),
        log_scales=np.zeros((n, 3)),
        rotations=np.tile([1.0, 0, 0, 0], (n, 1)),
        opacity_logits=np.zeros(n),
        colors=np.full((n, 1, 3), 0.5),
    )


def test_activate_identity_cases():
    gset = simple_set()
    scale, opacity, rot = activate(gset, 0)
    assert np.allclose(scale, 1.0)  # exp(0) = 1
    assert opacity == pytest.approx(0.5)  # sigmoid(0)
    assert np.allclose(rot, np.eye(3))  # identity quaternion


def test_activate_index_out_of_range():
    with pytest.raises(IndexError):
        activate(simple_set(), 3)


@given(st.floats(-3, 3), st.floats(1e-6, 3))
@settings(max_examples=40, deadline=None)
def test_activate_monotone_in_log_scale(base, bump):
    gset = simple_set(2)
    gset.log_scales[0, :] = base
    gset.log_scales[1, :] = base + bump
    s0, _, _ = activate(gset, 0)
    s1, _, _ = activate(gset, 1)
    assert np.all(s1 > s0)


def test_rotation_matrices_orthonormal(rng):
    quats = rng.normal(0, 1, (50, 4))
    R = quat_to_rotmat(quats)
    err = np.abs(R @ np.transpose(R, (0, 2, 1)) - np.eye(3)).max()
    assert err < 1e-6
    assert np.allclose(np.linalg.det(R), 1.0, atol=1e-9)


def test_validate_clean_set():
    assert validate(simple_set()) == []


def test_validate_reports_nan_field():
    gset = simple_set()
    gset.positions[1, 2] = np.nan
    report = validate(gset)
    assert any("splat 1" in r and "positions" in r for r in report)


def test_validate_flags_zero_norm_quaternion():
    gset = simple_set()
    gset.rotations[2] = 0.0
    report = validate(gset)
    assert any("splat 2" in r and "quaternion" in r for r in report)


def test_camera_rejects_non_orthonormal_rotation():
    R = np.eye(3)
    R[0, 1] = 1e-3
    with pytest.raises(ValueError, match="orthonormal"):
        Camera(fx=50, fy=50, cx=16, cy=16, width=32, height=32,
               rotation=R, translation=np.zeros(3))


def test_camera_tile_counts_use_ceiling():
    cam = Camera(fx=50, fy=50, cx=20, cy=10, width=40, height=17,
                 rotation=np.eye(3), translation=np.zeros(3))
    assert cam.tiles_x == 3 and cam.tiles_y == 2


def test_mismatched_field_lengths_rejected():
    with pytest.raises(ValueError, match="length"):
        GaussianSet(np.zeros((3, 3)), np.zeros((2, 3)),
                    np.tile([1.0, 0, 0, 0], (3, 1)), np.zeros(3),
                    np.zeros((3, 1, 3)))


def test_eval_sh_degree0_is_plain_rgb(rng):
    coeffs = rng.uniform(0, 1, (5, 1, 3))
    dirs = rng.normal(0, 1, (5, 3))
    assert np.array_equal(eval_sh(coeffs, dirs), coeffs[:, 0, :])


@pytest.mark.parametrize("degree", [1, 2, 3])
def test_eval_sh_vjp_matches_finite_differences(degree, rng):
    n = 4
    coeffs = rng.normal(0, 0.5, (n, (degree + 1) ** 2, 3))
    dirs = rng.normal(0, 1, (n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    upstream = rng.normal(0, 1, (n, 3))

    g_coeff, g_dirs = eval_sh_vjp(coeffs, dirs, upstream)

    def loss_coeff(c):
        return float((eval_sh(c, dirs) * upstream).sum())

    num_c = central_difference(loss_coeff, coeffs.copy(), h=1e-6)
    assert np.abs(g_coeff - num_c).max() < 1e-6

    def loss_dirs(d):
        return float((eval_sh(coeffs, d) * upstream).sum())

    num_d = central_difference(loss_dirs, dirs.copy(), h=1e-6)
    assert np.abs(g_dirs - num_d).max() < 1e-5


def test_inverse_sigmoid_roundtrip():
    x = np.array([0.01, 0.3, 0.5, 0.9, 0.999])
    gset = simple_set(5)
    gset.opacity_logits[:] = inverse_sigmoid(x)
    assert np.allclose(gset.opacities(), x, atol=1e-12)

import numpy as np
import pytest

from tilesplat.pose import PoseDelta, rodrigues
from tilesplat.projection import project, project_vjp
from tilesplat.scene import Camera, GaussianSet, inverse_sigmoid

from conftest import assert_gradients_close


def make_camera(fx=60.0, fy=60.0, rotation=None, translation=None,
                width=64, height=64):
    return Camera(fx=fx, fy=fy, cx=width / 2, cy=height / 2, width=width,
                  height=height,
                  rotation=np.eye(3) if rotation is None else rotation,
                  translation=np.zeros(3) if translation is None else translation)


def single_splat_set(position, log_scale=0.0, opacity=0.5, quat=(1, 0, 0, 0)):
    return GaussianSet(
        positions=np.array([position], dtype=np.float64),
        log_scales=np.full((1, 3), log_scale),
        rotations=np.array([quat], dtype=np.float64),
        opacity_logits=np.array([inverse_sigmoid(opacity)]),
        colors=np.full((1, 1, 3), 0.5),
    )


def random_set(rng, n=5):
    return GaussianSet(
        positions=rng.normal(0, 0.3, (n, 3)) + [0, 0, 3.0],
        log_scales=np.log(rng.uniform(0.8, 1.4, (n, 3))),
        rotations=rng.normal(0, 1, (n, 4)),
        opacity_logits=inverse_sigmoid(rng.uniform(0.3, 0.6, n)),
        colors=rng.uniform(0.2, 0.8, (n, 1, 3)),
    )


class ConstGrads:
    """Fixed upstream weights so the projection VJP can be FD-checked on the
    scalar L = sum(w_mu mu) + sum(w_conic conic) + sum(w_d depth) + ..."""

    def __init__(self, rng, m):
        self.d_means2d = rng.normal(0, 1, (m, 2))
        self.d_conics = rng.normal(0, 1, (m, 3))
        self.d_depths = rng.normal(0, 1, m)
        self.d_opacities = rng.normal(0, 1, m)


def projection_scalar(gset, camera, grads, near=0.1, delta=None):
    batch = project(gset, camera, near=near, delta=delta)
    return (float((grads.d_means2d * batch.means2d).sum())
            + float((grads.d_conics * batch.conics).sum())
            + float((grads.d_depths * batch.depths).sum())
            + float((grads.d_opacities * batch.opacities).sum()))


def test_on_axis_isotropic_ewa():
    # identity pose, splat on the optical axis at z=1 with scale s:
    # Sigma2D is diagonal with entries (fx s)^2 + 0.3 and b = 0
    s = 0.02
    cam = make_camera(fx=100.0, fy=100.0)
    gset = single_splat_set([0, 0, 1.0], log_scale=np.log(s))
    batch = project(gset, cam, near=0.1)
    assert len(batch) == 1
    var = (100.0 * s) ** 2 + 0.3
    a, b, c = batch.conics[0]
    assert a == pytest.approx(1.0 / var, rel=1e-12)
    assert c == pytest.approx(1.0 / var, rel=1e-12)
    assert b == pytest.approx(0.0, abs=1e-15)
    assert np.allclose(batch.means2d[0], [cam.cx, cam.cy])
    assert batch.depths[0] == 1.0


def test_level_t_at_min_opacity_degenerates_to_zero():
    # opacity exactly at the 1/255 floor: emitted, with empty extent (t = 0)
    gset = single_splat_set([0, 0, 2.0])
    gset.opacity_logits[:] = inverse_sigmoid(1.0 / 255.0)
    o = gset.opacities()[0]
    batch = project(gset, make_camera(), near=0.1)
    if o >= 1.0 / 255.0:
        assert len(batch) == 1
        assert batch.level_t[0] == pytest.approx(0.0, abs=1e-12)
    else:  # sigmoid round-trip landed a ulp below the floor: culled
        assert len(batch) == 0


def test_below_min_opacity_is_culled():
    gset = single_splat_set([0, 0, 2.0], opacity=1.0 / 300.0)
    assert len(project(gset, make_camera(), near=0.1)) == 0


def test_level_t_at_full_opacity():
    gset = single_splat_set([0, 0, 2.0])
    gset.opacity_logits[:] = 40.0  # sigmoid saturates to 1.0 in float64
    batch = project(gset, make_camera(), near=0.1)
    assert batch.level_t[0] == pytest.approx(2.0 * np.log(255.0), rel=1e-15)
    assert batch.level_t[0] == pytest.approx(11.08252709, abs=1e-7)


def test_level_t_monotone_in_opacity():
    ops = np.linspace(0.01, 0.99, 25)
    gset = GaussianSet(
        positions=np.tile([0, 0, 2.0], (25, 1)),
        log_scales=np.zeros((25, 3)),
        rotations=np.tile([1.0, 0, 0, 0], (25, 1)),
        opacity_logits=inverse_sigmoid(ops),
        colors=np.full((25, 1, 3), 0.5),
    )
    t = project(gset, make_camera(), near=0.1).level_t
    assert np.all(np.diff(t) >= 0)


def test_behind_camera_emits_nothing():
    gset = single_splat_set([0, 0, -1.0])
    assert len(project(gset, make_camera(), near=0.1)) == 0
    at_near = single_splat_set([0, 0, 0.1])
    assert len(project(at_near, make_camera(), near=0.1)) == 0  # z > near strict


def test_conics_positive_definite_and_source_order(rng):
    gset = random_set(rng, 40)
    batch = project(gset, make_camera(), near=0.1)
    a, b, c = batch.conics[:, 0], batch.conics[:, 1], batch.conics[:, 2]
    assert np.all(a > 0) and np.all(c > 0) and np.all(a * c - b * b > 0)
    assert np.all(np.diff(batch.source_ids) > 0)
    assert np.all(batch.level_t >= 0)
    assert np.all(batch.depths > 0.1)


def test_vjp_zero_upstream_gives_zero_grads(rng):
    gset = random_set(rng)
    cam = make_camera()
    batch = project(gset, cam, near=0.1)
    zeros = ConstGrads(rng, len(batch))
    for arr in (zeros.d_means2d, zeros.d_conics, zeros.d_depths, zeros.d_opacities):
        arr[:] = 0.0
    g3, gpose = project_vjp(gset, cam, batch, zeros, near=0.1)
    for field in (g3.positions, g3.log_scales, g3.rotations, g3.opacity_logits,
                  gpose.rot_vec, gpose.trans):
        assert not np.any(field)


@pytest.mark.parametrize("with_delta", [False, True])
def test_vjp_matches_finite_differences(rng, with_delta):
    gset = random_set(rng)
    cam = make_camera(fx=55.0, fy=50.0,
                      rotation=rodrigues([0.05, -0.1, 0.02]),
                      translation=np.array([0.02, -0.03, 0.1]))
    delta = (PoseDelta(np.array([0.01, -0.02, 0.015]),
                       np.array([0.005, 0.01, -0.02])) if with_delta else None)
    batch = project(gset, cam, near=0.1, delta=delta)
    assert len(batch) == len(gset)
    grads = ConstGrads(rng, len(batch))
    g3, gpose = project_vjp(gset, cam, batch, grads, near=0.1, delta=delta)

    h = 1e-4

    def fd(array, column_of=None):
        out = np.zeros_like(array)
        flat, gf = array.reshape(-1), out.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = projection_scalar(gset, cam, grads, delta=delta)
            flat[i] = orig - h
            fm = projection_scalar(gset, cam, grads, delta=delta)
            flat[i] = orig
            gf[i] = (fp - fm) / (2 * h)
        return out

    assert_gradients_close(g3.positions, fd(gset.positions), 1e-3, "positions")
    assert_gradients_close(g3.log_scales, fd(gset.log_scales), 1e-3, "log_scales")
    assert_gradients_close(g3.rotations, fd(gset.rotations), 1e-3, "rotations")
    assert_gradients_close(g3.opacity_logits, fd(gset.opacity_logits), 1e-3,
                           "opacity_logits")
    if with_delta:
        assert_gradients_close(gpose.rot_vec, fd(delta.rot_vec), 1e-3, "rot_vec")
        assert_gradients_close(gpose.trans, fd(delta.trans), 1e-3, "trans")


def test_joint_translation_invariance_probe(rng):
    """Moving camera and splats by the same world vector keeps mu fixed, so
    the summed position gradient must cancel the delta-translation gradient
    along every direction (at identity delta: sum_i dL/dp_i == dL/dtau)."""
    gset = random_set(rng)
    cam = make_camera(rotation=rodrigues([0.2, 0.1, -0.3]),
                      translation=np.array([0.5, -0.2, 0.8]))
    batch = project(gset, cam, near=0.1)
    grads = ConstGrads(rng, len(batch))
    g3, gpose = project_vjp(gset, cam, batch, grads, near=0.1)
    assert np.allclose(g3.positions.sum(axis=0), gpose.trans, atol=1e-12)


def test_vjp_rejects_mismatched_batch(rng):
    gset = random_set(rng)
    cam = make_camera()
    batch = project(gset, cam, near=0.1)
    batch.source_ids = batch.source_ids[:-1]
    with pytest.raises(ValueError, match="culling"):
        project_vjp(gset, cam, batch, ConstGrads(rng, len(batch)), near=0.1)

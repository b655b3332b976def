import numpy as np
import pytest

from tilesplat.density import (apply_decisions, error_mask, score_densify,
                               score_prune)
from tilesplat.scene import GaussianSet, quat_to_rotmat


def small_set(rng, n=6, scale=0.1):
    quats = rng.normal(0, 1, (n, 4))
    return GaussianSet(
        positions=rng.normal(0, 1, (n, 3)),
        log_scales=np.full((n, 3), np.log(scale)),
        rotations=quats,
        opacity_logits=rng.normal(0, 1, n),
        colors=rng.uniform(0, 1, (n, 1, 3)),
    )


# --------------------------------------------------------------------------
# error masks


def test_perfect_render_empty_mask(rng):
    img = rng.uniform(0, 1, (8, 8, 3))
    em = error_mask(img, img.copy(), 0.5)
    assert not em.mask.any()
    assert np.all(em.e == 0.0)


def test_single_bad_pixel_masked_for_any_tau(rng):
    gt = rng.uniform(0.2, 0.8, (8, 8, 3))
    rendered = gt.copy()
    rendered[3, 5] += 0.15
    for tau in (0.1, 0.5, 0.99):
        em = error_mask(rendered, gt, tau)
        assert em.mask.sum() == 1 and em.mask[3, 5]


def test_minmax_normalization_values():
    # channel-summed errors {0.1, 0.2, 0.3} normalize to {0, 0.5, 1}
    gt = np.zeros((1, 3, 3))
    rendered = np.zeros((1, 3, 3))
    rendered[0, 0, 0] = 0.1
    rendered[0, 1, 0] = 0.2
    rendered[0, 2, 0] = 0.3
    em = error_mask(rendered, gt, 0.6)
    assert np.allclose(em.e[0], [0.0, 0.5, 1.0])
    assert list(em.mask[0]) == [False, False, True]


def test_constant_error_map_degenerates(rng):
    gt = np.zeros((4, 4, 3))
    rendered = np.full((4, 4, 3), 0.25)
    em = error_mask(rendered, gt, 0.5)
    assert not em.mask.any() and np.all(em.e == 0.0)


# --------------------------------------------------------------------------
# scores


def manual_mask(shape, hot):
    m = np.zeros(shape, bool)
    for y, x in hot:
        m[y, x] = True
    e = m.astype(float)

    class _M:  # duck-typed ErrorMask
        pass

    out = _M()
    out.mask = m
    out.e = e
    out.tau = 0.5
    return out


def test_score_densify_counts_masked_contributions():
    # K = 1 view, one splat contributing to 5 masked pixels: s+ = 5
    mask = manual_mask((8, 8), [(0, 0), (1, 1), (2, 2), (3, 3), (4, 4), (5, 5)])
    pix = np.array([0, 9, 18, 27, 36, 7])  # five masked + one unmasked pixel
    ids = np.zeros(6, dtype=np.int64)
    s_plus = score_densify([mask], [pix], [ids], n_splats=2)
    assert s_plus[0] == 5.0
    assert s_plus[1] == 0.0  # no masked contributions anywhere


def test_score_densify_averages_over_views():
    mask = manual_mask((4, 4), [(0, 0)])
    pix = np.array([0])
    ids = np.array([0])
    s = score_densify([mask, mask], [pix, pix], [ids, ids], n_splats=1)
    assert s[0] == pytest.approx(1.0)  # (1 + 1) / K with K = 2


def test_score_prune_minmax():
    mask = manual_mask((4, 4), [(0, 0), (0, 1)])
    pix = np.array([0, 1, 0])
    ids = np.array([0, 0, 1])  # raw counts: splat0 -> 2, splat1 -> 1
    s = score_prune([mask], [pix], [ids], e_photos=[2.0], n_splats=2)
    assert s[0] == 1.0 and s[1] == 0.0

    # all-equal raw scores normalize to zero (no pruning this round)
    s_eq = score_prune([mask], [np.array([0, 1])], [np.array([0, 1])],
                       e_photos=[1.0], n_splats=2)
    assert np.all(s_eq == 0.0)


def test_scores_match_exhaustive_recount(rng):
    n_splats, n_views = 5, 3
    shape = (16, 16)
    masks, pix, ids, e_photos = [], [], [], []
    for _ in range(n_views):
        hot = {(int(y), int(x)) for y, x in rng.integers(0, 16, (30, 2))}
        masks.append(manual_mask(shape, hot))
        m = rng.integers(5, 40)
        pix.append(rng.integers(0, 256, m))
        ids.append(rng.integers(0, n_splats, m))
        e_photos.append(float(rng.uniform(0.1, 1.0)))
    s_plus = score_densify(masks, pix, ids, n_splats)
    s_minus = score_prune(masks, pix, ids, e_photos, n_splats)

    raw_plus = np.zeros(n_splats)
    raw_minus = np.zeros(n_splats)
    for j in range(n_views):
        for p, i in zip(pix[j], ids[j]):
            if masks[j].mask.reshape(-1)[p]:
                raw_plus[i] += 1.0
                raw_minus[i] += e_photos[j]
    assert np.allclose(s_plus, raw_plus / n_views)
    span = raw_minus.max() - raw_minus.min()
    expect = (raw_minus - raw_minus.min()) / span if span > 0 else raw_minus * 0
    assert np.allclose(s_minus, expect)


# --------------------------------------------------------------------------
# apply_decisions


def test_all_below_thresholds_keeps_set(rng):
    gset = small_set(rng)
    new, decisions = apply_decisions(gset, np.zeros(6), np.zeros(6), 16.0, 0.9,
                                     1.0, rng)
    assert len(new) == 6
    assert all(d.action == "keep" for d in decisions)
    assert np.array_equal(new.positions, gset.positions)


def test_clone_small_splat(rng):
    gset = small_set(rng, scale=0.05)
    s_plus = np.array([20.0, 0, 0, 0, 0, 0])
    new, decisions = apply_decisions(gset, s_plus, np.zeros(6), 16.0, 0.9,
                                     scale_split_threshold=0.1, rng=rng)
    assert decisions[0].action == "clone"
    assert len(new) == 7  # grows by exactly one exact duplicate
    assert np.array_equal(new.positions[6], gset.positions[0])
    assert np.array_equal(new.colors[6], gset.colors[0])


def test_split_large_splat(rng):
    gset = small_set(rng, scale=0.5)
    s_plus = np.array([20.0, 0, 0, 0, 0, 0])
    new, decisions = apply_decisions(gset, s_plus, np.zeros(6), 16.0, 0.9,
                                     scale_split_threshold=0.1, rng=rng)
    assert decisions[0].action == "split"
    assert len(new) == 7  # net +1: parent removed, two children appended
    # parent position no longer present
    assert not np.any(np.all(new.positions == gset.positions[0], axis=1))
    children = new.positions[5:]
    assert np.allclose(np.exp(new.log_scales[5:]), 0.5 / 1.6)
    # children sampled from the parent's own distribution: within 3 sigma
    R = quat_to_rotmat(gset.rotations[0:1])[0]
    cov = R @ np.diag([0.25, 0.25, 0.25]) @ R.T
    inv = np.linalg.inv(cov)
    for child in children:
        d = child - gset.positions[0]
        assert d @ inv @ d <= 9.0 * 3  # loose 3-sigma envelope


def test_prune_wins_over_densify(rng):
    gset = small_set(rng)
    s_plus = np.full(6, 100.0)
    s_minus = np.array([1.0, 0, 0, 0, 0, 0])
    new, decisions = apply_decisions(gset, s_plus, s_minus, 16.0, 0.9, 1.0,
                                     rng, min_splats=2)
    assert decisions[0].action == "prune"
    assert sum(d.action == "clone" for d in decisions) == 5


def test_min_splats_floor(rng):
    gset = small_set(rng)
    s_minus = np.ones(6)  # everything above the prune threshold
    new, decisions = apply_decisions(gset, np.zeros(6), s_minus, 16.0, 0.9,
                                     1.0, rng, min_splats=4)
    assert len(new) == 4
    assert sum(d.action == "prune" for d in decisions) == 2


def test_count_arithmetic(rng):
    gset = small_set(rng, n=12, scale=0.05)
    gset.log_scales[6:] = np.log(0.5)  # half will split, half clone
    s_plus = np.full(12, 20.0)
    s_minus = np.zeros(12)
    s_minus[:3] = 1.0
    new, decisions = apply_decisions(gset, s_plus, s_minus, 16.0, 0.9,
                                     scale_split_threshold=0.1, rng=rng,
                                     min_splats=2)
    prunes = sum(d.action == "prune" for d in decisions)
    clones = sum(d.action == "clone" for d in decisions)
    splits = sum(d.action == "split" for d in decisions)
    assert len(new) == 12 - prunes + clones + 2 * splits - splits


def test_split_sampling_deterministic_under_seed(rng):
    gset = small_set(rng, scale=0.5)
    s_plus = np.array([20.0, 0, 0, 0, 0, 0])
    a, _ = apply_decisions(gset.copy(), s_plus, np.zeros(6), 16.0, 0.9, 0.1,
                           np.random.default_rng(42))
    b, _ = apply_decisions(gset.copy(), s_plus, np.zeros(6), 16.0, 0.9, 0.1,
                           np.random.default_rng(42))
    assert np.array_equal(a.positions, b.positions)

"""Masking strategy tests: octant math, removal counts, seeded determinism."""

from collections import Counter
from math import floor

import numpy as np
import pytest

from sfda_completion import masking


def rows(P):
    return Counter(map(tuple, np.asarray(P)))


def rand_cloud(rng, n):
    return rng.uniform(-0.5, 0.5, size=(n, 3))


def test_octant_of_examples():
    c = np.zeros(3)
    assert masking.octant_of(np.zeros(3), c) == 7  # ties go positive
    assert masking.octant_of(np.array([-1.0, 1.0, -1.0]), c) == 2
    assert masking.octant_of(np.array([1.0, 1.0, 1.0]), c) == 7
    assert masking.octant_of(np.array([-1.0, -1.0, -1.0]), c) == 0
    assert masking.octant_of(np.array([1.0, -1.0, 1.0]), c) == 5


def test_octants_vectorized_matches_scalar():
    rng = np.random.default_rng(0)
    P = rand_cloud(rng, 64)
    center = rng.uniform(-0.2, 0.2, size=3)
    vec = masking.octants_of(P, center)
    for i in range(64):
        assert vec[i] == masking.octant_of(P[i], center)


def test_partition_mask_removes_whole_admissible_octant():
    for seed in range(30):
        rng = np.random.default_rng(1000 + seed)
        P = rand_cloud(rng, int(rng.integers(40, 200)))
        n = P.shape[0]
        res = masking.partition_mask(P, seed)
        assert not res.warning
        center = (P.min(axis=0) + P.max(axis=0)) / 2.0
        occ = masking.octants_of(P, center)
        removed_count = int((occ == res.octant).sum())
        assert removed_count > 0
        assert res.points.shape[0] == n - removed_count
        assert res.points.shape[0] >= 0.25 * n
        # no survivor belongs to the removed octant
        assert (masking.octants_of(res.points, center) != res.octant).all()
        # survivors are a sub-multiset of the input
        assert rows(res.points) <= rows(P)


def test_partition_mask_deterministic_and_seed_sensitive():
    rng = np.random.default_rng(5)
    P = rand_cloud(rng, 120)
    a = masking.partition_mask(P, 42)
    b = masking.partition_mask(P, 42)
    assert a.octant == b.octant
    assert np.array_equal(a.points, b.points)
    octants = {masking.partition_mask(P, s).octant for s in range(40)}
    assert len(octants) > 1  # the choice actually varies with the seed


def test_partition_mask_fallback_on_degenerate_cloud():
    P = np.tile(np.array([[0.3, 0.3, 0.3]]), (16, 1))
    res = masking.partition_mask(P, 0)
    assert res.warning
    assert res.octant == masking.PARTITION_FALLBACK
    assert np.array_equal(res.points, P)


def test_view_mask_removes_exact_count_and_anchor():
    for seed in range(30):
        rng = np.random.default_rng(2000 + seed)
        n = int(rng.integers(8, 300))
        P = rand_cloud(rng, n)
        res = masking.view_mask(P, seed)
        m = floor(n / 8)
        assert res.points.shape[0] == n - m
        assert rows(res.points) <= rows(P)
        if m > 0:
            # the anchor is among the removed points
            assert rows(res.points)[tuple(res.anchor)] < rows(P)[tuple(res.anchor)]


def test_view_mask_removes_nearest_to_anchor():
    rng = np.random.default_rng(9)
    P = rand_cloud(rng, 80)
    res = masking.view_mask(P, 3, fraction=0.25)
    removed = rows(P) - rows(res.points)
    d = ((P - res.anchor) ** 2).sum(axis=1)
    cutoff = max(d[i] for i in range(80) if tuple(P[i]) in removed)
    kept_min = min(d[i] for i in range(80) if tuple(P[i]) not in removed)
    assert cutoff <= kept_min


def test_view_mask_small_cloud_removes_none():
    P = np.diag([1.0, 2.0, 3.0])  # 3 points, floor(3/8) == 0
    res = masking.view_mask(P, 0)
    assert np.array_equal(res.points, P)


def test_view_mask_fraction_validation():
    P = np.diag([1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        masking.view_mask(P, 0, fraction=1.0)
    with pytest.raises(ValueError):
        masking.view_mask(P, 0, fraction=-0.1)


def test_build_masked_set_structure():
    rng = np.random.default_rng(13)
    P = rand_cloud(rng, 160)
    for strategy in ("partition", "view"):
        ms = masking.build_masked_set(P, 3, strategy, seed=7)
        assert ms.k == 3
        assert np.array_equal(ms.clouds[0], P)
        assert ms.clouds[0] is not P  # defensive copy
        for i in range(1, 4):
            assert 0 < ms.clouds[i].shape[0] < P.shape[0]
            assert rows(ms.clouds[i]) <= rows(P)


def test_build_masked_set_views_are_independent_draws():
    rng = np.random.default_rng(17)
    P = rand_cloud(rng, 200)
    ms = masking.build_masked_set(P, 4, "view", seed=1)
    anchors = {tuple(r.anchor) for r in ms.results[1:]}
    assert len(anchors) > 1


def test_build_masked_set_deterministic():
    rng = np.random.default_rng(19)
    P = rand_cloud(rng, 100)
    a = masking.build_masked_set(P, 2, "partition", seed=5)
    b = masking.build_masked_set(P, 2, "partition", seed=5)
    for ca, cb in zip(a.clouds, b.clouds):
        assert np.array_equal(ca, cb)


def test_build_masked_set_k_zero():
    rng = np.random.default_rng(23)
    P = rand_cloud(rng, 50)
    ms = masking.build_masked_set(P, 0, "partition", seed=0)
    assert ms.k == 0
    assert len(ms.clouds) == 1


def test_build_masked_set_validation():
    rng = np.random.default_rng(29)
    P = rand_cloud(rng, 50)
    with pytest.raises(ValueError):
        masking.build_masked_set(P, -1, "partition", seed=0)
    with pytest.raises(ValueError):
        masking.build_masked_set(P, 1, "slices", seed=0)
    with pytest.raises(ValueError):
        masking.build_masked_set(P, 1, "partition", seed=-3)
    with pytest.raises(ValueError):
        masking.MaskedSet(clouds=[], results=[])
    with pytest.raises(ValueError):
        masking.MaskedSet(clouds=[P, P.copy()], results=[None, masking.MaskResult(P)])

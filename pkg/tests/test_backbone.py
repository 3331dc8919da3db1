"""Backbone tests: init contracts, forward shapes, invariance, gradients."""

import numpy as np
import pytest

from sfda_completion import autodiff as ad
from sfda_completion import backbone


TINY = backbone.BackboneConfig(
    encoder_widths=(6, 8),
    global_dim=8,
    coarse_points=4,
    expansion=4,
    decoder_hidden=8,
    refine_hidden=8,
    seed=0,
)


def test_init_deterministic_and_congruent():
    a = backbone.init_params(TINY)
    b = backbone.init_params(TINY)
    for name in a:
        assert np.array_equal(a[name].value, b[name].value)
    import dataclasses

    c = backbone.init_params(dataclasses.replace(TINY, seed=99))
    a.require_congruent(c)
    assert not np.array_equal(a["enc0_w"].value, c["enc0_w"].value)


def test_init_fan_in_bounds_and_zero_biases():
    cfg = backbone.BackboneConfig(seed=3)
    params = backbone.init_params(cfg)
    prev = 3
    for i, w in enumerate(cfg.encoder_widths):
        lim = 1.0 / np.sqrt(prev)
        assert np.abs(params[f"enc{i}_w"].value).max() <= lim
        assert np.array_equal(params[f"enc{i}_b"].value, np.zeros(w))
        prev = w
    assert np.abs(params["ref0_w"].value).max() <= 1.0 / np.sqrt(cfg.global_dim + 5)


def test_forward_shapes():
    params = backbone.init_params(TINY)
    cloud = np.random.default_rng(0).uniform(-0.5, 0.5, (20, 3))
    out = backbone.forward(params, cloud, TINY)
    assert out.coarse.value.shape == (4, 3)
    assert out.fine.value.shape == (16, 3)
    assert out.feature.value.shape == (8,)
    assert np.isfinite(out.fine.value).all()


def test_forward_permutation_invariant():
    cfg = backbone.BackboneConfig(seed=1)
    params = backbone.init_params(cfg)
    rng = np.random.default_rng(2)
    cloud = rng.uniform(-0.5, 0.5, (300, 3))
    out1 = backbone.forward(params, cloud, cfg)
    out2 = backbone.forward(params, cloud[rng.permutation(300)], cfg)
    assert np.abs(out1.fine.value - out2.fine.value).max() <= 1e-9
    assert np.abs(out1.feature.value - out2.feature.value).max() <= 1e-9


def test_forward_deterministic():
    params = backbone.init_params(TINY)
    cloud = np.random.default_rng(4).uniform(-0.5, 0.5, (25, 3))
    a = backbone.forward(params, cloud, TINY)
    b = backbone.forward(params, cloud, TINY)
    assert np.array_equal(a.fine.value, b.fine.value)
    assert np.array_equal(a.coarse.value, b.coarse.value)


def test_offsets_bounded_by_scale():
    params = backbone.init_params(TINY)
    cloud = np.random.default_rng(5).uniform(-0.5, 0.5, (30, 3))
    out = backbone.forward(params, cloud, TINY)
    rep = out.coarse.value[np.repeat(np.arange(4), 4)]
    assert np.abs(out.fine.value - rep).max() <= TINY.offset_scale


def test_grid_codes():
    codes = backbone.grid_codes(16, 0.05)
    assert codes.shape == (16, 2)
    assert codes.min() == -0.05 and codes.max() == 0.05
    assert len({tuple(c) for c in codes}) == 16
    assert backbone.grid_codes(3, 0.05).shape == (3, 2)


def test_backbone_gradients_finite_difference():
    params = backbone.init_params(TINY)
    rng = np.random.default_rng(6)
    cloud = rng.uniform(-0.5, 0.5, (6, 3))
    target = rng.uniform(-0.5, 0.5, (10, 3))

    def loss_fn(p):
        out = backbone.forward(p, cloud, TINY)
        tgt = ad.constant(target)
        l = ad.add(
            ad.mean_all(ad.min_sq_dists(out.fine, tgt)),
            ad.mean_all(ad.min_sq_dists(tgt, out.fine)),
        )
        return ad.add(l, ad.mean_all(ad.min_sq_dists(out.coarse, tgt)))

    report = ad.finite_diff_check(loss_fn, params, step=1e-6, tolerance=1e-4)
    assert report.passed, (report.max_rel_err, len(report.excluded))


def test_config_validation():
    with pytest.raises(ValueError):
        backbone.BackboneConfig(encoder_widths=())
    with pytest.raises(ValueError):
        backbone.BackboneConfig(coarse_points=0)
    with pytest.raises(ValueError):
        backbone.BackboneConfig(offset_scale=0.0)

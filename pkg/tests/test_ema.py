"""EMA blending tests: endpoints, convexity, congruence, trajectories."""

import numpy as np
import pytest

from sfda_completion import autodiff as ad
from sfda_completion.ema import ema_step
from sfda_completion.errors import CongruenceError


def pset(**arrays):
    return ad.ParameterSet.from_arrays(arrays)


def rand_pair(seed):
    rng = np.random.default_rng(seed)
    a = {"w": rng.standard_normal((4, 3)), "b": rng.standard_normal(5)}
    b = {"w": rng.standard_normal((4, 3)), "b": rng.standard_normal(5)}
    return pset(**a), pset(**b)


def test_worked_example():
    s = pset(v=np.array([2.0]))
    t = pset(v=np.array([4.0]))
    out = ema_step(s, t, 0.5)
    assert out["v"].value[0] == 3.0


def test_endpoints():
    s, t = rand_pair(0)
    keep = ema_step(s, t, 1.0)
    copy = ema_step(s, t, 0.0)
    for name in s:
        assert np.array_equal(keep[name].value, s[name].value)
        assert np.array_equal(copy[name].value, t[name].value)


def test_convex_combination_bounds():
    s, t = rand_pair(1)
    for eta in (0.1, 0.5, 0.93):
        out = ema_step(s, t, eta)
        for name in s:
            lo = np.minimum(s[name].value, t[name].value)
            hi = np.maximum(s[name].value, t[name].value)
            assert (out[name].value >= lo - 1e-15).all()
            assert (out[name].value <= hi + 1e-15).all()


def test_fixed_point_to_rounding():
    # eta*x + (1-eta)*x is x up to one rounding of the two products
    s, _ = rand_pair(2)
    out = ema_step(s, s, 0.7)
    for name in s:
        rel = np.abs(out[name].value - s[name].value) / np.abs(s[name].value)
        assert rel.max() <= 1e-15


def test_returns_fresh_snapshot():
    s, t = rand_pair(3)
    s_before = s.to_arrays()
    out = ema_step(s, t, 0.9)
    out["w"].value[0, 0] = 123.0
    assert np.array_equal(s["w"].value, s_before["w"])
    assert s.congruent_with(out)


def test_two_step_trajectory_matches_hand_unrolled():
    s, t1 = rand_pair(4)
    _, t2 = rand_pair(5)
    eta = 0.999
    one = ema_step(s, t1, eta)
    two = ema_step(one, t2, eta)
    for name in s:
        h1 = eta * s[name].value + (1.0 - eta) * t1[name].value
        h2 = eta * h1 + (1.0 - eta) * t2[name].value
        assert np.array_equal(two[name].value, h2)


def test_eta_validation():
    s, t = rand_pair(6)
    with pytest.raises(ValueError):
        ema_step(s, t, -0.01)
    with pytest.raises(ValueError):
        ema_step(s, t, 1.01)


def test_congruence_errors_list_mismatches():
    s = pset(w=np.ones((2, 2)), b=np.ones(3))
    t = pset(w=np.ones((2, 3)), c=np.ones(3))
    with pytest.raises(CongruenceError) as ei:
        ema_step(s, t, 0.5)
    msg = str(ei.value)
    assert "w" in msg and "b" in msg and "c" in msg

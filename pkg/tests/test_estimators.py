import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from rsgm.estimators import (DEFAULT_GRID, GridDensity, PeriodicKDE, kde_fit, loglinear_fit,
                             scott_bandwidth, sphere_kde_fit, target_on_grid, torus_grid,
                             tv_distance, tv_vs_target)
from rsgm.heat_kernel import hk_torus
from rsgm.manifold import Sphere, Torus
from rsgm.sampler import forward_sample, reset_probability_experiment
from rsgm.streams import stream
from rsgm.targets import TorusGMM, default_torus_gmm, sample_p0

# direct summation of |1 - k| over the 1024 cell centres at 30 digits (mpmath)
TV_UNIFORM_VS_WG005_1024 = 1.5092972655793379


def wrapped_gaussian(sigma, mean=0.37, d=1):
    return TorusGMM(np.array([1.0]), np.full((1, d), mean), np.array([sigma]))


def uniform_grid(res, d=1):
    return GridDensity.from_values(np.ones((res,) * d), 1.0 / res**d)


def test_grid_density_contract():
    with pytest.raises(ValueError):
        GridDensity(np.ones(4), np.full(4, 0.5))
    with pytest.raises(ValueError):
        GridDensity(np.array([-1.0, 3.0]), np.full(2, 0.5))
    g = GridDensity.from_values(np.arange(1.0, 5.0), 0.25)
    assert g.mass == pytest.approx(1.0) and g.raw_mass == pytest.approx(2.5)
    assert torus_grid(2, 4).shape == (4, 4, 2)


def test_kde_single_atom_is_wrapped_gaussian():
    kde = kde_fit(np.full((200, 1), 0.9), bandwidth=0.05)
    x = np.linspace(0, 1, 37, endpoint=False)[:, None]
    ref = hk_torus(0.05**2, np.array([0.9]), x).value
    np.testing.assert_allclose(kde(x), ref, rtol=1e-12)


def test_kde_uniform_samples_flat():
    x = Torus(1).uniform_sample(stream(1), 100_000)
    g = kde_fit(x).on_grid(64)
    assert np.max(np.abs(g.values - 1.0)) < 0.05
    assert abs(g.raw_mass - 1.0) < 1e-3


@pytest.mark.parametrize("d", [1, 2, 3])
def test_kde_grid_matches_pointwise(d):
    x = sample_p0(default_torus_gmm(d), stream(2), 500)
    kde = kde_fit(x, bandwidth=0.07)
    res = {1: 32, 2: 16, 3: 8}[d]
    g = kde.on_grid(res)
    direct = kde(torus_grid(d, res).reshape(-1, d)).reshape((res,) * d)
    np.testing.assert_allclose(g.values * g.raw_mass, direct, rtol=1e-10)
    assert abs(g.raw_mass - 1.0) < 1e-3


def test_kde_preconditions():
    with pytest.raises(ValueError):
        kde_fit(np.random.default_rng(0).random((99, 1)))
    with pytest.raises(ValueError):
        kde_fit(np.random.default_rng(0).random((200, 4)))
    with pytest.raises(ValueError):
        PeriodicKDE(np.zeros((200, 1)), 0.0)


def test_scott_bandwidth_uses_circular_std():
    x = sample_p0(default_torus_gmm(2), stream(3), 5000)
    circ = stats.circstd(x, high=1.0, low=0.0, axis=0)
    assert scott_bandwidth(x) == pytest.approx(np.mean(circ) * 5000 ** (-1 / 6), rel=1e-10)


def test_tv_examples():
    p = target_on_grid(wrapped_gaussian(0.05, 0.5), 0.0, 1024)
    assert tv_distance(p, p) == 0.0
    a = GridDensity.from_values(np.r_[np.ones(8), np.zeros(8)], 1 / 16)
    b = GridDensity.from_values(np.r_[np.zeros(8), np.ones(8)], 1 / 16)
    assert tv_distance(a, b) == pytest.approx(2.0)
    assert tv_distance(uniform_grid(1024), p) == pytest.approx(TV_UNIFORM_VS_WG005_1024, rel=1e-12)
    with pytest.raises(ValueError):
        tv_distance(uniform_grid(64), uniform_grid(128))
    with pytest.raises(ValueError):
        tv_distance(uniform_grid(8, 2), uniform_grid(64))


grid_values = st.lists(st.floats(0.0, 10.0), min_size=16, max_size=16).filter(lambda v: sum(v) > 1e-3)


@settings(max_examples=200, deadline=None)
@given(grid_values, grid_values, grid_values)
def test_tv_metric_properties(a, b, c):
    p, q, r = (GridDensity.from_values(np.array(v), 1 / 16) for v in (a, b, c))
    assert tv_distance(p, q) == tv_distance(q, p)
    assert tv_distance(p, r) <= tv_distance(p, q) + tv_distance(q, r) + 1e-12
    assert 0.0 <= tv_distance(p, q) <= 2.0 + 1e-12
    assert (tv_distance(p, q) == 0.0) == bool(np.array_equal(p.values, q.values))


@pytest.mark.parametrize("sigma", [0.05, 0.1])
def test_tv_grid_discretisation_halves(sigma):
    fine = 8192
    ref = target_on_grid(wrapped_gaussian(sigma), 0.0, fine)
    errs = []
    for res in [64, 128, 256, 512]:
        coarse = target_on_grid(wrapped_gaussian(sigma), 0.0, res)
        errs.append(tv_distance(GridDensity.from_values(np.repeat(coarse.values, fine // res), 1 / fine), ref))
    for a, b in zip(errs, errs[1:]):
        assert 0.7 * 2 <= a / b <= 1.3 * 2


def test_tv_vs_target_noise_floor_and_extremes():
    tg = default_torus_gmm(1)
    exact = forward_sample(Torus(1), tg, 0.01, stream(4), size=200_000)
    tv, info = tv_vs_target(exact, tg, 0.01, 256)
    assert tv < 0.05
    assert info["grid_resolution"] == 256 and info["n_samples"] == 200_000
    narrow = wrapped_gaussian(0.02, 0.5)
    assert tv_vs_target(Torus(1).uniform_sample(stream(5), 20_000), narrow, 0.0)[0] > 1.5
    small, _ = tv_vs_target(Torus(1).uniform_sample(stream(6), 100), tg, 0.01)
    assert 0.0 <= small <= 2.0
    assert DEFAULT_GRID == {1: 256, 2: 128, 3: 48}


def test_kde_converges_with_n():
    tg = default_torus_gmm(1)
    x = sample_p0(tg, stream(7), 1_000_000)
    tvs = [tv_vs_target(x[:n], tg, 0.0)[0] for n in (10_000, 100_000, 1_000_000)]
    assert tvs[0] > tvs[1] > tvs[2]


def test_sphere_kde():
    x = Sphere(2).uniform_sample(stream(8), 20_000)
    g = sphere_kde_fit(x, 0.2).on_grid(32)
    assert abs(g.raw_mass - 1.0) < 1e-2
    assert np.max(np.abs(g.values * 4 * math.pi - 1.0)) < 0.15
    with pytest.raises(ValueError):
        sphere_kde_fit(x[:50])


def test_loglinear_examples():
    xs = np.array([5.0, 6, 7, 8, 9])
    fit = loglinear_fit(xs, np.exp(-3 * xs))
    assert fit.slope == pytest.approx(-3, abs=1e-10) and fit.r_squared == pytest.approx(1, abs=1e-10)
    const = loglinear_fit(xs, np.full(5, 0.3))
    assert const.slope == pytest.approx(0.0, abs=1e-12) and 0.0 <= const.r_squared <= 1.0
    dropped = loglinear_fit(xs, np.array([0.1, 0.0, 0.03, 0.01, 0.0]))
    assert dropped.n_dropped == 2 and dropped.n_used == 3
    with pytest.raises(ValueError):
        loglinear_fit(xs, np.array([0.1, 0, 0, 0.01, 0]))
    with pytest.raises(ValueError):
        loglinear_fit([1.0, 1.0, 2.0], [1.0, 2.0, 3.0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(1e-6, 1.0), min_size=5, max_size=5), st.floats(1e-3, 1e3))
def test_loglinear_scale_invariance(ys, c):
    xs = np.arange(5.0)
    a = loglinear_fit(xs, np.array(ys))
    b = loglinear_fit(xs, c * np.array(ys))
    assert b.slope == pytest.approx(a.slope, abs=1e-12)
    assert b.r_squared == pytest.approx(a.r_squared, abs=1e-12)
    assert b.intercept == pytest.approx(a.intercept + math.log(c), abs=1e-9)


def test_loglinear_on_single_step_reset_data():
    hs = [0.04, 0.0278, 0.0204, 0.0156, 0.0123]
    rows = reset_probability_experiment(Torus(2), default_torus_gmm(2), hs, M=100_000, seed=2,
                                        score="zero", n_steps=1)
    fit = loglinear_fit([h**-0.5 for h in hs], [r["reset_fraction"] for r in rows])
    assert fit.slope < 0 and fit.r_squared > 0.95
    assert fit.slope == pytest.approx(-0.5, abs=0.1)

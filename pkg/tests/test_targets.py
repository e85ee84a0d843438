import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rsgm.heat_kernel import hk_sphere, hk_torus
from rsgm.manifold import Sphere, Torus
from rsgm.targets import (ScorePerturbation, SphereHKMixture, TorusGMM, default_sphere_mixture,
                          default_target, default_torus_gmm, density_t, log_density_t,
                          perturbed_score, responsibilities, sample_p0, score_t, target_from_dict)

# theta series |n| <= 50 at 40 digits (mpmath)
KW_004_0 = 1.9947262692023107


def single(mean, sigma, d=1):
    return TorusGMM(np.array([1.0]), np.full((1, d), mean), np.array([sigma]))


def random_torus_mixture(rng, d, k=3):
    w = rng.dirichlet(np.ones(k))
    w[-1] = 1.0 - w[:-1].sum()
    return TorusGMM(w, rng.random((k, d)), rng.uniform(0.05, 0.3, k))


def random_sphere_mixture(rng, k=3):
    w = rng.dirichlet(np.ones(k))
    w[-1] = 1.0 - w[:-1].sum()
    return SphereHKMixture(w, Sphere(2).uniform_sample(rng, k), rng.uniform(0.02, 0.5, k))


def sphere_quadrature(n_c=400, n_phi=800):
    c, wc = np.polynomial.legendre.leggauss(n_c)
    phi = 2 * math.pi * np.arange(n_phi) / n_phi
    s = np.sqrt(1 - c**2)
    pts = np.stack(np.broadcast_arrays(s[:, None] * np.cos(phi), s[:, None] * np.sin(phi), c[:, None]), -1)
    w = np.broadcast_to(wc[:, None] * (2 * math.pi / n_phi), pts.shape[:-1])
    return pts.reshape(-1, 3), w.reshape(-1)


def test_validation():
    with pytest.raises(ValueError):
        TorusGMM(np.array([0.5, 0.6]), np.zeros((2, 1)), np.ones(2))
    with pytest.raises(ValueError):
        TorusGMM(np.array([1.0]), np.zeros((1, 1)), np.array([0.0]))
    with pytest.raises(ValueError):
        TorusGMM(np.array([]), np.zeros((0, 1)), np.array([]))
    with pytest.raises(ValueError):
        SphereHKMixture(np.array([1.0]), np.array([[0.0, 0, 1]]), np.array([1e-5]))
    with pytest.raises(ValueError):
        ScorePerturbation("deterministic", -1.0)


def test_defaults_and_roundtrip():
    g = default_torus_gmm(2)
    np.testing.assert_array_equal(g.weights, [0.5, 0.3, 0.2])
    np.testing.assert_array_equal(g.sigmas, 0.05)
    m = g.means
    for i in range(3):
        for j in range(i + 1, 3):
            assert Torus(2).distance(m[i], m[j]) >= 0.25
    assert default_target(Sphere(2)).to_dict() == default_sphere_mixture().to_dict()
    assert default_target(Torus(2)).to_dict() == g.to_dict()
    for tg in [g, default_sphere_mixture()]:
        back = target_from_dict(tg.to_dict())
        assert back.to_dict() == tg.to_dict()


def test_density_examples():
    tg = single(0.5, 0.2)
    assert density_t(tg, 0.0, np.array([0.5])) == pytest.approx(KW_004_0, rel=1e-13)
    assert density_t(tg, 0.0, np.array([0.5])) == pytest.approx(1.994711, abs=2e-5)
    rng = np.random.default_rng(0)
    x = rng.random((50, 2))
    np.testing.assert_allclose(density_t(default_torus_gmm(2), 50.0, x), 1.0, atol=1e-6)
    xs = Sphere(2).uniform_sample(rng, 50)
    np.testing.assert_allclose(density_t(default_sphere_mixture(), 50.0, xs), 1 / (4 * math.pi), atol=1e-6)


def test_duplicate_components_equal_single():
    a = single(0.3, 0.07, d=2)
    b = TorusGMM(np.array([0.5, 0.5]), np.full((2, 2), 0.3), np.array([0.07, 0.07]))
    x = np.random.default_rng(1).random((100, 2))
    for t in [0.0, 0.1]:
        np.testing.assert_allclose(density_t(a, t, x), density_t(b, t, x), rtol=1e-13)
        np.testing.assert_allclose(score_t(a, t, x).components, score_t(b, t, x).components, atol=1e-10)


def test_density_matches_kernel_definition():
    tg = default_sphere_mixture()
    rng = np.random.default_rng(3)
    x = Sphere(2).uniform_sample(rng, 20)
    t = 0.2
    ref = sum(w * hk_sphere(s + t, x @ mu).value for w, mu, s in zip(tg.weights, tg.centers, tg.widths))
    np.testing.assert_allclose(density_t(tg, t, x), ref, rtol=1e-10)


@pytest.mark.parametrize("t", [0.0, 0.1, 1.0])
def test_density_integrates_to_one(t):
    axis = (np.arange(4096) + 0.5) / 4096
    assert np.mean(density_t(default_torus_gmm(1), t, axis[:, None])) == pytest.approx(1.0, abs=1e-6)
    g2 = (np.arange(512) + 0.5) / 512
    pts = np.stack(np.meshgrid(g2, g2, indexing="ij"), -1).reshape(-1, 2)
    assert np.mean(density_t(default_torus_gmm(2), t, pts)) == pytest.approx(1.0, abs=1e-6)
    pts, w = sphere_quadrature()
    assert np.sum(w * density_t(default_sphere_mixture(), t, pts)) == pytest.approx(1.0, abs=1e-6)


def test_heat_flow_consistency_torus():
    tg = default_torus_gmm(1)
    s, t = 0.05, 0.1
    z = (np.arange(2048) / 2048)[:, None]
    x = np.array([[0.13], [0.5], [0.91]])
    ps = density_t(tg, s, z)
    for xi in x:
        conv = np.mean(ps * hk_torus(t, z, xi).value)
        assert conv == pytest.approx(float(density_t(tg, s + t, xi)), abs=1e-6)


def test_score_symmetry_examples():
    tg = single(0.4, 0.1, d=3)
    np.testing.assert_allclose(score_t(tg, 0.2, np.full(3, 0.4)).components, 0.0, atol=1e-12)
    tg = TorusGMM(np.array([0.5, 0.5]), np.array([[0.25], [0.75]]), np.array([0.1, 0.1]))
    assert abs(score_t(tg, 0.1, np.array([0.5])).components[0]) < 1e-12
    sm = SphereHKMixture(np.array([1.0]), np.array([[0.0, 0, 1]]), np.array([0.1]))
    np.testing.assert_allclose(score_t(sm, 0.3, np.array([0.0, 0, 1])).components, 0.0, atol=1e-12)


def fd_score(target, t, x, eps=1e-5):
    m = target.manifold
    if isinstance(m, Torus):
        g = np.zeros(m.dim)
        for j in range(m.dim):
            e = np.zeros(m.dim)
            e[j] = eps
            g[j] = (log_density_t(target, t, m.project(x + e)) - log_density_t(target, t, m.project(x - e))) / (2 * eps)
        return g
    frame = m.orthonormal_frame(x).columns
    g = np.zeros(3)
    for j in range(2):
        e = frame[:, j]
        lp = log_density_t(target, t, m.exp_map(x, eps * e))
        lm = log_density_t(target, t, m.exp_map(x, -eps * e))
        g += (lp - lm) / (2 * eps) * e
    return g


def score_fd_suite(kind, n=1000, seed=0):
    """Worst relative error of analytic scores against central differences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        if kind == "sphere":
            tg = random_sphere_mixture(rng)
        else:
            tg = random_torus_mixture(rng, int(rng.integers(1, 4)))
        t = float(rng.uniform(0.01, 2.0))
        x = tg.manifold.uniform_sample(rng)
        g = score_t(tg, t, x).components
        fd = fd_score(tg, t, x)
        worst = max(worst, np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-2))
    return worst


def test_score_finite_difference_torus2():
    rng = np.random.default_rng(4)
    tg = random_torus_mixture(rng, 2)
    for _ in range(50):
        x = rng.random(2)
        g = score_t(tg, 0.3, x).components
        np.testing.assert_allclose(g, fd_score(tg, 0.3, x), rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("kind", ["torus", "sphere"])
def test_score_finite_difference_random(kind):
    assert score_fd_suite(kind, n=300, seed=1) < 1e-5


def test_score_is_tangent_on_sphere():
    rng = np.random.default_rng(6)
    x = Sphere(2).uniform_sample(rng, 200)
    v = score_t(default_sphere_mixture(), 0.05, x)
    assert np.max(np.abs(np.sum(v.components * x, axis=-1))) < 1e-10
    np.testing.assert_array_equal(v.base, x)


def test_responsibilities():
    rng = np.random.default_rng(7)
    for tg in [default_torus_gmm(2), default_sphere_mixture()]:
        x = tg.manifold.uniform_sample(rng, 1000)
        for t in [0.0 if isinstance(tg, TorusGMM) else 0.001, 0.1, 3.0]:
            r = responsibilities(tg, t, x)
            assert np.all((r >= 0) & (r <= 1))
            np.testing.assert_allclose(r.sum(axis=-1), 1.0, atol=1e-12)


def test_perturbation():
    tg = default_torus_gmm(1)
    x = np.random.default_rng(0).random((500, 1))
    none = perturbed_score(tg, ScorePerturbation(), 0.1, x).components
    np.testing.assert_array_equal(none, score_t(tg, 0.1, x).components)
    p = ScorePerturbation.deterministic(0.7, 3)
    diff = perturbed_score(tg, p, 0.1, x).components - none
    assert np.max(np.linalg.norm(diff, axis=-1)) <= 0.7 + 1e-15
    grid = (np.arange(4096) / 4096)[:, None]
    eps = ScorePerturbation.deterministic(0.5, 1).field(Torus(1), 0.1, grid)
    assert np.mean(np.sum(eps**2, axis=-1)) == pytest.approx(0.125, abs=1e-12)
    xs = Sphere(2).uniform_sample(np.random.default_rng(1), 300)
    e = p.field(Sphere(2), 0.3, xs)
    assert np.max(np.linalg.norm(e, axis=-1)) <= 0.7 + 1e-15
    assert np.max(np.abs(np.sum(e * xs, axis=-1))) < 1e-12


def test_sample_p0_degenerate():
    tg = default_torus_gmm(2)
    tg = TorusGMM(tg.weights, tg.means, np.full(3, 1e-6))
    x = sample_p0(tg, np.random.default_rng(0), 1000)
    d = np.min(np.stack([Torus(2).distance(x, m) for m in tg.means]), axis=0)
    assert d.max() < 1e-5


def test_sample_p0_circular_mean():
    x = sample_p0(single(0.3, 0.1), np.random.default_rng(1), 100_000)
    ang = np.angle(np.mean(np.exp(2j * math.pi * x[:, 0]))) / (2 * math.pi)
    assert ang == pytest.approx(0.3, abs=0.01)
    assert np.all((x >= 0) & (x < 1))


def test_sample_p0_sphere_wide_is_uniform():
    tg = SphereHKMixture(np.array([1.0]), np.array([[0.0, 0, 1]]), np.array([50.0]))
    x = sample_p0(tg, np.random.default_rng(2), 100_000)
    assert Sphere(2).is_point(x)
    assert np.linalg.norm(x.mean(axis=0)) < 0.02


def test_sample_p0_sphere_radius_law():
    mu = Sphere(2).project(np.array([0.3, -0.5, 0.8]))
    tg = SphereHKMixture(np.array([1.0]), mu[None], np.array([0.1]))
    x = sample_p0(tg, np.random.default_rng(3), 100_000)
    c = x @ mu
    pts, w = sphere_quadrature()
    ref = np.sum(w * (pts @ mu) * density_t(tg, 0.0, pts))
    se = c.std() / math.sqrt(len(c))
    assert abs(c.mean() - ref) < 4 * se
    # isotropy around the centre: the tangential mean vanishes
    tang = x - c[:, None] * mu
    assert np.linalg.norm(tang.mean(axis=0)) < 4 * math.sqrt(0.2 / len(c))


@settings(max_examples=60, deadline=None)
@given(st.floats(0.0, 1.0, exclude_max=True), st.floats(0.0, 3.0))
def test_density_positive_and_finite(x, t):
    tg = default_torus_gmm(1)
    v = density_t(tg, t, np.array([x]))
    assert v > 0 and math.isfinite(v)
    assert math.isfinite(score_t(tg, max(t, 1e-3), np.array([x])).components[0])

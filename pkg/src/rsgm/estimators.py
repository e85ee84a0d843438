"""Distributional diagnostics: periodic KDE, grid densities, TV, log-linear fits.

Total variation follows the unhalved convention ``TV(p, q) = int |p - q|``,
so values range over ``[0, 2]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .heat_kernel import relative_image_count
from .manifold import Sphere, Torus
from .targets import Target, density_t

DEFAULT_GRID = {1: 256, 2: 128, 3: 48}
_CHUNK = 8192


@dataclass(frozen=True)
class GridDensity:
    """Density values on a quadrature grid with per-cell measures.

    ``sum(values * cell_measure)`` must equal 1 within 1e-6.
    """

    values: np.ndarray
    cell_measure: np.ndarray
    raw_mass: float = 1.0

    def __post_init__(self):
        if np.any(self.values < 0):
            raise ValueError("density values must be nonnegative")
        if abs(self.mass - 1.0) > 1e-6:
            raise ValueError(f"grid density has mass {self.mass!r}, expected 1")

    @property
    def mass(self) -> float:
        return float(np.sum(self.values * self.cell_measure))

    @classmethod
    def from_values(cls, values, cell_measure) -> "GridDensity":
        values = np.asarray(values, dtype=float)
        cell_measure = np.broadcast_to(np.asarray(cell_measure, dtype=float), values.shape)
        raw = float(np.sum(values * cell_measure))
        return cls(values / raw, cell_measure, raw)


def torus_grid(d: int, resolution: int) -> np.ndarray:
    """Cell centres of the regular grid on T^d, shape ``(G,)*d + (d,)``."""
    axis = (np.arange(resolution) + 0.5) / resolution
    return np.stack(np.meshgrid(*([axis] * d), indexing="ij"), axis=-1)


def sphere_grid(n_lat: int, n_lon: int):
    """Latitude-longitude cell centres on S^2 and exact cell areas."""
    edges = np.linspace(0.0, math.pi, n_lat + 1)
    theta = 0.5 * (edges[1:] + edges[:-1])
    phi = 2.0 * math.pi * (np.arange(n_lon) + 0.5) / n_lon
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    pts = np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], axis=-1)
    band = (np.cos(edges[:-1]) - np.cos(edges[1:])) * (2.0 * math.pi / n_lon)
    return pts, np.broadcast_to(band[:, None], th.shape)


def target_on_grid(target: Target, t: float, resolution=None) -> GridDensity:
    """``density_t`` of a target sampled on the default grid of its manifold."""
    manifold = target.manifold
    if isinstance(manifold, Torus):
        d = manifold.dim
        res = resolution or DEFAULT_GRID[d]
        pts = torus_grid(d, res)
        vals = density_t(target, t, pts.reshape(-1, d)).reshape(pts.shape[:-1])
        return GridDensity.from_values(vals, 1.0 / res**d)
    n_lat = resolution or 64
    pts, area = sphere_grid(n_lat, 2 * n_lat)
    vals = density_t(target, t, pts.reshape(-1, 3)).reshape(area.shape)
    return GridDensity.from_values(vals, area)


# ---------------------------------------------------------------------------
# kernel density estimation


def circular_std(samples: np.ndarray) -> np.ndarray:
    """Per-coordinate circular standard deviation for unit-period data."""
    ang = 2.0 * math.pi * np.asarray(samples, dtype=float)
    R = np.hypot(np.cos(ang).mean(axis=0), np.sin(ang).mean(axis=0))
    return np.sqrt(-2.0 * np.log(np.clip(R, 1e-300, 1.0))) / (2.0 * math.pi)


def _wrapped_kernel_matrix(points: np.ndarray, grid: np.ndarray, bw: float) -> np.ndarray:
    """``k(bw^2; grid_a - points_s)``, shape ``(len(points), len(grid))``."""
    var = bw * bw
    n_wrap = 3 if bw < 0.3 else relative_image_count(var)
    delta = grid[None, :] - points[:, None]
    delta = delta - np.round(delta)
    out = np.zeros(delta.shape)
    norm = 1.0 / math.sqrt(2.0 * math.pi * var)
    for n in range(-n_wrap, n_wrap + 1):
        out += np.exp(-(delta + n) ** 2 / (2.0 * var))
    return out * norm


@dataclass(frozen=True)
class PeriodicKDE:
    samples: np.ndarray
    bandwidth: float

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        if self.samples.ndim != 2 or not 1 <= self.samples.shape[1] <= 3:
            raise ValueError("PeriodicKDE supports T^d with d <= 3")

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        total = np.zeros(len(x))
        for start in range(0, len(self.samples), _CHUNK):
            chunk = self.samples[start:start + _CHUNK]
            prod = np.ones((len(chunk), len(x)))
            for j in range(self.dim):
                prod *= _wrapped_kernel_matrix(chunk[:, j], x[:, j], self.bandwidth)
            total += prod.sum(axis=0)
        return total / len(self.samples)

    def on_grid(self, resolution: int | None = None) -> GridDensity:
        """KDE on the regular cell-centre grid, exploiting the product kernel."""
        d = self.dim
        res = resolution or DEFAULT_GRID[d]
        axis = (np.arange(res) + 0.5) / res
        acc = np.zeros((res,) * d)
        chunk = _CHUNK if d < 3 else 1024
        for start in range(0, len(self.samples), chunk):
            part = self.samples[start:start + chunk]
            K = [_wrapped_kernel_matrix(part[:, j], axis, self.bandwidth) for j in range(d)]
            if d == 1:
                acc += K[0].sum(axis=0)
            elif d == 2:
                acc += K[0].T @ K[1]
            else:
                pair = (K[0][:, :, None] * K[1][:, None, :]).reshape(len(part), -1)
                acc += (pair.T @ K[2]).reshape(res, res, res)
        acc /= len(self.samples)
        return GridDensity.from_values(acc, 1.0 / res**d)


def scott_bandwidth(samples: np.ndarray) -> float:
    n, d = samples.shape
    return float(np.mean(circular_std(samples))) * n ** (-1.0 / (d + 4))


def kde_fit(samples, bandwidth="scott") -> PeriodicKDE:
    """Periodic KDE with a wrapped Gaussian kernel.

    ``bandwidth`` is ``"scott"`` (circular standard deviation, averaged over
    coordinates, times ``n^(-1/(d+4))``) or a fixed positive float.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    n, d = samples.shape
    if n < 100:
        raise ValueError(f"kde_fit needs at least 100 samples, got {n}")
    if d > 3:
        raise ValueError("kde_fit supports d <= 3")
    bw = scott_bandwidth(samples) if bandwidth == "scott" else float(bandwidth)
    return PeriodicKDE(samples, bw)


@dataclass(frozen=True)
class SphereKDE:
    """Von Mises-Fisher kernel density estimate on S^2; bandwidth in radians."""

    samples: np.ndarray
    bandwidth: float

    @property
    def kappa(self) -> float:
        return 1.0 / self.bandwidth**2

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        k = self.kappa
        # kappa / (4 pi sinh kappa) * exp(kappa c), written without overflow
        log_norm = math.log(k / (2.0 * math.pi)) - math.log1p(-math.exp(-2.0 * k))
        total = np.zeros(len(x))
        for start in range(0, len(self.samples), _CHUNK):
            c = self.samples[start:start + _CHUNK] @ x.T
            total += np.exp(k * (c - 1.0)).sum(axis=0)
        return np.exp(log_norm) * total / len(self.samples)

    def on_grid(self, n_lat: int = 64) -> GridDensity:
        pts, area = sphere_grid(n_lat, 2 * n_lat)
        vals = self(pts.reshape(-1, 3)).reshape(area.shape)
        return GridDensity.from_values(vals, area)


def sphere_kde_fit(samples, bandwidth: float = 0.1) -> SphereKDE:
    samples = Sphere(2).project(np.asarray(samples, dtype=float))
    if len(samples) < 100:
        raise ValueError("kde needs at least 100 samples")
    return SphereKDE(samples, float(bandwidth))


# ---------------------------------------------------------------------------
# total variation


def tv_distance(p: GridDensity, q: GridDensity) -> float:
    """``sum |p - q| * cell_measure`` (unhalved, in ``[0, 2]``)."""
    if p.values.shape != q.values.shape or not np.allclose(p.cell_measure, q.cell_measure,
                                                           rtol=1e-12, atol=0.0):
        raise ValueError("grid densities live on different grids")
    return float(np.sum(np.abs(p.values - q.values) * p.cell_measure))


def tv_vs_target(samples, target: Target, t: float, grid_resolution: int | None = None,
                 bandwidth="scott") -> tuple[float, dict]:
    """TV between a Scott-rule KDE of ``samples`` and ``p_t`` on a regular torus grid."""
    kde = kde_fit(samples, bandwidth)
    res = grid_resolution or DEFAULT_GRID[kde.dim]
    tv = tv_distance(kde.on_grid(res), target_on_grid(target, t, res))
    return tv, {"kde_bandwidth": kde.bandwidth, "grid_resolution": res, "n_samples": len(kde.samples)}


# ---------------------------------------------------------------------------
# regression


@dataclass(frozen=True)
class FitResult:
    slope: float
    intercept: float
    r_squared: float
    n_used: int
    n_dropped: int = 0


def loglinear_fit(xs, ys) -> FitResult:
    """Least squares of ``log y`` on ``x``; nonpositive ``y`` are dropped and counted."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    keep = ys > 0
    xs, ys = xs[keep], ys[keep]
    if len(xs) < 3:
        raise ValueError("loglinear_fit needs at least 3 positive points")
    if len(np.unique(xs)) != len(xs):
        raise ValueError("x values must be distinct")
    log_y = np.log(ys)
    res = stats.linregress(xs, log_y)
    if np.ptp(log_y) == 0:
        r2 = 1.0
    else:
        r2 = float(min(1.0, max(0.0, res.rvalue**2)))
    return FitResult(float(res.slope), float(res.intercept), r2, int(len(xs)), int((~keep).sum()))

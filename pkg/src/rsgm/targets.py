"""Target distributions whose heat-flow evolution and scores are known exactly.

``TorusGMM`` is a warped Gaussian mixture: a Euclidean mixture pushed to
``T^d`` by ``x -> x mod 1``. Running the heat flow for time ``t`` adds ``t`` to
every component variance, so ``p_t`` stays a warped mixture.

``SphereHKMixture`` plays the same role on ``S^2``: each component is itself a
heat kernel ``H(s_i, mu_i, .)`` and evolves to ``H(s_i + t, mu_i, .)``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .heat_kernel import SPHERE_T_MIN, hk_sphere, sphere_log_kernel_dc, wrapped_log_density
from .manifold import Manifold, Sphere, TangentVec, Torus


@dataclass(frozen=True)
class TorusGMM:
    weights: np.ndarray
    means: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        m = np.atleast_2d(np.asarray(self.means, dtype=float))
        s = np.atleast_1d(np.asarray(self.sigmas, dtype=float))
        if len(w) == 0:
            raise ValueError("mixture needs at least one component")
        if not (len(w) == len(m) == len(s)):
            raise ValueError("weights, means and sigmas must have equal length")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")
        if np.any(s <= 0):
            raise ValueError("sigmas must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", np.mod(m, 1.0))
        object.__setattr__(self, "sigmas", s)

    @property
    def manifold(self) -> Torus:
        return Torus(self.means.shape[1])

    def to_dict(self) -> dict:
        return {"kind": "torus_gmm", "weights": self.weights.tolist(),
                "means": self.means.tolist(), "sigmas": self.sigmas.tolist()}


@dataclass(frozen=True)
class SphereHKMixture:
    weights: np.ndarray
    centers: np.ndarray
    widths: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        c = np.atleast_2d(np.asarray(self.centers, dtype=float))
        s = np.atleast_1d(np.asarray(self.widths, dtype=float))
        if len(w) == 0:
            raise ValueError("mixture needs at least one component")
        if not (len(w) == len(c) == len(s)):
            raise ValueError("weights, centers and widths must have equal length")
        if c.shape[1] != 3:
            raise ValueError("sphere mixtures live on S^2 (centers in R^3)")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")
        if np.any(s < SPHERE_T_MIN):
            raise ValueError(f"widths must be >= {SPHERE_T_MIN:g}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "centers", c / np.linalg.norm(c, axis=1, keepdims=True))
        object.__setattr__(self, "widths", s)

    @property
    def manifold(self) -> Sphere:
        return Sphere(2)

    def to_dict(self) -> dict:
        return {"kind": "sphere_hk_mixture", "weights": self.weights.tolist(),
                "centers": self.centers.tolist(), "widths": self.widths.tolist()}


Target = TorusGMM | SphereHKMixture


@dataclass(frozen=True)
class ScorePerturbation:
    """Deterministic additive score error ``eps(t, x)`` with ``|eps| <= amplitude``.

    The field is ``amplitude * sin(2 pi frequency x_1) * u(x)`` where ``u`` is
    the first column of the canonical frame at ``x`` (``e_1`` on the torus).
    """

    mode: str = "none"
    amplitude: float = 0.0
    frequency: int = 1

    def __post_init__(self):
        if self.mode not in ("none", "deterministic"):
            raise ValueError(f"unknown perturbation mode {self.mode!r}")
        if not self.amplitude >= 0:
            raise ValueError("amplitude must be >= 0")

    @classmethod
    def deterministic(cls, amplitude: float, frequency: int = 1) -> "ScorePerturbation":
        return cls("deterministic", float(amplitude), int(frequency))

    @property
    def active(self) -> bool:
        return self.mode == "deterministic"

    def field(self, manifold: Manifold, t: float, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if not self.active:
            return np.zeros(x.shape[:-1] + (manifold.ambient_dim,))
        u = manifold.orthonormal_frame(x).columns[..., :, 0]
        amp = self.amplitude * np.sin(2.0 * math.pi * self.frequency * x[..., 0])
        return amp[..., None] * u

    def to_dict(self) -> dict:
        return {"mode": self.mode, "amplitude": self.amplitude, "frequency": self.frequency}


# ---------------------------------------------------------------------------
# defaults


def default_torus_gmm(d: int) -> TorusGMM:
    """Three components at pairwise wrapped distance >= 0.3 sqrt(d), sigma = 0.05."""
    means = np.array([[0.2] * d, [0.5] * d, [0.8] * d])
    return TorusGMM(np.array([0.5, 0.3, 0.2]), means, np.full(3, 0.05))


def default_sphere_mixture() -> SphereHKMixture:
    centers = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, -0.6, -0.8]])
    return SphereHKMixture(np.array([0.5, 0.3, 0.2]), centers, np.full(3, 0.05))


def default_target(manifold: Manifold) -> Target:
    if isinstance(manifold, Torus):
        return default_torus_gmm(manifold.dim)
    if manifold.dim != 2:
        raise ValueError("sphere targets are available on S^2 only")
    return default_sphere_mixture()


def target_from_dict(spec: dict) -> Target:
    kind = spec.get("kind")
    if kind == "torus_gmm":
        return TorusGMM(np.array(spec["weights"]), np.array(spec["means"]), np.array(spec["sigmas"]))
    if kind == "sphere_hk_mixture":
        return SphereHKMixture(np.array(spec["weights"]), np.array(spec["centers"]), np.array(spec["widths"]))
    raise ValueError(f"unknown target kind {kind!r}")


# ---------------------------------------------------------------------------
# evaluation


def _component_terms(target: Target, t: float, x: np.ndarray):
    """Per-component log densities and their gradients, component axis last-but-one."""
    if isinstance(target, TorusGMM):
        if t < 0:
            raise ValueError("t must be >= 0")
        var = target.sigmas**2 + t
        logs, grads = [], []
        for mean, v in zip(target.means, var):
            lk, dlk = wrapped_log_density(x - mean, float(v))
            logs.append(lk.sum(axis=-1))
            grads.append(dlk)
        return np.stack(logs, axis=-1), np.stack(grads, axis=-2)
    widths = target.widths + t
    if np.any(widths < SPHERE_T_MIN):
        raise ValueError(f"t + width must be >= {SPHERE_T_MIN:g}")
    logs, grads = [], []
    for mu, s in zip(target.centers, widths):
        c = x @ mu
        lh, dlh = sphere_log_kernel_dc(float(s), c)
        logs.append(lh)
        grads.append(dlh[..., None] * (mu - c[..., None] * x))
    return np.stack(logs, axis=-1), np.stack(grads, axis=-2)


def log_density_t(target: Target, t: float, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    logs, _ = _component_terms(target, t, x)
    return logsumexp(logs + np.log(target.weights), axis=-1)


def density_t(target: Target, t: float, x) -> np.ndarray:
    """Density of the heat-flowed target ``p_t`` with respect to the volume measure."""
    return np.exp(log_density_t(target, t, x))


def responsibilities(target: Target, t: float, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    logs, _ = _component_terms(target, t, x)
    a = logs + np.log(target.weights)
    return np.exp(a - logsumexp(a, axis=-1, keepdims=True))


def score_components(target: Target, t: float, x) -> np.ndarray:
    """``grad log p_t(x)`` as raw tangent components (fast path for the sampler)."""
    x = np.asarray(x, dtype=float)
    logs, grads = _component_terms(target, t, x)
    a = logs + np.log(target.weights)
    r = np.exp(a - logsumexp(a, axis=-1, keepdims=True))
    return np.einsum("...k,...ki->...i", r, grads)


def score_t(target: Target, t: float, x) -> TangentVec:
    x = np.asarray(x, dtype=float)
    return TangentVec(x, score_components(target, t, x))


def perturbed_score(target: Target, perturbation: ScorePerturbation, t: float, x) -> TangentVec:
    x = np.asarray(x, dtype=float)
    comps = score_components(target, t, x)
    if perturbation.active:
        comps = comps + perturbation.field(target.manifold, t, x)
    return TangentVec(x, comps)


# ---------------------------------------------------------------------------
# sampling


@functools.lru_cache(maxsize=64)
def _radius_table(s: float, n: int = 8193):
    """Geodesic-radius grid and CDF of the S^2 heat kernel ``H(s, mu, .)``."""
    r_max = min(math.pi, 12.0 * math.sqrt(s))
    rho = np.linspace(0.0, r_max, n)
    dens = hk_sphere(s, np.cos(rho)).value * 2.0 * math.pi * np.sin(rho)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(rho))])
    return rho, cdf / cdf[-1]


def _sample_sphere_component(mu: np.ndarray, s: float, rng: np.random.Generator, n: int) -> np.ndarray:
    rho_grid, cdf = _radius_table(float(s))
    rho = np.interp(rng.random(n), cdf, rho_grid)
    phi = 2.0 * math.pi * rng.random(n)
    sphere = Sphere(2)
    frame = sphere.orthonormal_frame(mu).columns
    direction = np.cos(phi)[:, None] * frame[:, 0] + np.sin(phi)[:, None] * frame[:, 1]
    return sphere.exp_map(np.broadcast_to(mu, (n, 3)), rho[:, None] * direction)


def sample_p0(target: Target, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw from ``p_0``; returns one point, or ``size`` points stacked."""
    n = 1 if size is None else int(size)
    comp = rng.choice(len(target.weights), size=n, p=target.weights)
    if isinstance(target, TorusGMM):
        d = target.means.shape[1]
        z = rng.standard_normal((n, d)) * target.sigmas[comp][:, None]
        out = Torus(d).project(target.means[comp] + z)
    else:
        out = np.empty((n, 3))
        for k, (mu, s) in enumerate(zip(target.centers, target.widths)):
            idx = np.flatnonzero(comp == k)
            if len(idx):
                out[idx] = _sample_sphere_component(mu, s, rng, len(idx))
    return out[0] if size is None else out

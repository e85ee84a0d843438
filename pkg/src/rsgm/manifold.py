"""Geometric primitives on flat tori and round spheres.

Points are plain numpy arrays with the manifold coordinates on the last axis,
so every operation is batched over leading axes:

* ``Torus(d)``: coordinates in ``[0, 1)^d`` (unit circumference per axis).
* ``Sphere(d)``: unit vectors in ``R^(d+1)``.

Tangent vectors are carried as :class:`TangentVec`, which remembers its base
point. Sphere tangents live in ambient coordinates and are orthogonal to the
base; torus tangents use the coordinate frame.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np


class ContractViolation(ValueError):
    """Raised when an operation is called outside its documented domain."""


@dataclass(frozen=True)
class TangentVec:
    base: np.ndarray
    components: np.ndarray

    def norm(self) -> np.ndarray:
        return np.linalg.norm(self.components, axis=-1)


@dataclass(frozen=True)
class Frame:
    """Orthonormal tangent frame; ``columns[..., :, j]`` is the j-th vector."""

    base: np.ndarray
    columns: np.ndarray

    def lift(self, xi: np.ndarray) -> np.ndarray:
        """Map ``xi`` in R^d to tangent components ``U xi``."""
        return np.einsum("...ij,...j->...i", self.columns, xi)


Vector = Union[TangentVec, np.ndarray]


def _components_at(x: np.ndarray, v: Vector) -> np.ndarray:
    if isinstance(v, TangentVec):
        if v.base.shape != x.shape or not np.array_equal(v.base, x):
            raise ContractViolation("tangent vector is not based at the given point")
        return v.components
    return np.asarray(v, dtype=float)


class Manifold:
    """Common interface; concrete geometry lives in :class:`Torus` and :class:`Sphere`."""

    kind: str
    dim: int
    injectivity_radius: float
    curvature_bound: float
    spectral_gap: float

    @property
    def ambient_dim(self) -> int:
        raise NotImplementedError

    def describe(self) -> dict:
        return {
            "kind": self.kind,
            "d": self.dim,
            "injectivity_radius": self.injectivity_radius,
            "curvature_bound": self.curvature_bound,
            "spectral_gap": self.spectral_gap,
        }

    @property
    def label(self) -> str:
        return f"{self.kind}{self.dim}"

    def __eq__(self, other):
        return type(self) is type(other) and self.dim == other.dim

    def __hash__(self):
        return hash((self.kind, self.dim))

    def __repr__(self):
        return f"{type(self).__name__}({self.dim})"

    def tangent(self, x, components) -> TangentVec:
        return TangentVec(np.asarray(x, dtype=float), np.asarray(components, dtype=float))

    def tangent_norm(self, v: Vector) -> np.ndarray:
        comps = v.components if isinstance(v, TangentVec) else np.asarray(v)
        return np.linalg.norm(comps, axis=-1)


class Torus(Manifold):
    """Flat torus ``R^d / Z^d``."""

    kind = "torus"
    curvature_bound = 0.0
    injectivity_radius = 0.5

    def __init__(self, d: int):
        if int(d) < 1:
            raise ValueError(f"torus dimension must be >= 1, got {d}")
        self.dim = int(d)
        self.spectral_gap = 4.0 * np.pi**2

    @property
    def ambient_dim(self) -> int:
        return self.dim

    def wrap(self, delta: np.ndarray) -> np.ndarray:
        """Representative of a coordinate difference in ``(-1/2, 1/2]``."""
        w = np.asarray(delta, dtype=float) - np.floor(np.asarray(delta, dtype=float))
        return np.where(w > 0.5, w - 1.0, w)

    def project(self, x: np.ndarray) -> np.ndarray:
        y = np.mod(np.asarray(x, dtype=float), 1.0)
        # mod can round up to exactly 1.0 for tiny negative inputs
        return np.where(y >= 1.0, 0.0, y)

    def exp_map(self, x, v: Vector) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.project(x + _components_at(x, v))

    def log_map(self, x, y) -> TangentVec:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return TangentVec(np.broadcast_to(x, np.broadcast_shapes(x.shape, y.shape)).copy(),
                          self.wrap(y - x))

    def distance(self, x, y) -> np.ndarray:
        return np.linalg.norm(self.wrap(np.asarray(y, dtype=float) - np.asarray(x, dtype=float)), axis=-1)

    def orthonormal_frame(self, x, rng: np.random.Generator | None = None) -> Frame:
        x = np.asarray(x, dtype=float)
        cols = np.broadcast_to(np.eye(self.dim), x.shape[:-1] + (self.dim, self.dim)).copy()
        if rng is not None:
            cols = cols @ random_rotation(rng, self.dim, x.shape[:-1])
        return Frame(x, cols)

    def uniform_sample(self, rng: np.random.Generator, size=()) -> np.ndarray:
        size = (size,) if np.isscalar(size) else tuple(size)
        return self.project(rng.random(size + (self.dim,)))

    def jacobian_det(self, x, u: Vector) -> np.ndarray:
        comps = _components_at(np.asarray(x, dtype=float), u)
        return np.ones(comps.shape[:-1])

    def is_point(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x)
        return x.shape[-1] == self.dim and bool(np.all((x >= 0.0) & (x < 1.0)))


class Sphere(Manifold):
    """Unit sphere ``S^d`` embedded in ``R^(d+1)``."""

    kind = "sphere"
    curvature_bound = 1.0
    injectivity_radius = np.pi

    def __init__(self, d: int):
        if int(d) < 1:
            raise ValueError(f"sphere dimension must be >= 1, got {d}")
        self.dim = int(d)
        self.spectral_gap = float(self.dim)

    @property
    def ambient_dim(self) -> int:
        return self.dim + 1

    def project(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x / np.linalg.norm(x, axis=-1, keepdims=True)

    def to_tangent(self, x, v) -> np.ndarray:
        """Orthogonal projection of ambient ``v`` onto the tangent space at ``x``."""
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        return v - np.sum(x * v, axis=-1, keepdims=True) * x

    def exp_map(self, x, v: Vector) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        comps = _components_at(x, v)
        r = np.linalg.norm(comps, axis=-1, keepdims=True)
        safe = np.where(r > 0.0, r, 1.0)
        y = np.cos(r) * x + np.sin(r) * comps / safe
        y = np.where(r > 0.0, y, x)
        return self.project(y)

    def log_map(self, x, y) -> TangentVec:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        c = np.clip(np.sum(x * y, axis=-1, keepdims=True), -1.0, 1.0)
        w = y - c * x
        s = np.linalg.norm(w, axis=-1, keepdims=True)
        if np.any((s == 0.0) & (c < 0.0)):
            raise ContractViolation("log_map undefined at the antipode")
        # atan2 keeps full accuracy near theta = 0 where arccos does not
        theta = np.arctan2(s, c)
        comps = np.where(s > 0.0, theta * w / np.where(s > 0.0, s, 1.0), 0.0)
        base = np.broadcast_to(x, comps.shape).copy()
        return TangentVec(base, comps)

    def distance(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        c = np.sum(x * y, axis=-1)
        s = np.linalg.norm(y - c[..., None] * x, axis=-1)
        return np.arctan2(s, c)

    def orthonormal_frame(self, x, rng: np.random.Generator | None = None) -> Frame:
        """Canonical frame, optionally post-multiplied by a Haar rotation.

        The canonical frame completes ``x`` with the standard basis vectors
        other than the one most aligned with ``x`` and orthonormalises via QR.
        """
        x = np.asarray(x, dtype=float)
        n = self.ambient_dim
        batch = x.shape[:-1]
        drop = np.argmax(np.abs(x), axis=-1)
        keep = np.array([[j for j in range(n) if j != k] for k in range(n)])[drop]
        # Gram-Schmidt on (x, e_keep[0], e_keep[1], ...); same as QR with positive diagonal
        basis = [x]
        for j in range(self.dim):
            v = np.zeros(batch + (n,))
            np.put_along_axis(v, keep[..., j:j + 1], 1.0, axis=-1)
            for q in basis:
                v = v - np.sum(q * v, axis=-1, keepdims=True) * q
            basis.append(v / np.linalg.norm(v, axis=-1, keepdims=True))
        cols = np.stack(basis[1:], axis=-1)
        if rng is not None:
            cols = cols @ random_rotation(rng, self.dim, batch)
        return Frame(x, cols)

    def uniform_sample(self, rng: np.random.Generator, size=()) -> np.ndarray:
        size = (size,) if np.isscalar(size) else tuple(size)
        z = rng.standard_normal(size + (self.ambient_dim,))
        return self.project(z)

    def jacobian_det(self, x, u: Vector) -> np.ndarray:
        comps = _components_at(np.asarray(x, dtype=float), u)
        r = np.linalg.norm(comps, axis=-1)
        return np.sinc(r / np.pi) ** (self.dim - 1)

    def is_point(self, x, tol: float = 1e-12) -> bool:
        x = np.asarray(x)
        return x.shape[-1] == self.ambient_dim and bool(
            np.all(np.abs(np.linalg.norm(x, axis=-1) - 1.0) <= tol))


def random_rotation(rng: np.random.Generator, d: int, batch=()) -> np.ndarray:
    """Haar-distributed elements of SO(d), shape ``batch + (d, d)``."""
    if d == 1:
        return np.ones(tuple(batch) + (1, 1))
    z = rng.standard_normal(tuple(batch) + (d, d))
    q, r = np.linalg.qr(z)
    q = q * np.sign(np.diagonal(r, axis1=-2, axis2=-1))[..., None, :]
    det = np.linalg.det(q)
    q[..., :, 0] *= det[..., None]
    return q


def make_manifold(kind: str, d: int) -> Manifold:
    kind = kind.lower()
    if kind == "torus":
        return Torus(d)
    if kind == "sphere":
        return Sphere(d)
    raise ValueError(f"unknown manifold kind {kind!r}")


def frame_volume(vectors: np.ndarray) -> np.ndarray:
    """Volume of the parallelepiped spanned by the columns of ``vectors``."""
    gram = np.swapaxes(vectors, -1, -2) @ vectors
    return np.sqrt(np.abs(np.linalg.det(gram)))

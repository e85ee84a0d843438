"""Reverse-time RSGM sampler with rejection-to-uniform resets, and forward samplers.

One reverse step at ``(Y_k, t_k)``::

    xi ~ N(0, I_d),  G = U_k xi,  b = s_hat(t_k, Y_k)
    Delta = h b + sqrt(h) G
    Y_{k-1} = exp_{Y_k}(Delta)   if |Delta| <= h**(1/4)
    Y_{k-1} ~ uniform            otherwise

Trajectories are simulated in vectorised blocks; each block owns a
counter-based stream (see :mod:`rsgm.streams`).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .manifold import Manifold, Sphere, Torus
from .streams import blocks, stream
from .targets import ScorePerturbation, Target, sample_p0, score_components

SPHERE_MIN_DELTA = 1e-3
FRAME_POLICIES = ("canonical", "random_rotation")
SCORE_MODES = ("exact", "zero")

ScoreField = Callable[[float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SamplerConfig:
    T: float = 2.0
    delta: float = 1e-2
    N: int = 100
    frame_policy: str = "canonical"
    seed: int = 0
    perturbation: ScorePerturbation = field(default_factory=ScorePerturbation)
    score: str = "exact"
    score_scale: float = 1.0

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("T must be positive")
        if not 0 < self.delta < self.T:
            raise ValueError("need 0 < delta < T")
        if int(self.N) != self.N or self.N < 1:
            raise ValueError("N must be a positive integer")
        if self.frame_policy not in FRAME_POLICIES:
            raise ValueError(f"frame_policy must be one of {FRAME_POLICIES}")
        if self.score not in SCORE_MODES:
            raise ValueError(f"score must be one of {SCORE_MODES}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def h(self) -> float:
        return (self.T - self.delta) / self.N

    def validate_for(self, manifold: Manifold):
        if isinstance(manifold, Sphere) and self.delta < SPHERE_MIN_DELTA:
            raise ValueError(f"sphere runs need delta >= {SPHERE_MIN_DELTA:g}, got {self.delta!r}")

    def to_dict(self) -> dict:
        return {"T": self.T, "delta": self.delta, "N": self.N, "h": self.h,
                "frame_policy": self.frame_policy, "seed": self.seed,
                "score": self.score, "score_scale": self.score_scale,
                "perturbation": self.perturbation.to_dict()}


@dataclass
class RunRecord:
    terminal: np.ndarray
    resets: int
    reset_steps: list
    eps_score_realized: float


@dataclass
class SampleBatch:
    """Terminal points and reset bookkeeping for ``M`` trajectories."""

    terminal: np.ndarray
    resets: np.ndarray
    eps_score_realized: np.ndarray
    reset_flags: np.ndarray | None = None  # (M, N) bool, column j is step k = N - j

    def __len__(self):
        return len(self.resets)

    def record(self, i: int) -> RunRecord:
        steps = []
        if self.reset_flags is not None:
            n = self.reset_flags.shape[1]
            steps = [n - j for j in np.flatnonzero(self.reset_flags[i])]
        return RunRecord(self.terminal[i].copy(), int(self.resets[i]), steps,
                         float(self.eps_score_realized[i]))


def make_score_field(target: Target, config: SamplerConfig) -> ScoreField:
    if config.score == "zero":
        dim = target.manifold.ambient_dim
        return lambda t, y: np.zeros(y.shape[:-1] + (dim,))
    scale = config.score_scale
    if scale == 1.0:
        return lambda t, y: score_components(target, t, y)
    return lambda t, y: scale * score_components(target, t, y)


def rsgm_step(manifold: Manifold, y: np.ndarray, t_k: float, h: float, score_field: ScoreField,
              frame_policy: str, rng: np.random.Generator, perturbation: ScorePerturbation | None = None,
              debug: bool = False):
    """One reverse step for a batch of points ``y``; returns ``(y_next, rejected)``.

    ``perturbation`` is added to the score field when active.
    """
    y = np.asarray(y, dtype=float)
    batch = y.shape[:-1]
    if frame_policy == "canonical" and isinstance(manifold, Torus):
        g = rng.standard_normal(batch + (manifold.dim,))
    else:
        frame = manifold.orthonormal_frame(y, rng if frame_policy == "random_rotation" else None)
        g = frame.lift(rng.standard_normal(batch + (manifold.dim,)))
    b = score_field(t_k, y)
    if perturbation is not None and perturbation.active:
        b = b + perturbation.field(manifold, t_k, y)
    step = h * b + math.sqrt(h) * g
    radius = h**0.25
    rejected = np.linalg.norm(step, axis=-1) > radius
    y_next = manifold.exp_map(y, step)
    if debug:
        moved = manifold.distance(y, y_next)[~rejected]
        assert np.all(moved <= radius + 1e-9), "accepted step left the acceptance ball"
    n_rej = int(rejected.sum())
    if n_rej:
        y_next[rejected] = manifold.uniform_sample(rng, n_rej)
    return y_next, rejected


def _run_block(manifold, target, config, n, rng, record_steps, debug):
    score_field = make_score_field(target, config)
    h = config.h
    y = manifold.uniform_sample(rng, n)
    resets = np.zeros(n, dtype=np.int64)
    eps_sq = np.zeros(n)
    flags = np.zeros((n, config.N), dtype=bool) if record_steps else None
    pert = config.perturbation
    for j, k in enumerate(range(config.N, 0, -1)):
        t_k = config.delta + k * h
        if pert.active:
            eps = pert.field(manifold, t_k, y)
            eps_sq += h * np.sum(eps**2, axis=-1)
        y, rejected = rsgm_step(manifold, y, t_k, h, score_field, config.frame_policy, rng,
                                pert, debug)
        resets += rejected
        if record_steps:
            flags[:, j] = rejected
    return y, resets, np.sqrt(eps_sq), flags


def _map_blocks(fn, items, threads: int):
    if threads <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def run_trajectories(manifold: Manifold, target: Target, config: SamplerConfig, M: int,
                     stream_key: Sequence[int] = (), record_steps: bool = False,
                     threads: int = 1, debug: bool = False) -> SampleBatch:
    """Run ``M`` independent RSGM trajectories (Algorithm output ``Y_0`` for each)."""
    if M < 1:
        raise ValueError("M must be >= 1")
    config.validate_for(manifold)
    work = list(blocks(M))

    def one(item):
        b, start, stop = item
        rng = stream(config.seed, *stream_key, b)
        return _run_block(manifold, target, config, stop - start, rng, record_steps, debug)

    parts = _map_blocks(one, work, threads)
    return SampleBatch(
        terminal=np.concatenate([p[0] for p in parts]),
        resets=np.concatenate([p[1] for p in parts]),
        eps_score_realized=np.concatenate([p[2] for p in parts]),
        reset_flags=np.concatenate([p[3] for p in parts]) if record_steps else None,
    )


def rsgm_sample(manifold: Manifold, target: Target, config: SamplerConfig,
                debug: bool = False) -> RunRecord:
    """A single trajectory (``run_trajectories`` with ``M = 1``), with per-step reset indices."""
    return run_trajectories(manifold, target, config, 1, record_steps=True, debug=debug).record(0)


# ---------------------------------------------------------------------------
# forward process


def forward_sample(manifold: Manifold, target: Target, t: float, rng: np.random.Generator,
                   substep: float | None = None, size: int | None = None) -> np.ndarray:
    """Draw ``X_t`` of the driftless forward process started from ``p_0``.

    Exact on the torus. On the sphere a geodesic random walk with
    ``ceil(t / substep)`` Gaussian steps is used (bias of order ``substep``).
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    x = sample_p0(target, rng, 1 if size is None else size)
    if t > 0:
        if isinstance(manifold, Torus):
            x = manifold.project(x + math.sqrt(t) * rng.standard_normal(x.shape))
        else:
            substep = t / 1000.0 if substep is None else substep
            if not substep > 0:
                raise ValueError("substep must be positive")
            m = int(math.ceil(t / substep))
            tau = t / m
            for _ in range(m):
                frame = manifold.orthonormal_frame(x)
                v = frame.lift(rng.standard_normal(x.shape[:-1] + (manifold.dim,)))
                x = manifold.exp_map(x, math.sqrt(tau) * v)
    return x[0] if size is None else x


# ---------------------------------------------------------------------------
# reset-probability experiment


def steps_for(h: float, T: float, delta: float) -> int:
    return max(1, int(round((T - delta) / h)))


def reset_probability_experiment(manifold: Manifold, target: Target, h_list, T: float = 2.0,
                                 delta: float = 1e-2, M: int = 100_000, seed: int = 0,
                                 score: str = "exact", n_steps: int | None = None,
                                 frame_policy: str = "canonical", threads: int = 1,
                                 stream_key: Sequence[int] = ()) -> list[dict]:
    """Fraction of trajectories with at least one reset, for each step size.

    ``h`` is used exactly; the step count is ``round((T - delta) / h)`` unless
    ``n_steps`` fixes it, and the horizon becomes ``delta + N h``.
    """
    if M < 1000:
        raise ValueError("reset experiments need M >= 1000")
    rows = []
    for i, h in enumerate(h_list):
        h = float(h)
        N = steps_for(h, T, delta) if n_steps is None else int(n_steps)
        cfg = SamplerConfig(T=delta + N * h, delta=delta, N=N, frame_policy=frame_policy,
                            seed=seed, score=score)
        batch = run_trajectories(manifold, target, cfg, M, stream_key=(*stream_key, i),
                                 threads=threads)
        hit = int(np.count_nonzero(batch.resets))
        frac = hit / M
        rows.append({
            "h": h, "N": N, "horizon": cfg.T,
            "reset_fraction": frac,
            "stderr": math.sqrt(frac * (1.0 - frac) / M),
            "per_step_rate": int(batch.resets.sum()) / (M * N),
        })
    return rows

"""Command-line experiment runner.

Subcommands ``exit-prob``, ``tv-sweep``, ``sample`` and ``validate-kernels``
each write CSV files whose ``# `` header is the resolved config. Exit status is
0 on success, 1 on a config error and 2 when a validation check fails.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .estimators import loglinear_fit, tv_vs_target
from .heat_kernel import (SPHERE_T_MIN, check_kernel_bounds, normalization_residual,
                          semigroup_residual)
from .manifold import Sphere, Torus, make_manifold
from .sampler import SamplerConfig, forward_sample, reset_probability_experiment, run_trajectories
from .streams import stream
from .targets import ScorePerturbation, target_from_dict

EXIT_OK, EXIT_CONFIG, EXIT_CHECK = 0, 1, 2

EXIT_PROB_COLUMNS = ["manifold", "d", "h", "inv_sqrt_h", "reset_fraction", "stderr", "M", "seed"]
TV_COLUMNS = ["d", "N", "h", "n_samples", "tv_unhalved", "kde_bandwidth", "grid_resolution", "seed"]
KERNEL_COLUMNS = ["t", "rho_or_delta", "kernel", "lower_bound", "upper_bound", "ok"]

# stream path reserved for the exact forward sample behind the TV noise floor
_FLOOR_KEY = 0x7F100


def fmt(v) -> str:
    """Shortest round-trip decimal for floats; plain text otherwise."""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _json_value(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    return v


class Output:
    """One CSV file: config header, data rows, trailing ``# `` notes."""

    def __init__(self, path: Path, config: ExperimentConfig, columns: list):
        self.path = Path(path)
        self.config = config
        self.columns = columns
        self.rows: list = []
        self.notes: list = []

    def add(self, row: dict):
        self.rows.append(row)

    def note(self, name: str, **fields):
        body = " ".join(f"{k}={fmt(v)}" for k, v in fields.items())
        self.notes.append(f"# {name}: {body}\n")

    def text(self) -> str:
        parts = [self.config.header(), ",".join(self.columns) + "\n"]
        for row in self.rows:
            parts.append(",".join(fmt(row[c]) for c in self.columns) + "\n")
        parts.extend(self.notes)
        return "".join(parts)

    def write(self, json_mirror: bool = False):
        self.path.write_text(self.text())
        if json_mirror:
            rows = [{c: _json_value(r[c]) for c in self.columns} for r in self.rows]
            self.path.with_suffix(".json").write_text(json.dumps(rows, indent=1) + "\n")


def _paths(config: ExperimentConfig) -> list:
    base = Path(config.output_path)
    if len(config.manifolds) == 1:
        return [base]
    return [base.with_name(f"{base.stem}_{m['kind']}{m['d']}{base.suffix}") for m in config.manifolds]


def _progress(enabled: bool):
    start = time.perf_counter()

    def say(msg: str):
        if enabled:
            print(f"[{time.perf_counter() - start:7.1f}s] {msg}", file=sys.stderr, flush=True)

    return say


def _sampler_config(config: ExperimentConfig, N: int | None = None, T: float | None = None) -> SamplerConfig:
    s = config.sampler
    p = s["perturbation"]
    return SamplerConfig(T=s["T"] if T is None else T, delta=s["delta"], N=s["N"] if N is None else N,
                         frame_policy=s["frame_policy"], seed=config.seed,
                         perturbation=ScorePerturbation(p["mode"], p["amplitude"], p["frequency"]),
                         score=s["score"])


# ---------------------------------------------------------------------------
# experiments


def run_exit_prob(config: ExperimentConfig, threads: int = 1, say=None) -> list:
    say = say or _progress(False)
    p = config.params
    outputs = []
    for m_idx, (m, path) in enumerate(zip(config.manifolds, _paths(config))):
        manifold = make_manifold(m["kind"], m["d"])
        target = target_from_dict(config.target[m_idx])
        say(f"exit-prob on {manifold.label}: {len(p['h_list'])} step sizes x {p['trajectories']} trajectories")
        rows = reset_probability_experiment(
            manifold, target, p["h_list"], T=config.sampler["T"], delta=config.sampler["delta"],
            M=p["trajectories"], seed=config.seed, score=config.sampler["score"],
            n_steps=p["n_steps"], frame_policy=config.sampler["frame_policy"], threads=threads,
            stream_key=(m_idx,))
        out = Output(path, config, EXIT_PROB_COLUMNS)
        for r in sorted(rows, key=lambda r: -r["h"]):
            out.add({"manifold": m["kind"], "d": m["d"], "h": r["h"], "inv_sqrt_h": 1.0 / math.sqrt(r["h"]),
                     "reset_fraction": r["reset_fraction"], "stderr": r["stderr"],
                     "M": p["trajectories"], "seed": config.seed})
            out.note("steps", h=r["h"], N=r["N"], horizon=r["horizon"], per_step_rate=r["per_step_rate"])
        try:
            fit = loglinear_fit([r["inv_sqrt_h"] for r in out.rows], [r["reset_fraction"] for r in out.rows])
            out.note("fit", slope=fit.slope, intercept=fit.intercept, r_squared=fit.r_squared,
                     n_used=fit.n_used, n_dropped=fit.n_dropped)
        except ValueError as exc:
            out.note("fit", status=f"unavailable ({exc})".replace(" ", "_"))
        outputs.append(out)
    return outputs


def run_tv_sweep(config: ExperimentConfig, threads: int = 1, say=None) -> list:
    say = say or _progress(False)
    p = config.params
    delta = config.sampler["delta"]
    outputs = []
    for m_idx, (m, path) in enumerate(zip(config.manifolds, _paths(config))):
        manifold = make_manifold(m["kind"], m["d"])
        target = target_from_dict(config.target[m_idx])
        out = Output(path, config, TV_COLUMNS)
        bw = p["bandwidth"]
        for i, N in enumerate(p["N_list"]):
            cfg = _sampler_config(config, N=N)
            say(f"tv-sweep on {manifold.label}: N={N}, {p['n_samples']} samples")
            batch = run_trajectories(manifold, target, cfg, p["n_samples"], stream_key=(m_idx, i),
                                     threads=threads)
            tv, info = tv_vs_target(batch.terminal, target, delta, p["grid_resolution"], bw)
            out.add({"d": m["d"], "N": N, "h": cfg.h, "n_samples": p["n_samples"], "tv_unhalved": tv,
                     "kde_bandwidth": info["kde_bandwidth"], "grid_resolution": info["grid_resolution"],
                     "seed": config.seed})
            out.note("run", N=N, mean_resets=float(batch.resets.mean()),
                     eps_score_realized=float(np.mean(batch.eps_score_realized)))
        if p["noise_floor"]:
            # exact draws from p_delta, scored with the bandwidth of the finest run
            say(f"tv-sweep on {manifold.label}: noise floor")
            exact = forward_sample(manifold, target, delta, stream(config.seed, m_idx, _FLOOR_KEY),
                                   size=p["n_samples"])
            floor_bw = out.rows[-1]["kde_bandwidth"]
            tv, info = tv_vs_target(exact, target, delta, p["grid_resolution"], floor_bw)
            out.note("noise_floor", tv_unhalved=tv, kde_bandwidth=floor_bw,
                     grid_resolution=info["grid_resolution"], n_samples=p["n_samples"])
        outputs.append(out)
    return outputs


def run_sample(config: ExperimentConfig, threads: int = 1, say=None) -> list:
    say = say or _progress(False)
    M = config.params["trajectories"]
    outputs = []
    for m_idx, (m, path) in enumerate(zip(config.manifolds, _paths(config))):
        manifold = make_manifold(m["kind"], m["d"])
        target = target_from_dict(config.target[m_idx])
        cfg = _sampler_config(config)
        say(f"sample on {manifold.label}: {M} trajectories, N={cfg.N}")
        batch = run_trajectories(manifold, target, cfg, M, stream_key=(m_idx,), threads=threads)
        coords = [f"x{j + 1}" for j in range(manifold.ambient_dim)]
        out = Output(path, config, ["run_id", *coords, "resets", "eps_score_realized"])
        for i in range(M):
            row = {"run_id": i, "resets": int(batch.resets[i]),
                   "eps_score_realized": float(batch.eps_score_realized[i])}
            row.update({c: float(v) for c, v in zip(coords, batch.terminal[i])})
            out.add(row)
        outputs.append(out)
    return outputs


def _random_pairs(manifold, rng, n):
    x = manifold.uniform_sample(rng, n)
    y = manifold.uniform_sample(rng, n)
    return list(zip(x, y))


def run_validate_kernels(config: ExperimentConfig, threads: int = 1, say=None) -> tuple[list, bool]:
    """Bound checks plus quadrature residuals; returns ``(outputs, all_ok)``."""
    say = say or _progress(False)
    p = config.params
    outputs = []
    all_ok = True
    for m_idx, (m, path) in enumerate(zip(config.manifolds, _paths(config))):
        manifold = make_manifold(m["kind"], m["d"])
        if isinstance(manifold, Sphere) and min(p["t_grid"] + p["normalization_times"]) < SPHERE_T_MIN:
            raise ConfigError(f"t_grid: sphere kernels need t >= {SPHERE_T_MIN:g}")
        rng = stream(config.seed, m_idx)
        say(f"validate-kernels on {manifold.label}: {len(p['t_grid'])} times x {p['n_pairs']} pairs")
        report = check_kernel_bounds(manifold, p["t_grid"], _random_pairs(manifold, rng, p["n_pairs"]),
                                     scale=p["kernel_scale"])
        out = Output(path, config, KERNEL_COLUMNS)
        for row in report.rows:
            out.add(row)
        ok = not report.violations
        out.note("bounds", rows=len(report.rows), violations=len(report.violations))
        if isinstance(manifold, Sphere) or manifold.dim <= 2:
            for t in p["normalization_times"]:
                res = normalization_residual(manifold, t, scale=p["kernel_scale"])
                passed = res <= p["normalization_tol"]
                ok &= passed
                out.note("normalization", t=t, residual=res, tol=p["normalization_tol"], ok=passed)
        if isinstance(manifold, Sphere) or manifold.dim == 1:
            for s, t in p["semigroup_pairs"]:
                (x, y), = _random_pairs(manifold, rng, 1)
                res = semigroup_residual(manifold, s, t, x, y)
                passed = res <= p["semigroup_tol"]
                ok &= passed
                out.note("semigroup", s=s, t=t, residual=res, tol=p["semigroup_tol"], ok=passed)
        out.note("status", ok=ok)
        say(f"validate-kernels on {manifold.label}: {'ok' if ok else 'FAILED'}")
        all_ok &= ok
        outputs.append(out)
    return outputs, all_ok


RUNNERS = {"exit-prob": run_exit_prob, "tv-sweep": run_tv_sweep, "sample": run_sample}


# ---------------------------------------------------------------------------
# entry point


def _threads(value: str) -> int:
    if value == "auto":
        return os.cpu_count() or 1
    try:
        n = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError("threads must be a positive integer or 'auto'") from None
    if n < 1:
        raise argparse.ArgumentTypeError("threads must be a positive integer or 'auto'")
    return n


def _seed(value: str) -> int:
    try:
        n = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer") from None
    if not 0 <= n < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return n


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config, or an output file whose header to reuse")
    common.add_argument("--seed", type=_seed, help="master seed (overrides the config)")
    common.add_argument("--out", help="output CSV path (overrides the config)")
    common.add_argument("--threads", type=_threads, default=1, help="worker threads, or 'auto'")
    common.add_argument("--json", action="store_true", help="also write a JSON array per CSV")
    common.add_argument("--quiet", action="store_true", help="no progress on stderr")

    parser = argparse.ArgumentParser(prog="rsgm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [("exit-prob", "reset probability versus step size"),
                            ("tv-sweep", "TV distance to the target versus step count"),
                            ("sample", "terminal samples and reset counts"),
                            ("validate-kernels", "heat kernel bound and quadrature checks")]:
        sub.add_parser(name, parents=[common], help=help_text)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    say = _progress(not args.quiet)
    try:
        if args.config:
            config = load_config(args.config, args.command, args.seed, args.out)
        else:
            config = parse_config("", args.command, args.seed, args.out)
        out_dir = Path(config.output_path).resolve().parent
        if not out_dir.is_dir() or not os.access(out_dir, os.W_OK):
            raise ConfigError(f"output_path: directory {str(out_dir)!r} is not writable")
        if args.command == "validate-kernels":
            outputs, ok = run_validate_kernels(config, args.threads, say)
        else:
            outputs, ok = RUNNERS[args.command](config, args.threads, say), True
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for out in outputs:
        out.write(args.json)
        say(f"wrote {out.path}")
    return EXIT_OK if ok else EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())

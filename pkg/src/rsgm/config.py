"""Experiment configuration: YAML in, fully resolved config out.

Output files start with the resolved config as ``# ``-prefixed YAML. Such a
file is itself a valid config, so ``--config results.csv`` reproduces it.
"""

from __future__ import annotations

import copy
import io
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import __version__
from .manifold import make_manifold
from .targets import default_target, target_from_dict

EXPERIMENTS = ("exit-prob", "tv-sweep", "sample", "validate-kernels")

DEFAULT_H_LIST = [0.04, 0.0278, 0.0204, 0.0156, 0.0123]


class ConfigError(Exception):
    pass


def _sampler_defaults() -> dict:
    return {"T": 2.0, "delta": 0.01, "N": 100, "frame_policy": "canonical", "score": "exact",
            "perturbation": {"mode": "none", "amplitude": 0.0, "frequency": 1}}


DEFAULTS = {
    "exit-prob": {
        "manifolds": [{"kind": "torus", "d": 2}, {"kind": "sphere", "d": 2}],
        "h_list": DEFAULT_H_LIST,
        "n_steps": None,
        "trajectories": 100_000,
    },
    "tv-sweep": {
        "manifolds": [{"kind": "torus", "d": 1}],
        "N_list": [10, 100, 1000],
        "n_samples": 200_000,
        "bandwidth": "scott",
        "grid_resolution": None,
        "noise_floor": True,
    },
    "sample": {
        "manifolds": [{"kind": "torus", "d": 1}],
        "trajectories": 1000,
    },
    "validate-kernels": {
        "manifolds": [{"kind": "torus", "d": 1}, {"kind": "sphere", "d": 2}],
        "t_grid": [0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0],
        "n_pairs": 20,
        "normalization_times": [0.05, 0.5, 5.0],
        "semigroup_pairs": [[0.1, 0.1], [0.2, 0.5]],
        "normalization_tol": 1e-8,
        "semigroup_tol": 1e-6,
        "kernel_scale": 1.0,
    },
}


def _line_index(text: str) -> dict:
    """Map key paths (tuples) to 1-based line numbers."""
    index = {}

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                p = path + (k.value,)
                index[p] = k.start_mark.line + 1
                walk(v, p)
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                index[path + (i,)] = v.start_mark.line + 1
                walk(v, path + (i,))

    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return index
    if root is not None:
        walk(root, ())
    return index


def strip_header(text: str) -> str:
    """Config text from a YAML file or from the ``# `` header of an output file."""
    lines = text.splitlines()
    if lines and lines[0].startswith("#"):
        header = []
        for line in lines:
            if not line.startswith("#"):
                break
            header.append(line[2:] if line.startswith("# ") else line[1:])
        return "\n".join(header) + "\n"
    return text


@dataclass
class ExperimentConfig:
    experiment: str
    seed: int
    manifolds: list
    target: object
    sampler: dict
    params: dict = field(default_factory=dict)
    output_path: str = "results.csv"

    def to_dict(self) -> dict:
        # output_path is where results go, not what they are; leaving it out keeps
        # files byte-identical wherever they are written
        out = {"experiment": self.experiment, "seed": self.seed,
               "manifolds": copy.deepcopy(self.manifolds), "target": copy.deepcopy(self.target),
               "sampler": copy.deepcopy(self.sampler)}
        out.update(copy.deepcopy(self.params))
        return out

    def header(self) -> str:
        body = yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None, width=1000)
        lines = body.splitlines()
        return "".join(f"# {line}\n" for line in lines) + f"# artifact_version: {__version__}\n"


def _fail(index, path, msg):
    line = None
    p = tuple(path)
    while p and line is None:
        line = index.get(p)
        p = p[:-1]
    where = f"line {line}: " if line else ""
    raise ConfigError(f"{where}{'.'.join(str(x) for x in path)}: {msg}")


def _as_float(index, path, value, positive=False, nonneg=False):
    try:
        v = float(value)
    except (TypeError, ValueError):
        _fail(index, path, f"expected a number, got {value!r}")
    if positive and not v > 0:
        _fail(index, path, "must be positive")
    if nonneg and not v >= 0:
        _fail(index, path, "must be >= 0")
    return v


def _as_int(index, path, value, minimum=None):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
        _fail(index, path, f"expected an integer, got {value!r}")
    v = int(value)
    if minimum is not None and v < minimum:
        _fail(index, path, f"must be >= {minimum}")
    return v


def parse_config(text: str, experiment: str | None = None, seed_override: int | None = None,
                 out_override: str | None = None) -> ExperimentConfig:
    """Validate and resolve config text; ``experiment`` is the CLI subcommand, if any."""
    text = strip_header(text)
    index = _line_index(text)
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from None
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    raw = dict(raw)
    raw.pop("artifact_version", None)
    exp = raw.pop("experiment", experiment)
    if experiment is not None and exp != experiment:
        _fail(index, ["experiment"], f"config is for {exp!r} but the subcommand is {experiment!r}")
    if exp not in EXPERIMENTS:
        _fail(index, ["experiment"], f"must be one of {', '.join(EXPERIMENTS)}")
    seed = raw.pop("seed", 0) if seed_override is None else seed_override
    raw.pop("seed", None)
    seed = _as_int(index, ["seed"], seed, minimum=0)
    if seed >= 2**64:
        _fail(index, ["seed"], "must fit in 64 bits")
    output_path = out_override or raw.pop("output_path", "results.csv")
    raw.pop("output_path", None)

    defaults = copy.deepcopy(DEFAULTS[exp])
    manifolds = raw.pop("manifolds", None)
    if manifolds is None and "manifold" in raw:
        manifolds = [raw.pop("manifold")]
        for key, line in list(index.items()):
            if key[:1] == ("manifold",):
                index[("manifolds",)] = index.get(("manifolds",), line)
                index[("manifolds", 0, *key[1:])] = line
    manifolds = defaults.pop("manifolds") if manifolds is None else manifolds
    defaults.pop("manifolds", None)
    if isinstance(manifolds, dict):
        manifolds = [manifolds]
    if not isinstance(manifolds, list) or not manifolds:
        _fail(index, ["manifolds"], "must be a non-empty list")
    resolved_m = []
    for i, m in enumerate(manifolds):
        if not isinstance(m, dict) or m.get("kind") not in ("torus", "sphere"):
            _fail(index, ["manifolds", i], "needs kind: torus|sphere")
        d = _as_int(index, ["manifolds", i, "d"], m.get("d", 2 if m["kind"] == "sphere" else 1), minimum=1)
        if m["kind"] == "sphere" and d != 2:
            _fail(index, ["manifolds", i, "d"], "only S^2 is supported")
        resolved_m.append({"kind": m["kind"], "d": d})

    target = _resolve_targets(index, raw.pop("target", "default"), resolved_m)

    sampler = _sampler_defaults()
    user_sampler = raw.pop("sampler", {}) or {}
    if not isinstance(user_sampler, dict):
        _fail(index, ["sampler"], "must be a mapping")
    for k, v in user_sampler.items():
        if k == "h":
            continue
        if k not in sampler:
            _fail(index, ["sampler", k], "unknown sampler key")
        if k == "perturbation":
            if not isinstance(v, dict):
                _fail(index, ["sampler", k], "must be a mapping")
            for pk, pv in v.items():
                if pk not in sampler["perturbation"]:
                    _fail(index, ["sampler", k, pk], "unknown perturbation key")
                sampler["perturbation"][pk] = pv
        else:
            sampler[k] = v
    sampler["T"] = _as_float(index, ["sampler", "T"], sampler["T"], positive=True)
    sampler["delta"] = _as_float(index, ["sampler", "delta"], sampler["delta"], positive=True)
    sampler["N"] = _as_int(index, ["sampler", "N"], sampler["N"], minimum=1)
    if not sampler["delta"] < sampler["T"]:
        _fail(index, ["sampler", "delta"], "must be smaller than T")
    if sampler["frame_policy"] not in ("canonical", "random_rotation"):
        _fail(index, ["sampler", "frame_policy"], "must be canonical or random_rotation")
    if sampler["score"] not in ("exact", "zero"):
        _fail(index, ["sampler", "score"], "must be exact or zero")
    pert = sampler["perturbation"]
    if pert["mode"] not in ("none", "deterministic"):
        _fail(index, ["sampler", "perturbation", "mode"], "must be none or deterministic")
    pert["amplitude"] = _as_float(index, ["sampler", "perturbation", "amplitude"], pert["amplitude"], nonneg=True)
    pert["frequency"] = _as_int(index, ["sampler", "perturbation", "frequency"], pert["frequency"])
    if "h" in user_sampler:
        h = _as_float(index, ["sampler", "h"], user_sampler["h"])
        if h != (sampler["T"] - sampler["delta"]) / sampler["N"]:
            _fail(index, ["sampler", "h"], "inconsistent with (T - delta) / N")
    sampler["h"] = (sampler["T"] - sampler["delta"]) / sampler["N"]
    if any(m["kind"] == "sphere" for m in resolved_m) and sampler["delta"] < 1e-3 and exp != "validate-kernels":
        _fail(index, ["sampler", "delta"], "sphere runs need delta >= 0.001")

    params = defaults
    for k, v in raw.items():
        if k not in params:
            _fail(index, [k], f"unknown key for experiment {exp}")
        params[k] = v
    _validate_params(exp, params, index, resolved_m)
    return ExperimentConfig(exp, seed, resolved_m, target, sampler, params, str(output_path))


def _resolve_targets(index, target, manifolds) -> list:
    """One materialized target mapping per manifold."""
    if target == "default":
        target = ["default"] * len(manifolds)
    elif isinstance(target, dict):
        target = [target] * len(manifolds)
    if not isinstance(target, list) or len(target) != len(manifolds):
        _fail(index, ["target"], "must be 'default', a target mapping, or one entry per manifold")
    out = []
    for i, (spec, m) in enumerate(zip(target, manifolds)):
        path = ["target", i] if len(index) and ("target", i) in index else ["target"]
        manifold = make_manifold(m["kind"], m["d"])
        try:
            tg = default_target(manifold) if spec == "default" else target_from_dict(spec)
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            _fail(index, path, f"invalid target: {exc}")
        if tg.manifold != manifold:
            _fail(index, path, f"target lives on {tg.manifold!r}, not {manifold!r}")
        out.append(tg.to_dict())
    return out


def _validate_params(exp, params, index, manifolds):
    if "trajectories" in params:
        params["trajectories"] = _as_int(index, ["trajectories"], params["trajectories"], minimum=1)
    if exp == "exit-prob":
        if params["trajectories"] < 1000:
            _fail(index, ["trajectories"], "exit-prob needs at least 1000 trajectories")
        hl = params["h_list"]
        if not isinstance(hl, list) or len(hl) == 0:
            _fail(index, ["h_list"], "must be a non-empty list")
        params["h_list"] = [_as_float(index, ["h_list", i], h, positive=True) for i, h in enumerate(hl)]
        if params["n_steps"] is not None:
            params["n_steps"] = _as_int(index, ["n_steps"], params["n_steps"], minimum=1)
    elif exp == "tv-sweep":
        if any(m["kind"] != "torus" or m["d"] > 3 for m in manifolds):
            _fail(index, ["manifolds"], "tv-sweep runs on T^d with d <= 3")
        nl = params["N_list"]
        if not isinstance(nl, list) or len(nl) == 0:
            _fail(index, ["N_list"], "must be a non-empty list")
        params["N_list"] = [_as_int(index, ["N_list", i], n, minimum=1) for i, n in enumerate(nl)]
        params["n_samples"] = _as_int(index, ["n_samples"], params["n_samples"], minimum=100)
        if params["bandwidth"] != "scott":
            params["bandwidth"] = _as_float(index, ["bandwidth"], params["bandwidth"], positive=True)
        if params["grid_resolution"] is not None:
            params["grid_resolution"] = _as_int(index, ["grid_resolution"], params["grid_resolution"], minimum=8)
        if not isinstance(params["noise_floor"], bool):
            _fail(index, ["noise_floor"], "must be true or false")
    elif exp == "validate-kernels":
        tg = params["t_grid"]
        if not isinstance(tg, list) or len(tg) == 0:
            _fail(index, ["t_grid"], "must be a non-empty list")
        params["t_grid"] = [_as_float(index, ["t_grid", i], t, positive=True) for i, t in enumerate(tg)]
        params["n_pairs"] = _as_int(index, ["n_pairs"], params["n_pairs"], minimum=1)
        params["normalization_times"] = [_as_float(index, ["normalization_times", i], t, positive=True)
                                         for i, t in enumerate(params["normalization_times"])]
        pairs = params["semigroup_pairs"]
        if not all(isinstance(p, list) and len(p) == 2 for p in pairs):
            _fail(index, ["semigroup_pairs"], "must be a list of [s, t] pairs")
        params["semigroup_pairs"] = [[_as_float(index, ["semigroup_pairs", i], v, positive=True) for v in p]
                                     for i, p in enumerate(pairs)]
        for key in ("normalization_tol", "semigroup_tol", "kernel_scale"):
            params[key] = _as_float(index, [key], params[key], positive=True)


def load_config(path, experiment=None, seed_override=None, out_override=None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config(text, experiment, seed_override, out_override)


def dump_example(exp: str) -> str:
    buf = io.StringIO()
    yaml.safe_dump({"experiment": exp, **DEFAULTS[exp]}, buf, sort_keys=False)
    return buf.getvalue()

"""JSON run configuration with field-level validation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .agents import CategoricalAgent, ConstantAgent, MLPAgent, PGHAgent, SigmaInverseAgent, StaticAgent
from .models import DolinarModel, NvDcModel, build_model
from .particle_filter import ResamplingConfig
from .simulation import RunConfig
from .training import LossSpec

SCHEMA_VERSION = 1
RUN_FIELDS = {"N", "B", "M_max", "R_max", "nu", "lr", "steps", "accumulation", "clip_norm", "seed", "resampling"}
RESAMPLING_FIELDS = set(ResamplingConfig.__dataclass_fields__)


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class Experiment:
    model: Any
    agent: Any
    run: RunConfig
    loss: LossSpec
    evaluation: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)


def _require(mapping: dict, key: str, where: str):
    if not isinstance(mapping, dict):
        raise ConfigError(f"{where}: expected an object")
    if key not in mapping:
        raise ConfigError(f"{where}.{key}: required field is missing")
    return mapping[key]


def _number(value, where: str) -> float:
    if value in ("inf", "infinity", None):
        return math.inf
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    return float(value)


def _unknown(mapping: dict, allowed: set, where: str):
    extra = sorted(set(mapping) - allowed)
    if extra:
        raise ConfigError(f"{where}.{extra[0]}: unknown field")


def _model(spec: dict):
    name = _require(spec, "name", "model")
    try:
        if name == "nv":
            args = dict(spec)
            if "T2" in args:
                args["T2"] = _number(args["T2"], "model.T2")
            return build_model(args)
        return build_model(spec)
    except TypeError as exc:
        raise ConfigError(f"model: {exc}") from None
    except ValueError as exc:
        raise ConfigError(str(exc) if str(exc).startswith("model") else f"model: {exc}") from None


def _agent(spec: dict, model, run: RunConfig):
    kind = _require(spec, "kind", "agent")
    rng = np.random.default_rng(int(spec.get("init_seed", run.seed)))
    scale = spec.get("scale", "log" if isinstance(model, NvDcModel) else "linear")
    try:
        if kind == "mlp":
            return MLPAgent(model.n_features, model.control_bounds, rng, scale=scale)
        if kind == "static":
            return StaticAgent(run.M_max, model.control_bounds, scale=scale, initial=spec.get("initial"))
        if kind == "categorical":
            return CategoricalAgent(model.n_features, _require(spec, "choices", "agent"), rng)
        if kind == "pgh":
            return PGHAgent()
        if kind == "sigma_inverse":
            T2 = getattr(model, "T2", math.inf) if spec.get("use_T2", True) else math.inf
            return SigmaInverseAgent(T2, float(spec.get("tau_max", run.R_max)))
        if kind == "constant":
            return ConstantAgent(_require(spec, "value", "agent"))
    except ValueError as exc:
        raise ConfigError(f"agent: {exc}") from None
    raise ConfigError(f"agent.kind: unknown agent {kind!r}")


def _loss(spec: dict, model) -> LossSpec:
    allowed = {"kind", "G", "pointwise", "axes", "baseline", "log_mode", "importance_mix"}
    _unknown(spec, allowed, "loss")
    args = dict(spec)
    if "axes" in args:
        args["axes"] = tuple(args["axes"])
    if isinstance(model, DolinarModel):
        args.setdefault("pointwise", "discrimination")
        args.setdefault("axes", (0,))
    try:
        return LossSpec(**args)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _run(spec: dict, model) -> RunConfig:
    _unknown(spec, RUN_FIELDS, "run")
    args = dict(spec)
    res = args.pop("resampling", {}) or {}
    _unknown(res, RESAMPLING_FIELDS, "run.resampling")
    if "M_max" not in args and getattr(model, "natural_steps", None):
        args["M_max"] = model.natural_steps
    if "R_max" not in args:
        args["R_max"] = float(args.get("M_max", RunConfig.M_max))
    for key in ("N", "B", "M_max", "steps", "accumulation", "seed"):
        if key in args and (isinstance(args[key], bool) or not isinstance(args[key], int)):
            raise ConfigError(f"run.{key}: expected an integer, got {args[key]!r}")
    try:
        return RunConfig(resampling=ResamplingConfig(**res), **args)
    except ValueError as exc:
        raise ConfigError(f"run.{exc}") from None


def from_dict(raw: dict) -> Experiment:
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a JSON object")
    version = raw.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"version: unsupported schema version {version!r}")
    _unknown(raw, {"version", "model", "agent", "loss", "run", "evaluation"}, "config")
    model = _model(_require(raw, "model", "config"))
    run = _run(_require(raw, "run", "config"), model)
    agent = _agent(_require(raw, "agent", "config"), model, run)
    loss = _loss(raw.get("loss", {"kind": "mse"}), model)
    evaluation = dict(raw.get("evaluation", {}))
    return Experiment(model, agent, run, loss, evaluation, raw)


def load(path) -> Experiment:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return from_dict(raw)


def _plain(value):
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    return value


def resolved(exp: Experiment) -> dict:
    """Fully expanded configuration for provenance."""
    model = {k: v for k, v in vars(exp.model).items()}
    model["name"] = exp.model.name
    run = asdict(exp.run)
    loss = {k: v for k, v in asdict(exp.loss).items() if k != "eta"}
    if loss.get("G") is not None:
        loss["G"] = np.asarray(loss["G"]).tolist()
    return _plain({
        "version": SCHEMA_VERSION,
        "model": model,
        "agent": exp.agent.describe() | {k: v for k, v in exp.raw.get("agent", {}).items() if k not in ("kind",)},
        "loss": loss,
        "run": run,
        "evaluation": exp.evaluation,
    })

"""Control policies.

Trainable agents map a summary of the posterior (a constant feature array,
so no gradient flows back through the filter) to controls. Baselines read
the particle ensemble directly and carry no parameters.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .particle_filter import ParticleEnsemble, covariance

CHECKPOINT_VERSION = 1
HIDDEN_LAYERS = (64, 64, 64, 64, 64)
PGH_EPSILON = 1e-5


@dataclass
class AgentInput:
    """Everything an agent may look at before choosing the next control."""

    features: np.ndarray  # (B, k), entries in [-1, 1]
    step: int
    ensemble: ParticleEnsemble | None = None
    rngs: Sequence[np.random.Generator] | None = None


class Squash:
    """Maps unbounded outputs onto ``[lo, hi]`` with a scaled sigmoid.

    With ``scale="log"`` the sigmoid interpolates ``log lo`` and ``log hi``.
    """

    def __init__(self, bounds, scale: str = "linear"):
        self.bounds = [(float(lo), float(hi)) for lo, hi in bounds]
        if scale not in ("linear", "log"):
            raise ValueError(f"unknown squash scale {scale!r}")
        if scale == "log" and any(lo <= 0 for lo, _ in self.bounds):
            raise ValueError("log squash needs positive lower bounds")
        self.scale = scale

    def __call__(self, z: ad.Node) -> ad.Node:
        lo = np.array([b[0] for b in self.bounds])
        hi = np.array([b[1] for b in self.bounds])
        s = ad.sigmoid(z)
        if self.scale == "log":
            return ad.exp(np.log(lo) + (np.log(hi) - np.log(lo)) * s)
        return lo + (hi - lo) * s

    def inverse(self, x) -> np.ndarray:
        lo = np.array([b[0] for b in self.bounds])
        hi = np.array([b[1] for b in self.bounds])
        x = np.asarray(x, dtype=np.float64)
        if self.scale == "log":
            frac = (np.log(x) - np.log(lo)) / (np.log(hi) - np.log(lo))
        else:
            frac = (x - lo) / (hi - lo)
        frac = np.clip(frac, 1e-12, 1 - 1e-12)
        return np.log(frac) - np.log1p(-frac)


class Agent:
    trainable = True
    kind = "agent"

    def __init__(self):
        self.variables: list[ad.Node] = []

    def control(self, inp: AgentInput):
        """Return ``(controls (B, c) node, log-probability (B,) node or None)``."""
        raise NotImplementedError

    def get_values(self) -> list[np.ndarray]:
        return [v.value.copy() for v in self.variables]

    def set_values(self, values) -> None:
        values = list(values)
        if len(values) != len(self.variables):
            raise ValueError(f"expected {len(self.variables)} tensors, got {len(values)}")
        for var, val in zip(self.variables, values):
            val = np.asarray(val, dtype=np.float64)
            if val.shape != var.shape:
                raise ValueError(f"variable {var.name!r}: shape {val.shape} does not match {var.shape}")
            var.value = val.copy()

    def describe(self) -> dict:
        return {"kind": self.kind}


def _mlp_layers(n_in: int, n_out: int, hidden, rng) -> list[ad.Node]:
    sizes = [n_in, *hidden, n_out]
    out = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        out.append(ad.variable(ad.glorot_normal_init(a, b, rng), name=f"W{i}"))
        out.append(ad.variable(np.zeros(b), name=f"b{i}"))
    return out


def _mlp_forward(layers: list[ad.Node], x) -> ad.Node:
    h = ad.as_node(x)
    n = len(layers) // 2
    for i in range(n):
        h = h @ layers[2 * i] + layers[2 * i + 1]
        if i < n - 1:
            h = ad.tanh(h)
    return h


class MLPAgent(Agent):
    """Adaptive policy: five tanh layers of 64 units and a squashed output."""

    kind = "mlp"

    def __init__(self, n_inputs: int, control_bounds, rng: np.random.Generator, scale: str = "linear", hidden=HIDDEN_LAYERS):
        super().__init__()
        self.n_inputs = n_inputs
        self.hidden = tuple(hidden)
        self.squash = Squash(control_bounds, scale)
        self.variables = _mlp_layers(n_inputs, len(self.squash.bounds), self.hidden, rng)

    def control(self, inp: AgentInput):
        x = np.clip(np.asarray(inp.features, dtype=np.float64), -1.0, 1.0)
        if x.shape[1] != self.n_inputs:
            raise ValueError(f"MLP expects {self.n_inputs} features, got {x.shape[1]}")
        return self.squash(_mlp_forward(self.variables, ad.stop_gradient(x))), None

    def describe(self) -> dict:
        return {"kind": self.kind, "n_inputs": self.n_inputs, "hidden": list(self.hidden), "bounds": self.squash.bounds, "scale": self.squash.scale}


class StaticAgent(Agent):
    """Non-adaptive policy: one trainable row of pre-squash controls per step."""

    kind = "static"

    def __init__(self, steps: int, control_bounds, scale: str = "linear", initial=None):
        super().__init__()
        self.squash = Squash(control_bounds, scale)
        c = len(self.squash.bounds)
        if initial is None:
            table = np.zeros((steps, c))
        else:
            table = self.squash.inverse(np.asarray(initial, dtype=np.float64).reshape(steps, c))
        self.steps = steps
        self.variables = [ad.variable(table, name="table")]

    def control(self, inp: AgentInput):
        t = inp.step
        if not 0 <= t < self.steps:
            raise ValueError(f"step {t} outside the control table (0..{self.steps - 1})")
        B = np.asarray(inp.features).shape[0]
        row = ad.getitem(self.variables[0], (slice(t, t + 1), slice(None)))
        return self.squash(row) * np.ones((B, 1)), None

    def describe(self) -> dict:
        return {"kind": self.kind, "steps": self.steps, "bounds": self.squash.bounds, "scale": self.squash.scale}


class CategoricalAgent(Agent):
    """Stochastic policy over a finite control set, driven by an MLP."""

    kind = "categorical"

    def __init__(self, n_inputs: int, choices, rng: np.random.Generator, hidden=HIDDEN_LAYERS):
        super().__init__()
        self.choices = np.asarray(choices, dtype=np.float64).reshape(len(choices), -1)
        if len(self.choices) == 0:
            raise ValueError("categorical agent needs a non-empty control set")
        self.n_inputs = n_inputs
        self.hidden = tuple(hidden)
        self.variables = _mlp_layers(n_inputs, len(self.choices), self.hidden, rng)

    def logits(self, features) -> ad.Node:
        x = np.clip(np.asarray(features, dtype=np.float64), -1.0, 1.0)
        return _mlp_forward(self.variables, ad.stop_gradient(x))

    def control(self, inp: AgentInput):
        return categorical_control(self.logits(inp.features), self.choices, inp.rngs)

    def describe(self) -> dict:
        return {"kind": self.kind, "n_inputs": self.n_inputs, "hidden": list(self.hidden), "choices": self.choices.tolist()}


def categorical_control(logits: ad.Node, choices, rngs):
    """Sample one control per row from ``softmax(logits)``.

    Returns the chosen controls as a constant ``(B, c)`` node and the
    log-probability of each draw as a ``(B,)`` node.
    """
    choices = np.asarray(choices, dtype=np.float64)
    if choices.shape[0] == 0:
        raise ValueError("empty control set")
    logp = ad.log_softmax(ad.as_node(logits), axis=1)
    prob = np.exp(logp.value)
    idx = np.array([g.choice(len(choices), p=p / p.sum()) for g, p in zip(rngs, prob)])
    chosen = ad.getitem(ad.gather(logp, idx[:, None]), (slice(None), 0))
    return ad.constant(choices.reshape(len(choices), -1)[idx]), chosen


# --------------------------------------------------------------------------
# baselines


class Baseline(Agent):
    trainable = False


def pgh_control(e: ParticleEnsemble, rngs) -> np.ndarray:
    """Inverse distance between two particles drawn from the posterior."""
    x = e.particle_values()
    w = e.weights.value
    out = np.empty(e.batch)
    for b, g in enumerate(rngs):
        i, j = g.choice(e.size, size=2, p=w[b] / w[b].sum())
        out[b] = 1.0 / (np.linalg.norm(x[b, i] - x[b, j]) + PGH_EPSILON)
    return out


def sigma_inverse_control(e: ParticleEnsemble, T2: float = math.inf, tau_max: float = math.inf) -> np.ndarray:
    """``1 / (sqrt(tr cov) + 1/T2)``, clamped to ``tau_max``."""
    d = e.dim
    cov = covariance(e).value
    trace = np.clip(sum(cov[:, i * d + i] for i in range(d)), 0.0, None)
    rate = np.sqrt(trace) + (1.0 / T2 if math.isfinite(T2) else 0.0)
    with np.errstate(divide="ignore"):
        tau = np.where(rate > 0, 1.0 / np.where(rate > 0, rate, 1.0), np.inf)
    return np.minimum(tau, tau_max)


class PGHAgent(Baseline):
    kind = "pgh"

    def control(self, inp: AgentInput):
        return ad.constant(pgh_control(inp.ensemble, inp.rngs)[:, None]), None


class SigmaInverseAgent(Baseline):
    kind = "sigma_inverse"

    def __init__(self, T2: float = math.inf, tau_max: float = math.inf):
        super().__init__()
        self.T2 = T2
        self.tau_max = tau_max

    def control(self, inp: AgentInput):
        return ad.constant(sigma_inverse_control(inp.ensemble, self.T2, self.tau_max)[:, None]), None

    def describe(self) -> dict:
        return {"kind": self.kind, "T2": self.T2, "tau_max": self.tau_max}


class ConstantAgent(Baseline):
    kind = "constant"

    def __init__(self, value):
        super().__init__()
        self.value = np.atleast_1d(np.asarray(value, dtype=np.float64))

    def control(self, inp: AgentInput):
        B = np.asarray(inp.features).shape[0]
        return ad.constant(np.tile(self.value, (B, 1))), None

    def describe(self) -> dict:
        return {"kind": self.kind, "value": self.value.tolist()}


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(agent: Agent, path) -> None:
    payload = {
        "format": "metrosynth-agent",
        "version": CHECKPOINT_VERSION,
        "agent": agent.describe(),
        "variables": [{"name": v.name, "shape": list(v.shape), "data": v.value.reshape(-1).tolist()} for v in agent.variables],
    }
    Path(path).write_text(json.dumps(payload, indent=1))


def load_checkpoint(agent: Agent, path) -> Agent:
    """Load saved variables into ``agent``; shapes must match exactly."""
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != "metrosynth-agent":
        raise ValueError(f"{path}: not an agent checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')!r}")
    saved_kind = payload.get("agent", {}).get("kind")
    if saved_kind != agent.kind:
        raise ValueError(f"{path}: checkpoint holds a {saved_kind!r} agent, expected {agent.kind!r}")
    entries = payload["variables"]
    if len(entries) != len(agent.variables):
        raise ValueError(f"{path}: {len(entries)} tensors in checkpoint, agent has {len(agent.variables)}")
    values = []
    for entry, var in zip(entries, agent.variables):
        shape = tuple(entry["shape"])
        if shape != var.shape:
            raise ValueError(f"{path}: tensor {entry['name']!r} has shape {shape}, agent expects {var.shape}")
        values.append(np.asarray(entry["data"], dtype=np.float64).reshape(shape))
    agent.set_values(values)
    return agent

"""Sensor models and analytic precision bounds.

A model describes the parameter space, the controls, the outcome law and
(optionally) a per-particle probe state. Every method is vectorised over a
batch axis ``B`` and a particle axis ``N``: parameters arrive as a list of
``d`` arrays or nodes of shape ``(B, N)``, controls as a node of shape
``(B, c)`` and outcomes as an array of shape ``(B,)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import gammaln

from . import autodiff as ad

MU_DECOHERENCE = 0.1619
PRIOR_FISHER = 12.0


def _as_inf(x) -> float:
    return math.inf if x is None else float(x)


# --------------------------------------------------------------------------
# NV centre DC magnetometry


def nv_likelihood(y, tau, omega, T2=math.inf):
    """Probability of outcome ``y = +-1`` after a Ramsey time ``tau``.

    Works on floats, arrays and autodiff nodes alike.
    """
    y = np.asarray(y, dtype=np.float64)
    if isinstance(tau, ad.Node) or isinstance(omega, ad.Node):
        phase = ad.cos(ad.mul(omega, tau))
        if math.isfinite(T2):
            phase = phase * ad.exp(ad.neg(tau) / T2)
        return 0.5 + 0.5 * ad.mul(y, phase)
    tau = np.asarray(tau, dtype=np.float64)
    decay = np.exp(-tau / T2) if math.isfinite(T2) else 1.0
    return 0.5 + 0.5 * y * decay * np.cos(np.asarray(omega) * tau)


def nv_dp_domega(y, tau, omega, T2=math.inf):
    tau = np.asarray(tau, dtype=np.float64)
    decay = np.exp(-tau / T2) if math.isfinite(T2) else 1.0
    return -0.5 * np.asarray(y, dtype=np.float64) * decay * tau * np.sin(np.asarray(omega) * tau)


def nv_score(y, tau, omega, T2=math.inf):
    """Analytic derivative of ``log p(y | tau, omega)`` with respect to omega."""
    p = nv_likelihood(y, tau, omega, T2)
    if np.any((p <= 0.0) | (p >= 1.0)):
        raise ValueError("nv_score: likelihood is 0 or 1, score undefined")
    return nv_dp_domega(y, tau, omega, T2) / p


def nv_fisher_information(tau, omega, T2=math.inf):
    """Closed-form Fisher information of one Ramsey measurement on omega."""
    tau = np.asarray(tau, dtype=np.float64)
    x = tau / T2 if math.isfinite(T2) else 0.0
    c2 = np.cos(omega * tau / 2.0) ** 2
    s2 = np.sin(omega * tau / 2.0) ** 2
    e = np.exp(-x)
    num = tau**2 * np.exp(-2.0 * x) * c2 * s2
    den = (e * c2 + (1.0 - e) / 2.0) * (e * s2 + (1.0 - e) / 2.0)
    return num / den


@dataclass
class NvDcModel:
    """Ramsey magnetometry with an NV centre, frequency omega in MHz."""

    T2: float = math.inf
    prior_low: float = 0.0
    prior_high: float = 1.0
    tau_min: float | None = None
    tau_max: float | None = None
    resource_mode: str = "measurements"

    name = "nv"
    dim = 1
    discrete_dims = (False,)
    control_dim = 1
    has_state = False
    natural_steps = None

    def __post_init__(self):
        self.T2 = _as_inf(self.T2)
        if not self.T2 > 0:
            raise ValueError("T2 must be positive")
        scale = min(self.T2, 100.0)
        if self.tau_min is None:
            self.tau_min = 0.01 * scale
        if self.tau_max is None:
            self.tau_max = 100.0 * scale
        if not 0 < self.tau_min < self.tau_max:
            raise ValueError(f"invalid tau bounds ({self.tau_min}, {self.tau_max})")
        if self.resource_mode not in ("measurements", "time"):
            raise ValueError(f"unknown resource_mode {self.resource_mode!r}")

    @property
    def bounds(self):
        return [(self.prior_low, self.prior_high)]

    @property
    def control_bounds(self):
        return [(self.tau_min, self.tau_max)]

    def sample_prior(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.prior_low, self.prior_high, size=(n, 1))

    def initial_state(self, theta):
        return None

    def advance(self, state, control, theta, step):
        return None

    def likelihood(self, y, control, theta, state, step) -> ad.Node:
        y = np.asarray(y, dtype=np.float64)[:, None]
        return nv_likelihood(y, ad.as_node(control), theta[0], self.T2)

    def sample_outcome(self, control, theta, state, step, rngs) -> np.ndarray:
        p_plus = nv_likelihood(1.0, control[:, 0], theta[:, 0], self.T2)
        u = np.array([g.random() for g in rngs])
        return np.where(u < p_plus, 1.0, -1.0)

    def outcome_support(self, control, theta, state, step):
        return [np.array([1.0]), np.array([-1.0])]

    def resource(self, control: np.ndarray) -> np.ndarray:
        if self.resource_mode == "time":
            return control[:, 0].copy()
        return np.ones(control.shape[0])

    def estimator(self, ensemble):
        from .particle_filter import mean

        return [ad.getitem(mean(ensemble), (slice(None), 0))]

    def score(self, y, control, theta):
        return nv_score(y, control[..., 0], theta[..., 0], self.T2)[..., None]

    def features(self, stats: dict) -> np.ndarray:
        half = 0.5 * (self.prior_high - self.prior_low)
        center = 0.5 * (self.prior_high + self.prior_low)
        m = stats["mean"][:, 0]
        s = np.sqrt(np.clip(stats["cov"][:, 0], 0.0, None))
        return np.stack([(m - center) / half, np.clip(s / half, 0.0, 1.0), stats["resource_frac"], stats["step_frac"]], axis=1)

    n_features = 4


# --------------------------------------------------------------------------
# agnostic Dolinar receiver


def beam_splitter(residual, alpha, theta):
    """Rotate (residual, alpha) by theta. Returns (measured, passed) amplitudes."""
    if isinstance(residual, ad.Node) or isinstance(alpha, ad.Node) or isinstance(theta, ad.Node):
        s, c = ad.sin(theta), ad.cos(theta)
        return residual * s + alpha * c, residual * c - alpha * s
    s, c = np.sin(theta), np.cos(theta)
    return residual * s + alpha * c, residual * c - alpha * s


def poisson_truncation(mean) -> np.ndarray:
    """Largest count kept when enumerating outcomes; the tail beyond it is negligible."""
    mean = np.asarray(mean, dtype=np.float64)
    return np.ceil(mean + 20.0 * np.sqrt(mean + 1.0)).astype(int)


def poisson_mass(y, mean) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    safe = np.where(mean > 0, mean, 1.0)
    p = np.exp(-mean + y * np.log(safe) - gammaln(y + 1.0))
    return np.where(mean > 0, p, (y == 0).astype(np.float64))


def dolinar_step(residual: float, alpha: float, theta: float, rng: np.random.Generator):
    """One beam-splitter stage for a single hypothesis.

    Returns the photon count, the new residual amplitude and the likelihood
    of that count.
    """
    if not (np.isfinite(residual) and np.isfinite(alpha)):
        raise ValueError("dolinar_step: non-finite amplitude")
    m, r = beam_splitter(residual, alpha, theta)
    y = int(rng.poisson(m * m))
    return y, r, float(poisson_mass(y, m * m))


@dataclass
class DolinarModel:
    """Sign discrimination of a coherent state with ``n`` reference copies.

    Parameters are ``(sign, alpha)``; the sign is discrete. Steps ``0..n-1``
    mix the residual signal with one reference copy at angle ``theta`` and
    count photons at the measured port. Step ``n`` counts the residual.
    """

    n: int = 4
    alpha_low: float = 0.05
    alpha_high: float = 1.5

    name = "dolinar"
    dim = 2
    discrete_dims = (True, False)
    control_dim = 1
    has_state = True
    control_bounds = [(0.0, math.pi)]

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if not 0 < self.alpha_low < self.alpha_high:
            raise ValueError("invalid alpha interval")

    @property
    def natural_steps(self) -> int:
        return self.n + 1

    @property
    def bounds(self):
        return [(-1.0, 1.0), (self.alpha_low, self.alpha_high)]

    def sample_prior(self, n: int, rng: np.random.Generator) -> np.ndarray:
        sign = np.where(rng.random(n) < 0.5, 1.0, -1.0)
        alpha = rng.uniform(self.alpha_low, self.alpha_high, size=n)
        return np.stack([sign, alpha], axis=1)

    def initial_state(self, theta):
        return ad.mul(theta[0], theta[1])

    def _measured(self, control, theta, state, step):
        if step >= self.n:
            return state
        c = ad.as_node(control)
        angle = ad.getitem(c, (slice(None), slice(0, 1))) if c.ndim == 2 else c
        m, _ = beam_splitter(ad.as_node(state), theta[1], angle)
        return m

    def advance(self, state, control, theta, step):
        if step >= self.n:
            return state
        c = ad.as_node(control)
        angle = ad.getitem(c, (slice(None), slice(0, 1)))
        _, r = beam_splitter(ad.as_node(state), theta[1], angle)
        return r

    def likelihood(self, y, control, theta, state, step) -> ad.Node:
        m = self._measured(control, theta, state, step)
        y = np.asarray(y, dtype=np.float64)[:, None]
        return ad.poisson_pmf(y, ad.square(m))

    def sample_outcome(self, control, theta, state, step, rngs) -> np.ndarray:
        if step >= self.n:
            m = np.asarray(state)[:, 0]
        else:
            m, _ = beam_splitter(np.asarray(state)[:, 0], theta[:, 1], control[:, 0])
        return np.array([float(g.poisson(mi * mi)) for g, mi in zip(rngs, m)])

    def resource(self, control: np.ndarray) -> np.ndarray:
        return np.ones(control.shape[0])

    def estimator(self, ensemble):
        from .particle_filter import argmax_estimator

        return argmax_estimator(ensemble)

    def features(self, stats: dict) -> np.ndarray:
        """Sign belief, alpha summary, per-sign residual ratio and step.

        For each sign hypothesis the residual amplitude divided by alpha is
        fixed by the past controls, so its weighted mean is exact.
        """
        p_plus = stats["p_plus"]
        half = 0.5 * (self.alpha_high - self.alpha_low)
        center = 0.5 * (self.alpha_high + self.alpha_low)
        a = stats["mean"][:, 1]
        s = np.sqrt(np.clip(stats["cov"][:, 3], 0.0, None))
        ratios = self.residual_ratios(stats) / math.sqrt(self.n + 1)
        return np.stack([2.0 * p_plus - 1.0, (a - center) / half, np.clip(s / half, 0.0, 1.0), ratios[:, 0], ratios[:, 1], stats["step_frac"]], axis=1)

    def residual_ratios(self, stats: dict) -> np.ndarray:
        """Weighted mean of residual / alpha for signs +1 and -1, ``(B, 2)``."""
        x = stats["particles"]
        w = stats["weights"]
        state = stats.get("state")
        if state is None:
            state = x[..., 0] * x[..., 1]
        ratio = state / x[..., 1]
        out = np.empty((w.shape[0], 2))
        for k, sign in enumerate((1.0, -1.0)):
            mask = x[..., 0] == sign
            mass = np.sum(w * mask, axis=1)
            total = np.sum(w * mask * ratio, axis=1)
            out[:, k] = np.where(mass > 0, total / np.where(mass > 0, mass, 1.0), sign)
        return out

    n_features = 6


# --------------------------------------------------------------------------
# lower bounds for DC magnetometry


@dataclass(frozen=True)
class BoundSpec:
    limit: str = "measurements"  # or "time"
    T2: float = math.inf
    mu: float = MU_DECOHERENCE
    prior_fisher: float = PRIOR_FISHER

    def __post_init__(self):
        if self.limit not in ("measurements", "time"):
            raise ValueError(f"unknown regime {self.limit!r}")


def bit_bound(M):
    return 2.0 ** (-2.0 * (np.asarray(M, dtype=np.float64) + 1.0)) / 3.0


def dc_lower_bound(spec: BoundSpec, resource):
    """MSE lower bound after ``resource`` measurements or total time."""
    r = np.asarray(resource, dtype=np.float64)
    if np.any(r <= 0):
        raise ValueError("dc_lower_bound: resource must be positive")
    I0 = spec.prior_fisher
    finite = math.isfinite(spec.T2)
    if spec.limit == "measurements":
        if not finite:
            return bit_bound(r)
        return np.maximum(1.0 / (spec.mu * r * spec.T2**2 + I0), bit_bound(r))
    if not finite:
        return 1.0 / (r**2 + I0)
    return 1.0 / (0.5 * r * spec.T2 + I0)


def decoherence_factor(x):
    """Normalised single-shot information ``x^2 e^{-2x} / (1 - e^{-2x})``."""
    x = np.asarray(x, dtype=np.float64)
    return x**2 * np.exp(-2.0 * x) / -np.expm1(-2.0 * x)


def build_model(spec: dict):
    """Instantiate a model from a config mapping with a ``name`` key."""
    spec = dict(spec)
    name = spec.pop("name", None)
    if name == "nv":
        if spec.get("T2") in ("inf", "infinity"):
            spec["T2"] = math.inf
        return NvDcModel(**spec)
    if name == "dolinar":
        return DolinarModel(**spec)
    raise ValueError(f"model.name: unknown model {name!r}")

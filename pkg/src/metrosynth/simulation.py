"""The measurement loop: control, outcome, Bayes update, resampling.

A whole batch of ``B`` episodes advances in lock-step; each episode owns a
counter-based random stream derived from ``(seed, stream, episode)`` so its
draws do not depend on the other episodes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .agents import Agent, AgentInput
from .particle_filter import (
    ParticleEnsemble,
    ResamplingConfig,
    bayes_update,
    covariance,
    init_ensemble,
    mean,
    needs_resampling,
    resample,
)


@dataclass
class RunConfig:
    N: int = 480
    B: int = 128
    M_max: int = 20
    R_max: float = 20.0
    nu: float = 0.98
    resampling: ResamplingConfig = field(default_factory=ResamplingConfig)
    lr: float = 1e-2
    steps: int = 100
    accumulation: int = 1
    clip_norm: float | None = None
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.resampling, dict):
            self.resampling = ResamplingConfig(**self.resampling)
        if self.N < 2:
            raise ValueError(f"N: need at least 2 particles, got {self.N}")
        if self.B < 1:
            raise ValueError(f"B: batch size must be positive, got {self.B}")
        if self.M_max < 0:
            raise ValueError(f"M_max: must be non-negative, got {self.M_max}")
        if not self.R_max > 0:
            raise ValueError(f"R_max: must be positive, got {self.R_max}")
        if not 0 < self.nu <= 1:
            raise ValueError(f"nu: must lie in (0, 1], got {self.nu}")
        if self.accumulation < 1:
            raise ValueError(f"accumulation: must be at least 1, got {self.accumulation}")


def episode_rngs(seed: int, B: int, stream: int = 0) -> list[np.random.Generator]:
    """One Philox generator per episode keyed by ``(seed, stream, k)``."""
    return [np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream, k]))) for k in range(B)]


@dataclass
class EpisodeRecord:
    """Numeric snapshot of one episode."""

    theta: np.ndarray
    controls: np.ndarray  # (M', c)
    outcomes: np.ndarray  # (M',)
    increments: np.ndarray  # (M',)
    resources: np.ndarray  # (M',) cumulative
    estimators: np.ndarray  # (M', d)
    prior_estimator: np.ndarray
    log_likelihood: float
    active: np.ndarray  # (M',) bool, measurement executed
    terminated_at: int | None


@dataclass
class BatchRecord:
    """Graph-carrying trace of a batch.

    Per-step lists have one entry per executed loop iteration. Estimator
    entries are lists of ``d`` nodes of shape ``(B,)``; ``loglik[t]`` holds
    the accumulated log-likelihood of every draw up to and including step t.
    """

    theta: np.ndarray  # (B, d)
    prior_estimator: list
    controls: list = field(default_factory=list)
    outcomes: list = field(default_factory=list)
    increments: list = field(default_factory=list)
    resources: list = field(default_factory=list)
    estimators: list = field(default_factory=list)
    loglik: list = field(default_factory=list)
    active: list = field(default_factory=list)
    terminated_at: np.ndarray | None = None
    resampled_steps: list = field(default_factory=list)
    log_ratio: np.ndarray | None = None
    ensemble: ParticleEnsemble | None = None

    @property
    def batch(self) -> int:
        return self.theta.shape[0]

    @property
    def steps(self) -> int:
        return len(self.controls)

    @property
    def terminated(self) -> np.ndarray:
        return self.terminated_at >= 0

    def final_loglik(self) -> ad.Node:
        return self.loglik[-1] if self.loglik else ad.constant(np.zeros(self.batch))

    def final_estimator(self) -> list:
        return self.estimators[-1] if self.estimators else self.prior_estimator

    def episode(self, k: int) -> EpisodeRecord:
        M = self.steps
        est = np.array([[e.value[k] for e in row] for row in self.estimators]).reshape(M, -1)
        t = int(self.terminated_at[k])
        return EpisodeRecord(
            theta=self.theta[k].copy(),
            controls=np.array([c.value[k] for c in self.controls]).reshape(M, -1),
            outcomes=np.array([y[k] for y in self.outcomes]),
            increments=np.array([r[k] for r in self.increments]),
            resources=np.array([r[k] for r in self.resources]),
            estimators=est,
            prior_estimator=np.array([e.value[k] for e in self.prior_estimator]),
            log_likelihood=float(self.final_loglik().value[k]),
            active=np.array([a[k] for a in self.active], dtype=bool),
            terminated_at=t if t >= 0 else None,
        )

    def __iter__(self) -> Iterator[EpisodeRecord]:
        return (self.episode(k) for k in range(self.batch))

    def __len__(self) -> int:
        return self.batch


def posterior_stats(e: ParticleEnsemble, state=None) -> dict:
    mu = mean(e).value
    cov = covariance(e).value
    stats = {"mean": mu, "cov": cov, "particles": e.particle_values(), "weights": e.weights.value}
    if state is not None:
        stats["state"] = ad.as_node(state).value
    disc = [i for i, flag in enumerate(e.discrete_dims) if flag]
    if disc:
        stats["p_plus"] = np.sum(e.weights.value * (e.particles[disc[0]].value > 0), axis=1)
    return stats


def summary_input(e: ParticleEnsemble, R, t: int, model, cfg: RunConfig, state=None) -> np.ndarray:
    """Normalised posterior summary in ``[-1, 1]``; a constant array, so the
    agent input carries no gradient back into the filter."""
    stats = posterior_stats(e, state)
    B = e.batch
    stats["resource_frac"] = np.broadcast_to(np.asarray(R, dtype=np.float64) / cfg.R_max, (B,)).copy()
    stats["step_frac"] = np.full(B, t / cfg.M_max if cfg.M_max else 0.0)
    return np.clip(model.features(stats), -1.0, 1.0)


def _column(x: np.ndarray, i: int) -> np.ndarray:
    return x[:, i : i + 1]


def run_batch(
    model,
    agent: Agent,
    cfg: RunConfig,
    rngs: Sequence[np.random.Generator],
    theta=None,
    forced_outcomes=None,
    resample_enabled: bool = True,
    outcome_mix: float = 0.0,
) -> BatchRecord:
    """Simulate ``len(rngs)`` episodes in lock-step.

    ``theta`` fixes the true parameters instead of drawing them from the
    prior; ``forced_outcomes[t]`` replaces the sampled outcomes at step t
    (used by exact-enumeration checks). With ``outcome_mix > 0`` outcomes
    are drawn from the model law mixed with a uniform law on the enumerated
    outcomes, and ``log(p / p_mix)`` is accumulated in ``log_ratio``.
    """
    B = len(rngs)
    if theta is None:
        theta = np.stack([model.sample_prior(1, g)[0] for g in rngs])
    theta = np.asarray(theta, dtype=np.float64).reshape(B, model.dim)
    ens = init_ensemble(model.sample_prior, cfg.N, rngs, model.bounds, model.discrete_dims)
    true_theta = [_column(theta, i) for i in range(model.dim)]
    state = model.initial_state(ens.particles) if model.has_state else None
    true_state = model.initial_state([ad.constant(x) for x in true_theta]) if model.has_state else None

    rec = BatchRecord(theta=theta, prior_estimator=model.estimator(ens))
    R = np.zeros(B)
    active = np.ones(B, dtype=bool)
    terminated_at = np.full(B, -1)
    loglik = ad.constant(np.zeros(B))
    log_ratio = np.zeros(B)
    est_prev = rec.prior_estimator
    need = math.ceil(cfg.nu * B)

    for t in range(cfg.M_max):
        feats = summary_input(ens, R, t, model, cfg, state)
        control, logprob = agent.control(AgentInput(feats, t, ens, rngs))
        control = ad.as_node(control)
        if control.shape != (B, model.control_dim):
            raise ValueError(f"step {t}: control shape {control.shape}, expected {(B, model.control_dim)}")
        cv = control.value
        if not np.all(np.isfinite(cv)):
            raise ValueError(f"step {t}: agent produced a non-finite control")
        if forced_outcomes is not None:
            y = np.asarray(forced_outcomes[t], dtype=np.float64)
        elif outcome_mix > 0:
            y, ratio = _mixed_outcomes(model, cv, true_theta, true_state, t, rngs, outcome_mix)
            log_ratio += np.where(active, np.log(ratio), 0.0)
        else:
            y = model.sample_outcome(cv, theta, None if true_state is None else true_state.value, t, rngs)

        lik = model.likelihood(y, control, ens.particles, state, t)
        if np.any(lik.value < 0) or np.any(lik.value > 1 + 1e-12):
            raise ValueError(f"step {t}: model likelihood outside [0, 1]")
        p_true = model.likelihood(y, control, true_theta, true_state, t)
        p_true = ad.getitem(p_true, (slice(None), 0))
        if p_true.requires_grad:
            loglik = loglik + ad.where(active, ad.log(ad.where(active, p_true, 1.0)), 0.0)
        if logprob is not None:
            loglik = loglik + ad.where(active, logprob, 0.0)

        if model.has_state:
            state = _masked(active, model.advance(state, control, ens.particles, t), state)
            true_state = _masked(active, model.advance(true_state, control, true_theta, t), true_state)

        ens = bayes_update(ens, lik, active)

        inc = np.where(active, model.resource(cv), 0.0)
        R = R + inc
        done = active & ((R >= cfg.R_max) | (t == cfg.M_max - 1))
        terminated_at[done] = t

        est = model.estimator(ens)
        est = [ad.where(active, new, old) for new, old in zip(est, est_prev)]
        est_prev = est

        rec.controls.append(control)
        rec.outcomes.append(y)
        rec.increments.append(inc)
        rec.resources.append(R.copy())
        rec.estimators.append(est)
        rec.loglik.append(loglik)
        rec.active.append(active.copy())

        active = active & ~done
        if np.sum(terminated_at >= 0) >= need:
            break

        if resample_enabled and active.any():
            flagged = needs_resampling(ens, cfg.resampling) & active
            if flagged.sum() >= cfg.resampling.batch_fraction * active.sum():
                rebuild = None
                if model.has_state:
                    rebuild = _rebuilder(model, rec, t)
                ens, new_state = resample(ens, cfg.resampling, rngs, rows=active, rebuild=rebuild)
                if model.has_state:
                    state = new_state
                rec.resampled_steps.append(t)

    rec.terminated_at = terminated_at
    rec.log_ratio = log_ratio if outcome_mix > 0 else None
    rec.ensemble = ens
    return rec


def _mixed_outcomes(model, cv, true_theta, true_state, t, rngs, mix):
    B = cv.shape[0]
    support = model.outcome_support(cv, None, None, t)
    with ad.no_grad():
        state = None if true_state is None else ad.constant(true_state.value)
        probs = np.stack(
            [model.likelihood(np.broadcast_to(y, (B,)), ad.constant(cv), true_theta, state, t).value[:, 0] for y in support],
            axis=1,
        )
    mixed = (1.0 - mix) * probs + mix / len(support)
    u = np.array([g.random() for g in rngs])
    idx = np.minimum(np.sum(np.cumsum(mixed, axis=1) <= u[:, None], axis=1), len(support) - 1)
    rows = np.arange(B)
    y = np.array([np.broadcast_to(support[i], (B,))[k] for k, i in enumerate(idx)], dtype=np.float64)
    return y, probs[rows, idx] / mixed[rows, idx]


def _masked(active, new, old):
    if new is None:
        return None
    return ad.where(np.asarray(active)[:, None], new, old)


def _rebuilder(model, rec: BatchRecord, upto: int):
    def rebuild(particles):
        state = model.initial_state(particles)
        for s in range(upto + 1):
            state = _masked(rec.active[s], model.advance(state, rec.controls[s], particles, s), state)
        return state

    return rebuild


def run_episode(model, agent: Agent, cfg: RunConfig, rng: np.random.Generator, theta=None) -> EpisodeRecord:
    """Single-episode loop; identical to a batch of one with ``nu = 1``."""
    one = RunConfig(**{**cfg.__dict__, "B": 1, "nu": 1.0})
    return run_batch(model, agent, one, [rng], theta=theta).episode(0)

"""Losses with log-likelihood corrections, Adam and the training loop.

Every loss returns a node whose forward value is the plain objective and
whose gradient is the unbiased policy-gradient surrogate: each loss term
``l`` is paired with ``sg(l - b) * (L - sg(L))``, where ``L`` is the
accumulated log-likelihood of the draws that produced ``l`` and ``b`` the
baseline. That pairing is zero in the forward pass.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .simulation import BatchRecord, RunConfig, episode_rngs, run_batch

log = logging.getLogger(__name__)

LOSS_KINDS = ("mse", "discrimination", "cumulative", "logarithmic", "information_gain", "cramer_rao")
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class LossSpec:
    """Which objective to optimise.

    ``kind`` selects the batch objective; ``pointwise`` selects the per
    estimate error (``mse`` or ``discrimination``). ``baseline`` is True for
    the batch-mean baseline, False for none, or a fixed number.
    """

    kind: str = "mse"
    G: np.ndarray | None = None
    pointwise: str | None = None
    axes: tuple | None = None
    eta: Callable | None = None
    baseline: bool | float = True
    log_mode: bool = False
    importance_mix: float = 0.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"loss.kind: unknown loss {self.kind!r}, expected one of {LOSS_KINDS}")
        if self.pointwise is None:
            self.pointwise = "discrimination" if self.kind == "discrimination" else "mse"
        if self.pointwise not in ("mse", "discrimination"):
            raise ValueError(f"loss.pointwise: unknown pointwise loss {self.pointwise!r}")
        if self.G is not None:
            G = np.atleast_2d(np.asarray(self.G, dtype=np.float64))
            if G.shape[0] != G.shape[1] or not np.allclose(G, G.T):
                raise ValueError("loss.G: weight matrix must be square and symmetric")
            if np.linalg.eigvalsh(G).min() < -1e-12:
                raise ValueError("loss.G: weight matrix must be positive semidefinite")
            self.G = G


def _weight_matrix(spec: LossSpec, d: int) -> np.ndarray:
    return np.eye(d) if spec.G is None else spec.G


def pointwise_loss(spec: LossSpec, estimate, theta) -> ad.Node:
    """Per-episode error of ``estimate`` (list of d nodes of shape (B,))
    against the true ``theta`` of shape ``(B, d)``."""
    theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    d = theta.shape[1]
    if spec.pointwise == "discrimination":
        axes = spec.axes if spec.axes is not None else tuple(i for i in range(d) if _weight_matrix(spec, d)[i, i] > 0)
        hit = np.ones(theta.shape[0], dtype=bool)
        for i in axes:
            hit &= ad.as_node(estimate[i]).value == theta[:, i]
        return ad.constant(1.0 - hit)
    G = _weight_matrix(spec, d)
    err = [ad.as_node(estimate[i]) - theta[:, i] for i in range(d)]
    total = None
    for i in range(d):
        for j in range(d):
            if G[i, j] == 0:
                continue
            term = G[i, j] * err[i] * err[j]
            total = term if total is None else total + term
    return ad.constant(np.zeros(theta.shape[0])) if total is None else total


def _mean(x: ad.Node, weights) -> ad.Node:
    if weights is None:
        return ad.mean(x)
    w = np.asarray(weights, dtype=np.float64)
    return ad.sum(x * (w / w.sum()))


def _paired(losses: ad.Node, loglik: ad.Node, spec: LossSpec, weights) -> ad.Node:
    """Batch mean of ``l + sg(l - b) (L - sg L)``."""
    if spec.baseline is True:
        base = _mean(losses, weights).value
    elif spec.baseline is False or spec.baseline is None:
        base = 0.0
    else:
        base = float(spec.baseline)
    score = loglik - ad.stop_gradient(loglik)
    return _mean(losses + ad.stop_gradient(losses - base) * score, weights)


def modified_batch_loss(rec: BatchRecord, spec: LossSpec, weights=None) -> ad.Node:
    """Mean final loss over terminated episodes with the score-function term."""
    done = rec.terminated
    if not done.any():
        raise ValueError("modified_batch_loss: no terminated episodes")
    rows = np.flatnonzero(done)
    losses = pointwise_loss(spec, rec.final_estimator(), rec.theta)
    loglik = rec.final_loglik()
    if not done.all():
        losses = ad.gather(losses, rows)
        loglik = ad.gather(loglik, rows)
        weights = None if weights is None else np.asarray(weights)[rows]
    return _paired(losses, loglik, spec, weights)


def _step_losses(rec: BatchRecord, spec: LossSpec) -> list[ad.Node]:
    out = []
    for t, est in enumerate(rec.estimators):
        loss = pointwise_loss(spec, est, rec.theta)
        if spec.eta is not None:
            eta = np.asarray(spec.eta(rec.theta, t), dtype=np.float64)
            if np.any(eta == 0):
                raise ValueError(f"cumulative_loss: normaliser is zero at step {t}")
            loss = loss / eta
        out.append(loss)
    return out


def cumulative_loss(rec: BatchRecord, spec: LossSpec, weights=None) -> ad.Node:
    """Mean over steps and episodes of the (normalised) per-step loss.

    Step t is paired only with the log-likelihood accumulated up to t.
    """
    if rec.steps == 0:
        raise ValueError("cumulative_loss: no steps executed")
    terms = [_paired(l, L, spec, weights) for l, L in zip(_step_losses(rec, spec), rec.loglik)]
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total / float(len(terms))


def _step_means(rec: BatchRecord, spec: LossSpec, weights):
    losses = _step_losses(rec, spec)
    plain = [_mean(l, weights) for l in losses]
    paired = [_paired(l, L, spec, weights) for l, L in zip(losses, rec.loglik)]
    return plain, paired


def logarithmic_loss(rec: BatchRecord, spec: LossSpec, weights=None) -> ad.Node:
    """Mean over steps of the log of the batch-mean loss."""
    if rec.steps == 0:
        raise ValueError("logarithmic_loss: no steps executed")
    plain, paired = _step_means(rec, spec, weights)
    terms = []
    for t, (s, n) in enumerate(zip(plain, paired)):
        if not s.value > 0:
            raise ValueError(f"logarithmic_loss: batch-mean loss is zero at step {t}")
        terms.append(ad.surrogate(np.log(s.value), n / ad.stop_gradient(s)))
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total / float(len(terms))


def information_gain_loss(rec: BatchRecord, spec: LossSpec | None = None, weights=None, eps: float | None = None) -> ad.Node:
    """Mean over steps of ``log(S_t / (S_{t-1} + eps))`` with ``S_{-1}`` the
    prior-stage loss; the forward value telescopes."""
    spec = spec or LossSpec(kind="information_gain")
    if rec.steps == 0:
        raise ValueError("information_gain_loss: no steps executed")
    prior = _mean(pointwise_loss(spec, rec.prior_estimator, rec.theta), weights).value
    if eps is None:
        eps = 1e-12 * prior if prior > 0 else 1e-12
    plain, paired = _step_means(rec, spec, weights)
    prev = float(prior)
    terms = []
    for t, (s, n) in enumerate(zip(plain, paired)):
        if not s.value > 0:
            raise ValueError(f"information_gain_loss: batch-mean loss is zero at step {t}")
        denom = prev + eps
        terms.append(ad.surrogate(np.log(s.value / denom), n / ad.stop_gradient(s)))
        prev = float(s.value)
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total / float(len(terms))


def batch_loss(rec: BatchRecord, spec: LossSpec, model=None, weights=None) -> ad.Node:
    if spec.kind in ("mse", "discrimination"):
        return modified_batch_loss(rec, spec, weights)
    if spec.kind == "cumulative":
        return cumulative_loss(rec, spec, weights)
    if spec.kind == "logarithmic":
        return logarithmic_loss(rec, spec, weights)
    if spec.kind == "information_gain":
        return information_gain_loss(rec, spec, weights)
    from .fisher import record_cr_loss

    return record_cr_loss(rec, model, spec, weights)


# --------------------------------------------------------------------------
# optimiser


@dataclass
class OptimizerState:
    lr: float
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0

    def rate(self, i: int | None = None) -> float:
        i = self.step if i is None else i
        return self.lr / math.sqrt(i)


def adam_step(state: OptimizerState, grads: dict, variables) -> bool:
    """Adam update with rate ``lr / sqrt(i)``. Returns False and leaves
    everything untouched if a gradient component is not finite."""
    gs = [np.asarray(grads[v], dtype=np.float64) for v in variables]
    for v, g in zip(variables, gs):
        if g.shape != v.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} != variable shape {v.shape}")
        if not np.all(np.isfinite(g)):
            log.warning("adam_step: non-finite gradient for %s, step skipped", v.name)
            return False
    if not state.m:
        state.m = [np.zeros(v.shape) for v in variables]
        state.v = [np.zeros(v.shape) for v in variables]
    state.step += 1
    i = state.step
    rate = state.rate(i)
    for k, (var, g) in enumerate(zip(variables, gs)):
        state.m[k] = ADAM_BETA1 * state.m[k] + (1 - ADAM_BETA1) * g
        state.v[k] = ADAM_BETA2 * state.v[k] + (1 - ADAM_BETA2) * g * g
        m_hat = state.m[k] / (1 - ADAM_BETA1**i)
        v_hat = state.v[k] / (1 - ADAM_BETA2**i)
        var.value = var.value - rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return True


# --------------------------------------------------------------------------
# training loop


@dataclass
class HistoryRow:
    step: int
    loss: float
    learning_rate: float
    wall_time: float


def train(model, agent, cfg: RunConfig, spec: LossSpec, callback=None):
    """Run ``cfg.steps`` update steps. Returns ``(agent, history)``."""
    variables = agent.variables
    state = OptimizerState(cfg.lr)
    history: list[HistoryRow] = []
    start = time.perf_counter()
    for i in range(1, cfg.steps + 1):
        grads = [np.zeros(v.shape) for v in variables]
        total = 0.0
        for a in range(cfg.accumulation):
            stream = (i - 1) * cfg.accumulation + a + 1
            rec = run_batch(model, agent, cfg, episode_rngs(cfg.seed, cfg.B, stream))
            loss = batch_loss(rec, spec, model)
            if not np.isfinite(loss.value):
                raise FloatingPointError(f"non-finite loss at training step {i}")
            got = ad.backward(loss, variables)
            for k, v in enumerate(variables):
                grads[k] = grads[k] + got[v] / cfg.accumulation
            total += float(loss.value) / cfg.accumulation
            del rec, loss
        if cfg.clip_norm:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > cfg.clip_norm:
                grads = [g * (cfg.clip_norm / norm) for g in grads]
        rate = state.lr / math.sqrt(state.step + 1)
        adam_step(state, dict(zip(variables, grads)), variables)
        row = HistoryRow(i, total, rate, time.perf_counter() - start)
        history.append(row)
        if callback is not None:
            callback(row)
    return agent, history

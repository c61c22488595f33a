"""Observed Fisher information and Cramér–Rao objectives.

Parameter scores come from analytic model derivatives (central finite
differences of the log-likelihood otherwise) and stay differentiable with
respect to the agent parameters through the controls.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .models import NvDcModel

EIG_CUTOFF = 1e-12
MAX_CONDITION = 1e12


@dataclass
class ScoreTrajectory:
    steps: list  # per step: list of d nodes of shape (B,)
    total: list  # d nodes (B,), summed scores s_k
    observed: list  # d*d nodes (B,), entries of s_k s_k^T row-major

    def matrices(self) -> np.ndarray:
        d = len(self.total)
        return np.stack([o.value for o in self.observed], axis=-1).reshape(-1, d, d)


@dataclass
class FisherEstimate:
    F: np.ndarray
    G: np.ndarray


def nv_score_node(y, tau, omega, T2=np.inf) -> ad.Node:
    """d log p / d omega for the NV model, differentiable in ``tau``."""
    y = np.asarray(y, dtype=np.float64)
    tau = ad.as_node(tau)
    decay = ad.exp(ad.neg(tau) / T2) if np.isfinite(T2) else 1.0
    phase = ad.mul(omega, tau)
    p = 0.5 + 0.5 * y * decay * ad.cos(phase)
    if np.any((p.value <= 0) | (p.value >= 1)):
        raise ValueError("score undefined: outcome probability is 0 or 1")
    dp = -0.5 * y * decay * tau * ad.sin(phase)
    return dp / p


def _fd_scores(model, y, control, theta, step, h_scale=1e-6) -> list:
    out = []
    for i in range(model.dim):
        h = h_scale * max(1.0, float(np.max(np.abs(theta[:, i]))))
        cols_p = [theta[:, j : j + 1] + (h if j == i else 0.0) for j in range(model.dim)]
        cols_m = [theta[:, j : j + 1] - (h if j == i else 0.0) for j in range(model.dim)]
        lp = model.likelihood(y, control, cols_p, None, step)
        lm = model.likelihood(y, control, cols_m, None, step)
        if np.any(lp.value <= 0) or np.any(lm.value <= 0):
            raise ValueError("score undefined: outcome probability is 0")
        out.append(ad.getitem((ad.log(lp) - ad.log(lm)) / (2 * h), (slice(None), 0)))
    return out


def step_scores(model, y, control, theta, step) -> list:
    """Score vector of one measurement as ``d`` nodes of shape ``(B,)``."""
    theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    control = ad.as_node(control)
    if isinstance(model, NvDcModel):
        tau = ad.getitem(control, (slice(None), 0))
        return [nv_score_node(y, tau, theta[:, 0], model.T2)]
    if model.has_state:
        raise NotImplementedError("finite-difference scores need a stateless model")
    return _fd_scores(model, y, control, theta, step)


def observed_fi(rec, model, theta=None) -> ScoreTrajectory:
    """Scores and observed information ``f_k = s_k s_k^T`` of a batch record."""
    theta = rec.theta if theta is None else np.atleast_2d(theta)
    d = model.dim
    steps = []
    total = [ad.constant(np.zeros(rec.batch)) for _ in range(d)]
    for t in range(rec.steps):
        s = step_scores(model, rec.outcomes[t], rec.controls[t], theta, t)
        s = [ad.where(rec.active[t], si, 0.0) for si in s]
        steps.append(s)
        total = [a + b for a, b in zip(total, s)]
    observed = [total[i] * total[j] for i in range(d) for j in range(d)]
    return ScoreTrajectory(steps, total, observed)


def _inverse(F: np.ndarray, G: np.ndarray) -> np.ndarray:
    eigval, eigvec = np.linalg.eigh(0.5 * (F + F.T))
    top = eigval.max() if eigval.size else 0.0
    if top <= 0:
        raise ValueError("Fisher information is zero: matrix is singular")
    keep = eigval > EIG_CUTOFF * top
    null = eigvec[:, ~keep]
    if null.size and np.abs(null.T @ G @ null).max() > EIG_CUTOFF * np.abs(G).max():
        raise ValueError("Fisher information is singular on the support of G")
    if keep.all() and top / eigval.min() > MAX_CONDITION:
        raise ValueError(f"Fisher information is ill-conditioned (condition {top / eigval.min():.3g})")
    return (eigvec[:, keep] / eigval[keep]) @ eigvec[:, keep].T


def estimate_fi(observed, weights=None) -> np.ndarray:
    d = int(round(np.sqrt(len(observed))))
    vals = np.stack([ad.as_node(o).value for o in observed], axis=-1)
    w = np.full(vals.shape[0], 1.0 / vals.shape[0]) if weights is None else np.asarray(weights) / np.sum(weights)
    return (w @ vals).reshape(d, d)


def cr_loss(observed, loglik, G=None, mode: str = "plain", weights=None, ratios=None) -> ad.Node:
    """``tr(G F^-1)`` with the unbiased gradient.

    ``observed`` holds the d*d entries of f_k as ``(B,)`` nodes, ``loglik``
    the log-probability of each trajectory. ``weights`` replace the uniform
    batch mean (exact enumeration); ``ratios`` are importance weights p/p~.
    The gradient is ``-tr(sg(F^-1 G F^-1) dF)`` with
    ``dF = mean_k r_k [df_k + f_k dlog p_k]``.
    """
    observed = [ad.as_node(o) for o in observed]
    d = int(round(np.sqrt(len(observed))))
    B = observed[0].shape[0]
    G = np.eye(d) if G is None else np.atleast_2d(np.asarray(G, dtype=np.float64))
    w = np.full(B, 1.0 / B) if weights is None else np.asarray(weights, dtype=np.float64) / np.sum(weights)
    if ratios is not None:
        w = w * np.asarray(ratios, dtype=np.float64)
    loglik = ad.as_node(loglik)
    score = loglik - ad.stop_gradient(loglik)
    F = (w @ np.stack([o.value for o in observed], axis=-1)).reshape(d, d)
    Finv = _inverse(F, G)
    A = Finv @ G @ Finv
    value = float(np.trace(G @ Finv))
    dF = None
    for i in range(d):
        for j in range(d):
            if A[i, j] == 0:
                continue
            f = observed[i * d + j]
            term = -A[i, j] * ad.sum((f + ad.stop_gradient(f) * score) * w)
            dF = term if dF is None else dF + term
    if dF is None:
        dF = ad.constant(0.0)
    if mode == "log":
        return ad.surrogate(np.log(value), dF / value)
    if mode != "plain":
        raise ValueError(f"unknown Cramér–Rao mode {mode!r}")
    return ad.surrogate(value, dF)


def averaged_fi_loss(observed, loglik, G=None, mode: str = "plain", weights=None) -> ad.Node:
    """Cramér–Rao loss of the Fisher information pooled over prior draws."""
    return cr_loss(observed, loglik, G, mode, weights)


def importance_sampled_fi(observed, ratios) -> np.ndarray:
    """Fisher estimate from draws of p~, reweighted by ``p / p~``."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if not np.all(np.isfinite(ratios)):
        raise ValueError("importance ratio undefined: proposal probability is 0")
    vals = np.stack([ad.as_node(o).value for o in observed], axis=-1)
    d = int(round(np.sqrt(vals.shape[1])))
    return (ratios @ vals / len(ratios)).reshape(d, d)


def record_cr_loss(rec, model, spec, weights=None) -> ad.Node:
    traj = observed_fi(rec, model)
    ratios = None if rec.log_ratio is None else np.exp(rec.log_ratio)
    return cr_loss(traj.observed, rec.final_loglik(), spec.G, "log" if spec.log_mode else "plain", weights, ratios)

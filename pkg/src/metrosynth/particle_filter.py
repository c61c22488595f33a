"""Batched differentiable particle filter.

An ensemble holds ``B`` independent posteriors, one per row. Each parameter
coordinate is stored as its own ``(B, N)`` node and the weights as another
``(B, N)`` node, so Bayes updates, moments and resampling stay
differentiable with respect to anything the likelihoods or particles depend
on.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad


@dataclass
class ParticleEnsemble:
    particles: list  # d nodes of shape (B, N)
    weights: ad.Node  # (B, N)
    bounds: list
    discrete_dims: tuple

    @property
    def batch(self) -> int:
        return self.weights.shape[0]

    @property
    def size(self) -> int:
        return self.weights.shape[1]

    @property
    def dim(self) -> int:
        return len(self.particles)

    def particle_values(self) -> np.ndarray:
        """Particles as a ``(B, N, d)`` array."""
        return np.stack([p.value for p in self.particles], axis=-1)


@dataclass
class ResamplingConfig:
    threshold: float = 0.5
    soft_alpha: float = 0.5
    perturb_beta: float = 0.98
    keep_gamma: float = 0.99
    batch_fraction: float = 0.98
    scibior_correction: bool = True
    perturbation: bool = True
    proposal: bool = True

    def __post_init__(self):
        checks = {
            "threshold": 0.0 <= self.threshold <= 1.0,
            "soft_alpha": 0.0 <= self.soft_alpha <= 1.0,
            "perturb_beta": 0.0 < self.perturb_beta <= 1.0,
            "keep_gamma": 0.0 < self.keep_gamma <= 1.0,
            "batch_fraction": 0.0 < self.batch_fraction <= 1.0,
        }
        for name, ok in checks.items():
            if not ok:
                raise ValueError(f"resampling.{name}: value {getattr(self, name)!r} out of range")


def init_ensemble(prior, N: int, rngs, bounds, discrete_dims) -> ParticleEnsemble:
    """Draw ``N`` prior particles per row with uniform weights.

    ``prior(n, rng)`` returns an ``(n, d)`` array. ``rngs`` is one generator
    or a sequence of generators, one per batch row.
    """
    if N < 2:
        raise ValueError(f"init_ensemble: need at least 2 particles, got {N}")
    if isinstance(rngs, np.random.Generator):
        rngs = [rngs]
    draws = np.stack([np.asarray(prior(N, g), dtype=np.float64) for g in rngs])
    d = draws.shape[-1]
    particles = [ad.constant(draws[:, :, i]) for i in range(d)]
    weights = ad.constant(np.full((len(rngs), N), 1.0 / N))
    return ParticleEnsemble(particles, weights, list(bounds), tuple(discrete_dims))


def bayes_update(e: ParticleEnsemble, likelihoods, active=None) -> ParticleEnsemble:
    """Multiply weights by the likelihoods and renormalise each row.

    Rows where ``active`` is False keep their weights unchanged.
    """
    lik = ad.as_node(likelihoods)
    if lik.shape != e.weights.shape:
        raise ValueError(f"bayes_update: likelihood shape {lik.shape} != weight shape {e.weights.shape}")
    if np.any(lik.value < 0):
        raise ValueError("bayes_update: negative likelihood")
    if active is None:
        active = np.ones(e.batch, dtype=bool)
    mask = np.asarray(active, dtype=bool)[:, None]
    lik = ad.where(mask, lik, 1.0)
    unnorm = e.weights * lik
    total = ad.sum(unnorm, axis=1, keepdims=True)
    if np.any(total.value <= 0):
        raise ValueError("bayes_update: observed outcome has zero probability under every particle")
    # inactive rows keep their weights bit for bit
    return replace(e, weights=ad.where(mask, unnorm / total, e.weights))


def mean(e: ParticleEnsemble) -> ad.Node:
    """Posterior means, shape ``(B, d)``."""
    cols = [ad.sum(e.weights * p, axis=1, keepdims=True) for p in e.particles]
    return ad.concat(cols, axis=1)


def covariance(e: ParticleEnsemble, center: ad.Node | None = None) -> ad.Node:
    """Posterior covariances flattened row-major, shape ``(B, d*d)``."""
    mu = mean(e) if center is None else center
    d = e.dim
    dev = [p - ad.getitem(mu, (slice(None), slice(i, i + 1))) for i, p in enumerate(e.particles)]
    entries = {}
    for i in range(d):
        for j in range(i, d):
            entries[i, j] = ad.sum(e.weights * dev[i] * dev[j], axis=1, keepdims=True)
    cols = [entries[min(i, j), max(i, j)] for i in range(d) for j in range(d)]
    return ad.concat(cols, axis=1)


def effective_particles(e: ParticleEnsemble) -> np.ndarray:
    w = e.weights.value
    return 1.0 / np.sum(w * w, axis=1)


def needs_resampling(e: ParticleEnsemble, cfg: ResamplingConfig) -> np.ndarray:
    return effective_particles(e) < cfg.threshold * e.size


def argmax_estimator(e: ParticleEnsemble) -> list:
    """Maximum a posteriori on discrete axes, posterior mean on the others.

    Weights of particles sharing a discrete value are merged; ties go to the
    value whose first particle has the lowest index. Returns ``d`` nodes of
    shape ``(B,)``.
    """
    disc = [i for i, flag in enumerate(e.discrete_dims) if flag]
    mu = mean(e)
    out = [ad.getitem(mu, (slice(None), i)) for i in range(e.dim)]
    if not disc:
        return out
    keys = np.stack([e.particles[i].value for i in disc], axis=-1)
    w = e.weights.value
    best = np.empty((e.batch, len(disc)))
    for b in range(e.batch):
        uniq, first, inverse = np.unique(keys[b], axis=0, return_index=True, return_inverse=True)
        mass = np.zeros(len(uniq))
        np.add.at(mass, inverse.reshape(-1), w[b])
        top = np.flatnonzero(mass == mass.max())
        best[b] = uniq[top[np.argmin(first[top])]]
    for k, i in enumerate(disc):
        out[i] = ad.constant(best[:, k])
    return out


def _regularised_sqrt(cov: ad.Node, dims: list, d: int) -> ad.Node:
    """Symmetric square root of the covariance restricted to ``dims``."""
    c = len(dims)
    cols = [ad.getitem(cov, (slice(None), slice(i * d + j, i * d + j + 1))) for i in dims for j in dims]
    sub = ad.concat(cols, axis=1)
    trace = sum(cov.value[:, i * d + i] for i in dims)
    eps = 1e-10 * np.clip(trace, 0.0, None) / c
    eye = np.eye(c).reshape(-1)
    return ad.psd_sqrt(sub + eps[:, None] * eye[None, :], c)


def _sqrt_times(root: ad.Node, u: Sequence[np.ndarray], c: int) -> list:
    """Apply row-wise ``c x c`` roots to noise vectors ``u[j]`` of shape (B, K)."""
    out = []
    for i in range(c):
        acc = None
        for j in range(c):
            r = ad.getitem(root, (slice(None), slice(i * c + j, i * c + j + 1)))
            term = r * u[j]
            acc = term if acc is None else acc + term
        out.append(acc)
    return out


def resample(
    e: ParticleEnsemble,
    cfg: ResamplingConfig,
    rngs: Sequence[np.random.Generator],
    rows=None,
    rebuild: Callable | None = None,
):
    """Soft resampling with weight correction, perturbation and proposal.

    Only rows flagged in ``rows`` (all rows when None) are resampled; the
    others are returned unchanged. ``rebuild(particles)`` recomputes
    per-particle states from the stored trajectory and its result is
    returned alongside the ensemble.
    """
    B, N = e.weights.shape
    rows = np.ones(B, dtype=bool) if rows is None else np.asarray(rows, dtype=bool)
    keep = int(round(cfg.keep_gamma * N)) if cfg.proposal else N
    keep = min(max(keep, 1), N)
    fresh = N - keep

    w = e.weights
    q = cfg.soft_alpha * w + (1.0 - cfg.soft_alpha) / N
    qv = q.value
    idx = np.tile(np.arange(N), (B, 1))[:, :keep]
    for b in np.flatnonzero(rows):
        prob = qv[b] / qv[b].sum()
        idx[b] = rngs[b].choice(N, size=keep, p=prob)

    q_safe = ad.where(qv > 0, q, 1.0)
    qg = ad.gather(q_safe, idx)
    ratio = ad.gather(w, idx) / qg
    kept_mass = keep / N
    new_w = ratio * (kept_mass / ad.sum(ratio, axis=1, keepdims=True))
    if cfg.scibior_correction:
        new_w = new_w * (qg / ad.stop_gradient(qg))

    center = mean(e)
    cont = [i for i, flag in enumerate(e.discrete_dims) if not flag]
    d = e.dim
    new_particles = [ad.gather(p, idx) for p in e.particles]
    need_root = cont and (cfg.perturbation or fresh > 0)
    if need_root:
        root = _regularised_sqrt(covariance(e, center), cont, d)
    if cfg.perturbation and cont:
        beta = cfg.perturb_beta
        noise = [np.stack([rngs[b].standard_normal(keep) if rows[b] else np.zeros(keep) for b in range(B)]) for _ in cont]
        shifts = _sqrt_times(root, noise, len(cont))
        for k, i in enumerate(cont):
            mu_i = ad.getitem(center, (slice(None), slice(i, i + 1)))
            new_particles[i] = beta * new_particles[i] + (1.0 - beta) * mu_i + np.sqrt(1.0 - beta * beta) * shifts[k]
    if fresh > 0:
        noise = [np.stack([rngs[b].standard_normal(fresh) if rows[b] else np.zeros(fresh) for b in range(B)]) for _ in cont]
        donors = np.stack([rngs[b].integers(0, keep, size=fresh) if rows[b] else np.zeros(fresh, dtype=int) for b in range(B)])
        shifts = _sqrt_times(root, noise, len(cont)) if cont else []
        for i in range(d):
            if i in cont:
                mu_i = ad.getitem(center, (slice(None), slice(i, i + 1)))
                extra = mu_i + shifts[cont.index(i)]
            else:
                extra = ad.gather(ad.stop_gradient(new_particles[i]), donors)
            new_particles[i] = ad.concat([new_particles[i], extra], axis=1)
        new_w = ad.concat([new_w, ad.constant(np.full((B, fresh), 1.0 / N))], axis=1)

    for i, (lo, hi) in enumerate(e.bounds):
        if i in cont:
            new_particles[i] = ad.clip(new_particles[i], lo, hi)

    mask = rows[:, None]
    weights = ad.where(mask, new_w, e.weights)
    particles = [ad.where(mask, new, old) for new, old in zip(new_particles, e.particles)]
    out = replace(e, particles=particles, weights=weights)
    state = rebuild(particles) if rebuild is not None else None
    return out, state

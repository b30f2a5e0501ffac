"""Importance weights, ESS, log-partition estimates and the ELBO bound."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .ctmc import CHUNK, euler_step_batch, step_distribution


def _log_weights(w) -> np.ndarray:
    if hasattr(w, "w") and not callable(w.w):
        return np.atleast_1d(np.asarray(w.w, dtype=np.float64))
    if isinstance(w, (list, tuple)) and w and hasattr(w[0], "w"):
        return np.array([tr.w for tr in w], dtype=np.float64)
    return np.atleast_1d(np.asarray(w, dtype=np.float64))


def normalized_weights(log_weights) -> np.ndarray:
    w = _log_weights(log_weights)
    if w.size == 0:
        raise ValueError("no weights")
    if np.any(np.isnan(w)) or np.any(w == np.inf):
        raise ValueError("log-weights must be finite or -inf")
    if np.all(w == -np.inf):
        raise ValueError("all weights are zero")
    e = np.exp(w - w.max())
    return e / e.sum()


def ess(log_weights) -> float:
    """Normalised effective sample size 1 / (K sum w~^2), in (0, 1]."""
    wn = normalized_weights(log_weights)
    return float(1.0 / (wn.size * np.sum(wn * wn)))


@dataclass
class WeightedSampleSet:
    states: np.ndarray
    log_weights: np.ndarray

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states))
        self.log_weights = np.asarray(self.log_weights, dtype=np.float64)
        if self.states.shape[0] != self.log_weights.shape[0]:
            raise ValueError("states and weights are misaligned")

    @property
    def weights(self) -> np.ndarray:
        return normalized_weights(self.log_weights)

    @property
    def ess(self) -> float:
        return ess(self.log_weights)

    @classmethod
    def from_batch(cls, batch) -> "WeightedSampleSet":
        return cls(batch.final, batch.w)


def self_normalized_expectation(ws: WeightedSampleSet, values) -> float:
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] != ws.states.shape[0]:
        raise ValueError("values are misaligned with states")
    wn = ws.weights
    return float(np.tensordot(wn, values, axes=(0, 0)))


def estimate_log_z(trajectories, log_z0: float) -> float:
    """log Z_0 + logsumexp(w) - log K."""
    w = _log_weights(trajectories)
    if w.size == 0:
        raise ValueError("need at least one trajectory")
    return float(log_z0 + logsumexp(w) - math.log(w.size))


def log_z_lower_bound(batch, path) -> float:
    """Weighted E[log p~_1(x_1)]: the looser bound log Z - H(p_1)."""
    ws = WeightedSampleSet.from_batch(batch)
    return self_normalized_expectation(ws, path.log_p_tilde(1.0, ws.states))


@dataclass
class ElboResult:
    per_datum: np.ndarray  # ELBO per datum (a lower bound on log-likelihood)

    @property
    def mean(self) -> float:
        return float(self.per_datum.mean())

    @property
    def se(self) -> float:
        n = self.per_datum.size
        return float(self.per_datum.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0

    @property
    def nll(self) -> float:
        return -self.mean


def _reverse_rates(model, path, t, X):
    """Reverse-time rates x -> Swap(x, i, tau): [-G(tau, i | x)]_+ p~_t(y) / p~_t(x)."""
    out, inn = model.rate_pair(t, X)
    r = path.neighbor_log_ratios(t, X, clip=None)
    with np.errstate(over="ignore"):
        rev = np.where(inn > 0, inn * np.exp(np.minimum(r, 700.0)), 0.0)
    return out, inn, r, rev


def _flip_index(X, Y, S):
    """Index i * S + tau of the single flip X -> Y, or -1 for no change."""
    diff = X != Y
    moved = diff.any(axis=1)
    i = diff.argmax(axis=1)
    tau = Y[np.arange(len(Y)), i]
    return np.where(moved, i * S + tau, -1)


def _step_log_prob(p, stay, idx):
    n = len(idx)
    chosen = np.where(idx >= 0, p[np.arange(n), np.maximum(idx, 0)], stay)
    with np.errstate(divide="ignore"):
        return np.log(chosen)


def _discrete_reverse_kernel(out, rev, dt):
    """Euler kernel of the reverse rates, never staying where the forward chain cannot."""
    p, stay = step_distribution(rev, dt)
    _, fstay = step_distribution(out, dt)
    force = (fstay == 0.0) & (p.sum(axis=1) > 0.0)
    p[force] /= p[force].sum(axis=1, keepdims=True)
    stay = np.where(force, 0.0, stay)
    return p, stay


def _sample_step(p, rng):
    """Flip index drawn from rows of ``p``; -1 (stay) takes the leftover mass."""
    n, m = p.shape
    u = 1.0 - rng.random(n)
    idx = (np.cumsum(p, axis=1) < u[:, None]).sum(axis=1)
    full = p.sum(axis=1) >= 1.0
    idx = np.where(full, np.minimum(idx, m - 1), idx)  # guard the rounding edge
    return np.where(idx < m, idx, -1)


def _elbo_chunk(model, path, X1, K, rng, method):
    dt = 1.0 / K
    n, d = X1.shape
    S = path.S
    X = X1.copy()
    acc = np.zeros(n)
    for k in range(K, 0, -1):
        # the forward step t_{k-1} -> t_k uses rates at its left end; reverse it with the same time
        t = (k - 1) / K
        out, inn, r, rev = _reverse_rates(model, path, t, X)
        if method == "continuous":
            Y = euler_step_batch(rev, X, dt, rng)  # Y is the state at t_{k-1}
            acc += dt * (rev - out).sum(axis=(1, 2))
            idx = _flip_index(X, Y, S)
            moved = idx >= 0
            # forward jump Y -> X: log p~_t(X) - p~_t(Y) = -r(X -> Y)
            acc[moved] -= r.reshape(n, -1)[np.nonzero(moved)[0], idx[moved]]
        else:
            p_rev, stay_rev = _discrete_reverse_kernel(out, rev, dt)
            idx = _sample_step(p_rev, rng)
            Y = X.copy()
            moved = idx >= 0
            i, tau = np.divmod(idx[moved], S)
            Y[np.nonzero(moved)[0], i] = tau
            acc -= _step_log_prob(p_rev, stay_rev, idx)
            fout, _ = model.rate_pair(t, Y)
            p_fwd, stay_fwd = step_distribution(fout, dt)
            acc += _step_log_prob(p_fwd, stay_fwd, _flip_index(Y, X, S))
        X = Y
    acc += -path.log_z0  # log p_0 under the uniform prior
    return acc


def elbo(model, path, data, K: int, rng, method: str = "continuous") -> ElboResult:
    """Lower bound on log p_model(x) for each datum via one reverse trajectory.

    ``continuous`` accumulates the path-measure log-ratio with rectangle-rule
    integrals; ``discrete`` uses the exact log-ratio of the Euler transition
    kernels, a bound on the Euler sampler's own marginal.
    """
    if method not in ("continuous", "discrete"):
        raise ValueError(f"unknown ELBO method {method!r}")
    if K < 1:
        raise ValueError("K must be at least 1")
    data = np.atleast_2d(np.asarray(data, dtype=np.int64))
    n = data.shape[0]
    starts = list(range(0, n, CHUNK))
    streams = rng.spawn(len(starts))
    parts = [_elbo_chunk(model, path, data[s:s + CHUNK], K, g, method) for s, g in zip(starts, streams)]
    vals = np.concatenate(parts)
    bad = ~np.isfinite(vals)
    if np.any(bad):
        raise FloatingPointError(f"non-finite ELBO for data rows {np.nonzero(bad)[0].tolist()}")
    return ElboResult(vals)


def elbo_nll(model, path, data, K: int, rng, method: str = "continuous") -> float:
    """Mean negative ELBO per datum."""
    return elbo(model, path, data, K, rng, method).nll

"""Gibbs sweeps and locally balanced Metropolis-Hastings refinement.

Both kernels run many independent chains at once: states are (B, d) arrays
and every chain makes its own accept/reject decisions.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit, logsumexp

from .path import AnnealedPath
from .targets import QuadraticBinaryTarget, Target


def _coordinate_flip_ratio(target: Target, X: np.ndarray, i: int, beta: float) -> np.ndarray:
    if isinstance(target, QuadraticBinaryTarget):
        x = X.astype(np.float64)
        s = 1.0 - 2.0 * x[:, i]
        sym = target.W[i] + target.W[:, i]
        r = s * (x @ sym + s * target.W[i, i] + target.h[i])
    else:
        r = target.neighbor_log_ratios(X)[np.arange(X.shape[0]), i, 1 - X[:, i]]
    return beta * r


def gibbs_sweep(target: Target, x, rng, beta: float = 1.0) -> np.ndarray:
    """One systematic-scan sweep (coordinates 0..d-1) over binary states.

    ``beta`` tempers the target, so ``beta = t`` samples p_t on the linear path.
    """
    if target.S != 2:
        raise ValueError("gibbs_sweep needs a binary target")
    X = np.array(x, dtype=np.int64, copy=True)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    for i in range(X.shape[1]):
        p_flip = expit(_coordinate_flip_ratio(target, X, i, beta))
        flip = rng.random(X.shape[0]) < p_flip
        X[flip, i] = 1 - X[flip, i]
    return X[0] if single else X


def gibbs_chain(target: Target, count: int, sweeps: int, rng, burn_in: int = 0,
                thin: int = 1, beta: float = 1.0, x0=None) -> np.ndarray:
    """Run ``count`` chains; returns every ``thin``-th state after burn-in, stacked."""
    X = rng.integers(0, 2, size=(count, target.d)) if x0 is None else np.array(x0)
    out = []
    for s in range(burn_in + sweeps):
        X = gibbs_sweep(target, X, rng, beta)
        if s >= burn_in and (s - burn_in) % thin == 0:
            out.append(X.copy())
    return np.concatenate(out) if out else np.zeros((0, target.d), dtype=np.int64)


def _masked_log_ratios(path: AnnealedPath, t: float, X: np.ndarray) -> np.ndarray:
    r = path.neighbor_log_ratios(t, X, clip=None)
    B, d = X.shape
    r = r.copy()
    r[np.arange(B)[:, None], np.arange(d)[None, :], X] = -np.inf  # not a move
    return r.reshape(B, -1)


def mh_refine(path: AnnealedPath, t: float, x, steps: int, rng, return_rate: bool = False):
    """Square-root locally balanced MH moves leaving p_t invariant.

    The proposal flips (i, tau) with probability proportional to
    exp(r / 2), where r is the log-ratio p~_t(y) / p~_t(x); the acceptance
    probability reduces to min(1, Z(x) / Z(y)) with Z the proposal normaliser.
    """
    X = np.array(x, dtype=np.int64, copy=True)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    B, d = X.shape
    S = path.S
    accepted = 0
    for _ in range(steps):
        half = 0.5 * _masked_log_ratios(path, t, X)
        log_zx = logsumexp(half, axis=1)
        probs = np.exp(half - log_zx[:, None])
        u = 1.0 - rng.random(B)
        idx = np.minimum((np.cumsum(probs, axis=1) < u[:, None]).sum(axis=1), d * S - 1)
        i, tau = np.divmod(idx, S)
        Y = X.copy()
        Y[np.arange(B), i] = tau
        log_zy = logsumexp(0.5 * _masked_log_ratios(path, t, Y), axis=1)
        acc = np.log(1.0 - rng.random(B)) < (log_zx - log_zy)
        X[acc] = Y[acc]
        accepted += int(acc.sum())
    out = X[0] if single else X
    if return_rate:
        return out, accepted / max(1, steps * B)
    return out

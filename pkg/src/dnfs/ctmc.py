"""Euler simulation of the learned CTMC and trajectory bookkeeping.

A model is anything exposing ``rate_pair(t, X) -> (out_rates, in_rates)``
with both arrays shaped (B, d, S): ``out_rates[b, i, tau]`` is the rate of
jumping from X[b] to Swap(X[b], i, tau) and ``in_rates[b, i, tau]`` the rate
of the reverse jump.  For locally equivariant networks these are [G]_+ and
[-G]_+.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .path import AnnealedPath, time_grid

CHUNK = 256  # trajectories per RNG stream; fixed so results ignore thread count


def n_threads() -> int:
    try:
        return max(1, int(os.environ.get("DNFS_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class Trajectory:
    grid: np.ndarray
    states: np.ndarray  # (K + 1, d)
    xi: np.ndarray  # (K,) xi at the left endpoint of each step
    w: float
    jumps: list = field(default_factory=list)  # (k, i, old, new)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def to_json(self, index: int | None = None) -> dict:
        out = {"w": float(self.w), "x0": self.states[0].tolist(), "x1": self.states[-1].tolist(),
               "jumps": [list(map(int, j)) for j in self.jumps]}
        if index is not None:
            out = {"index": index, **out}
        return out


@dataclass
class TrajectoryBatch:
    grid: np.ndarray
    states: np.ndarray  # (N, K + 1, d)
    xi: np.ndarray  # (N, K)
    w: np.ndarray  # (N,)

    @property
    def final(self) -> np.ndarray:
        return self.states[:, -1]

    def __len__(self) -> int:
        return self.states.shape[0]

    def trajectories(self) -> list[Trajectory]:
        out = []
        for n in range(len(self)):
            s = self.states[n]
            jumps = []
            for k in range(s.shape[0] - 1):
                diff = np.nonzero(s[k + 1] != s[k])[0]
                for i in diff:
                    jumps.append((k, int(i), int(s[k, i]), int(s[k + 1, i])))
            out.append(Trajectory(self.grid, s, self.xi[n], float(self.w[n]), jumps))
        return out


def step_distribution(out_rates: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Flip probabilities (B, d*S) and stay probabilities (B,).

    Flip (i, tau) has probability rate * dt.  If the flips exceed 1 in total
    the stay probability is clamped to 0 and the flips renormalised.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    B = out_rates.shape[0]
    p = np.maximum(out_rates.reshape(B, -1), 0.0) * dt
    total = p.sum(axis=1)
    over = total > 1.0
    if np.any(over):
        p[over] /= total[over, None]
    stay = np.where(over, 0.0, 1.0 - total)
    return p, stay


def euler_step_batch(out_rates: np.ndarray, X: np.ndarray, dt: float, rng) -> np.ndarray:
    B, d, S = out_rates.shape
    p, _ = step_distribution(out_rates, dt)
    u = 1.0 - rng.random(B)  # (0, 1]
    idx = (np.cumsum(p, axis=1) < u[:, None]).sum(axis=1)
    Y = X.copy()
    move = idx < d * S
    i, tau = np.divmod(idx[move], S)
    Y[np.nonzero(move)[0], i] = tau
    return Y


def euler_step(G: np.ndarray, x, dt: float, rng) -> np.ndarray:
    """One Euler step from a single state given its (d, S) G matrix."""
    G = np.asarray(G, dtype=np.float64)
    x = np.asarray(x)
    return euler_step_batch(np.maximum(G, 0.0)[None], x[None], dt, rng)[0]


def xi_from_rates(dt_logp: np.ndarray, out_rates: np.ndarray, in_rates: np.ndarray,
                  log_ratios: np.ndarray) -> np.ndarray:
    """xi = dt log p~(x) - sum_{i,tau} (in * exp(log ratio) - out)."""
    stein = (in_rates * np.exp(log_ratios) - out_rates).sum(axis=(1, 2))
    return dt_logp - stein


def xi_batch(path: AnnealedPath, model, t: float, X: np.ndarray, rates=None) -> np.ndarray:
    log_rho = path.target.log_unnorm(X)
    ratios = path.neighbor_log_ratios(t, X)
    out, inn = rates if rates is not None else model.rate_pair(t, X)
    xi = xi_from_rates(path.dt_log_p_tilde(t, X, log_rho=log_rho), out, inn, ratios)
    if not np.all(np.isfinite(xi)):
        bad = int(np.nonzero(~np.isfinite(xi))[0][0])
        raise FloatingPointError(f"non-finite xi at t={t}, x={X[bad].tolist()}")
    return xi


def uniform_prior(count: int, d: int, S: int, rng) -> np.ndarray:
    return rng.integers(0, S, size=(count, d))


def _simulate_chunk(model, path, K, count, rng, refine, record_xi):
    grid = time_grid(K)
    dt = 1.0 / K
    X = uniform_prior(count, path.d, path.S, rng)
    states = np.empty((count, K + 1, path.d), dtype=np.int64)
    states[:, 0] = X
    xis = np.zeros((count, K))
    for k in range(K):
        t = float(grid[k])
        out, inn = model.rate_pair(t, X)
        if record_xi:
            xis[:, k] = xi_batch(path, model, t, X, rates=(out, inn))
        X = euler_step_batch(out, X, dt, rng)
        if refine is not None:
            X = refine(float(grid[k + 1]), X, rng)
        states[:, k + 1] = X
    return states, xis


def simulate_batch(model, path: AnnealedPath, K: int, count: int, rng,
                   refine: Callable | None = None, record_xi: bool = True) -> TrajectoryBatch:
    """Simulate ``count`` trajectories with K Euler steps from the uniform prior.

    Trajectories are generated in fixed chunks, each with its own spawned RNG
    stream, and merged in index order; DNFS_THREADS only changes how many
    chunks run at once.  ``refine(t, X, rng)`` is applied after each step.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    if count < 1:
        raise ValueError("count must be positive")
    sizes = [CHUNK] * (count // CHUNK) + ([count % CHUNK] if count % CHUNK else [])
    streams = rng.spawn(len(sizes))
    jobs = [(model, path, K, n, s, refine, record_xi) for n, s in zip(sizes, streams)]
    threads = n_threads()
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda a: _simulate_chunk(*a), jobs))
    else:
        parts = [_simulate_chunk(*a) for a in jobs]
    states = np.concatenate([p[0] for p in parts])
    xis = np.concatenate([p[1] for p in parts])
    return TrajectoryBatch(time_grid(K), states, xis, xis.sum(axis=1) / K)


def simulate(model, path: AnnealedPath, K: int, count: int, rng, **kw) -> list[Trajectory]:
    return simulate_batch(model, path, K, count, rng, **kw).trajectories()


class ZeroModel:
    """G = 0 everywhere: the identity chain."""

    def __init__(self, d: int, S: int):
        self.d, self.S = d, S

    def rate_pair(self, t, X):
        X = np.atleast_2d(X)
        z = np.zeros((X.shape[0], self.d, self.S))
        return z, z.copy()


def write_samples_csv(fname: str, X: np.ndarray, log_weights: np.ndarray | None = None) -> None:
    X = np.atleast_2d(X)
    with open(fname, "w", newline="") as fh:
        w = csv.writer(fh)
        header = [f"x{i}" for i in range(X.shape[1])]
        if log_weights is not None:
            header.append("log_weight")
        w.writerow(header)
        for n, row in enumerate(X):
            vals = [int(v) for v in row]
            if log_weights is not None:
                vals.append(repr(float(log_weights[n])))
            w.writerow(vals)


def read_samples_csv(fname: str) -> tuple[np.ndarray, np.ndarray | None]:
    with open(fname, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    has_w = header and header[-1] == "log_weight"
    nx = len(header) - int(has_w)
    X = np.array([[int(v) for v in r[:nx]] for r in body], dtype=np.int64).reshape(len(body), nx)
    w = np.array([float(r[-1]) for r in body]) if has_w else None
    return X, w


def write_trajectories_jsonl(fname: str, trajectories: list[Trajectory]) -> None:
    with open(fname, "w") as fh:
        for n, tr in enumerate(trajectories):
            fh.write(json.dumps(tr.to_json(n)) + "\n")

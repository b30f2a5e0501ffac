"""Training objective and the outer/inner coordinate-descent loop.

The loss on a batch of (t, x) pairs is mean (xi_t(x) - c_t)^2, where

    xi_t(x) = dt log p~_t(x) - sum_{i, tau} ([-G]_+ exp(log ratio) - [G]_+)

and c_t is the batch mean of xi at grid time t under the current model,
held fixed (no gradient) while the network is updated.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .ctmc import simulate_batch, xi_batch
from .infer import ess
from .path import AnnealedPath, time_grid
from .tensor import AdamWConfig, ParamStore, Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    K: int = 32
    outer_batch: int = 128  # M trajectories per outer iteration
    inner_batch: int = 128  # N buffer pairs per inner step
    inner_steps: int = 100
    epochs: int = 200
    lr: float = 1e-3
    weight_decay: float = 0.01
    buffer_outer_batches: int = 10
    seed: int = 0

    def __post_init__(self):
        for name in ("K", "outer_batch", "inner_batch", "inner_steps", "buffer_outer_batches"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class CtTable:
    grid: np.ndarray
    values: np.ndarray

    @property
    def K(self) -> int:
        return len(self.grid) - 1

    def index(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        k = np.rint(t * self.K).astype(np.int64)
        if np.any(np.abs(k / self.K - t) > 1e-9):
            raise ValueError("time is not on the grid")
        return k

    def __call__(self, t) -> np.ndarray:
        return self.values[self.index(t)]


def xi(path: AnnealedPath, model, t: float, x) -> float:
    """xi_t(x) for a single state."""
    x = np.asarray(x)
    return float(xi_batch(path, model, float(t), x[None])[0])


def xi_tensor(path: AnnealedPath, model, t, X) -> Tensor:
    """Differentiable xi for a batch; ``t`` is a scalar or one time per row."""
    X = np.asarray(X)
    B = X.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    log_rho = path.target.log_unnorm(X)
    ratios = path.neighbor_log_ratios(t, X)
    G = model.g_tensor(t, X)
    stein = (T.relu(-G) * Tensor(np.exp(ratios)) - T.relu(G)).sum(axis=(1, 2))
    return Tensor(path.dt_log_p_tilde(t, X, log_rho=log_rho)) - stein


def estimate_ct(path: AnnealedPath, model, samples, weights=None) -> CtTable:
    """c_{t_k} = (weighted) mean of xi over the batch at each grid time.

    ``samples`` is a sequence of K + 1 state arrays, one per grid time.
    ``weights`` optionally gives matching nonnegative weights per batch.
    """
    K = len(samples) - 1
    if K < 1:
        raise ValueError("need batches for at least two grid times")
    grid = time_grid(K)
    vals = np.zeros(K + 1)
    for k, X in enumerate(samples):
        X = np.atleast_2d(np.asarray(X))
        if X.shape[0] == 0:
            raise ValueError(f"empty batch at grid time {grid[k]}")
        v = xi_batch(path, model, float(grid[k]), X)
        if weights is None:
            vals[k] = v.mean()
        else:
            w = np.asarray(weights[k], dtype=np.float64)
            vals[k] = math.fsum(w * v) / math.fsum(w)
    return CtTable(grid, vals)


def loss_batch(path: AnnealedPath, model, ts, X, ct: CtTable) -> Tensor:
    ts = np.asarray(ts, dtype=np.float64)
    X = np.asarray(X)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    r = xi_tensor(path, model, ts, X) - Tensor(ct(ts))
    return T.square(r).mean()


def pinn_loss(path: AnnealedPath, model, ct_net, ts, X) -> Tensor:
    """Joint loss with a learned c_t^phi = ct_net(t) in place of the table."""
    ts = np.asarray(ts, dtype=np.float64)
    r = xi_tensor(path, model, ts, X) - ct_net(ts)
    return T.square(r).mean()


class CtNet:
    """Scalar network of t: sinusoidal features -> hidden -> 1."""

    def __init__(self, hidden: int = 16, n_feat: int = 8, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.n_feat = n_feat
        self.params = ParamStore()
        self.params.add("w1", rng.normal(size=(n_feat, hidden)) / math.sqrt(n_feat))
        self.params.add("b1", np.zeros(hidden))
        self.params.add("w2", np.zeros((hidden, 1)))
        self.params.add("b2", np.zeros(1))

    def __call__(self, ts) -> Tensor:
        from .lenet import time_features
        ts = np.atleast_1d(np.asarray(ts, dtype=np.float64))
        f = Tensor(time_features(ts, ts.shape[0], self.n_feat))
        h = T.tanh(f @ self.params["w1"] + self.params["b1"])
        return (h @ self.params["w2"] + self.params["b2"]).reshape(ts.shape[0])


class ReplayBuffer:
    """FIFO buffer of (grid index, state) pairs holding the last few outer batches."""

    def __init__(self, capacity_batches: int, K: int):
        if capacity_batches < 1:
            raise ValueError("capacity must be positive")
        self.K = K
        self.batches: deque = deque(maxlen=capacity_batches)

    def push(self, states: np.ndarray) -> None:
        """``states`` is (M, K + 1, d): every (t_k, x_{t_k}) pair is added."""
        M, K1, d = states.shape
        if K1 != self.K + 1:
            raise ValueError("trajectory length does not match the grid")
        ks = np.repeat(np.arange(K1)[None, :], M, axis=0).reshape(-1)
        self.batches.append((ks, states.reshape(-1, d).copy()))

    def __len__(self) -> int:
        return sum(len(b[0]) for b in self.batches)

    def sample(self, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
        ks = np.concatenate([b[0] for b in self.batches])
        xs = np.concatenate([b[1] for b in self.batches])
        if len(ks) == 0:
            raise ValueError("buffer is empty")
        idx = rng.integers(0, len(ks), size=n)
        return ks[idx] / self.K, xs[idx]


@dataclass
class TrainHistory:
    step_loss: list = field(default_factory=list)
    epochs: list = field(default_factory=list)  # dicts: epoch, loss, mean_abs_ct, ess
    ct: list = field(default_factory=list)
    skipped: int = 0

    @property
    def initial_loss(self) -> float:
        return self.step_loss[0]

    @property
    def final_loss(self) -> float:
        return self.epochs[-1]["loss"]


def train_loop(path: AnnealedPath, model, config: TrainConfig, rng=None,
               callback=None, checkpoint=None) -> TrainHistory:
    """Alternate trajectory generation, c_t refresh and buffer SGD.

    ``checkpoint(model, history)`` is called on completion and on interrupt.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    sim_rng, buf_rng = rng.spawn(2)
    hyper = AdamWConfig(lr=config.lr, weight_decay=config.weight_decay)
    buffer = ReplayBuffer(config.buffer_outer_batches, config.K)
    hist = TrainHistory()
    try:
        for epoch in range(config.epochs):
            batch = simulate_batch(model, path, config.K, config.outer_batch, sim_rng)
            xi_last = xi_batch(path, model, 1.0, batch.final)
            vals = np.append(batch.xi.mean(axis=0), xi_last.mean())
            ct = CtTable(batch.grid, vals)
            buffer.push(batch.states)
            losses = []
            for _ in range(config.inner_steps):
                ts, X = buffer.sample(config.inner_batch, buf_rng)
                with T.Tape() as tape:
                    loss = loss_batch(path, model, ts, X, ct)
                lv = float(loss.data)
                if not math.isfinite(lv):
                    log.warning("non-finite loss at epoch %d; batch discarded", epoch)
                    hist.skipped += 1
                    continue
                grads = tape.gradient(loss, model.params)
                if not T.adamw_step(model.params, grads, hyper):
                    log.warning("non-finite gradient at epoch %d; batch discarded", epoch)
                    hist.skipped += 1
                    continue
                hist.step_loss.append(lv)
                losses.append(lv)
            row = {"epoch": epoch, "loss": float(np.mean(losses)) if losses else float("nan"),
                   "mean_abs_ct": float(np.mean(np.abs(vals))), "ess": float(ess(batch.w))}
            hist.epochs.append(row)
            hist.ct.append(vals)
            if callback is not None:
                callback(row)
    except KeyboardInterrupt:
        if checkpoint is not None:
            checkpoint(model, hist)
        raise
    if checkpoint is not None:
        checkpoint(model, hist)
    return hist

"""Energy-based model training with the flow sampler supplying model samples.

The contrastive-divergence gradient (ascent direction on the log-likelihood)

    grad = sum_k w~_k dE(x_k) - mean_data dE(x)

uses self-normalised importance weights w~ from sampler trajectories run on
the annealed path towards the current p_phi ~ exp(-E_phi).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .ctmc import simulate_batch, xi_batch
from .infer import WeightedSampleSet, estimate_log_z
from .lenet import NetworkConfig, build_network
from .path import AnnealedPath
from .targets import MLPEnergy, QuadraticBinaryTarget
from .train import CtTable, loss_batch

log = logging.getLogger(__name__)


class IsingEBM:
    """p(s) ~ exp(s^T J s) with J symmetric, zero diagonal, stored as its upper triangle."""

    def __init__(self, d: int, l1: float = 0.05, theta=None):
        self.d, self.S, self.l1 = d, 2, l1
        self.iu, self.ju = np.triu_indices(d, 1)
        self.params = T.ParamStore()
        self.params.add("theta", np.zeros(len(self.iu)) if theta is None else theta)

    @property
    def J(self) -> np.ndarray:
        J = np.zeros((self.d, self.d))
        J[self.iu, self.ju] = self.params["theta"].data
        return J + J.T

    def features(self, X) -> np.ndarray:
        s = 2.0 * np.atleast_2d(np.asarray(X, dtype=np.float64)) - 1.0
        return 2.0 * s[:, self.iu] * s[:, self.ju]  # d(s^T J s)/d theta_ij

    def energy(self, X) -> T.Tensor:
        F = T.Tensor(self.features(X))
        theta = self.params["theta"]
        return -(F @ theta.reshape(-1, 1)).reshape(-1)

    def to_target(self) -> QuadraticBinaryTarget:
        J = self.J
        return QuadraticBinaryTarget(4.0 * J, -4.0 * J.sum(axis=1))

    def l1_subgradient(self) -> dict[str, np.ndarray]:
        # penalty l1 * sum_ij |J_ij| counts each stored entry twice; sign(0) = 0
        return {"theta": 2.0 * self.l1 * np.sign(self.params["theta"].data)}


class DeepEBM:
    """Wraps MLPEnergy with the same interface as IsingEBM."""

    def __init__(self, d: int, hidden: int = 64, seed: int = 0):
        self.mlp = MLPEnergy(d, hidden, rng=np.random.default_rng(seed))
        self.d, self.S = d, 2
        self.params = self.mlp.params

    def energy(self, X) -> T.Tensor:
        return self.mlp.energy(X)

    def to_target(self):
        return self.mlp

    def l1_subgradient(self) -> dict[str, np.ndarray]:
        return {}


@dataclass
class CDGradient:
    grads: dict
    ess: float
    degenerate: bool


def cd_gradient(model, data, ws: WeightedSampleSet, eps: float = 1e-3) -> CDGradient:
    """Ascent direction on the log-likelihood estimated with weighted model samples."""
    data = np.atleast_2d(np.asarray(data))
    if data.shape[0] == 0:
        raise ValueError("empty data batch")
    wn = ws.weights
    with T.Tape() as tape:
        e_model = (model.energy(ws.states) * T.Tensor(wn)).sum()
        e_data = model.energy(data).mean()
        obj = e_model - e_data
    grads = tape.gradient(obj, model.params)
    k = len(wn)
    e = ws.ess
    degenerate = e < 1.0 / k + eps
    if degenerate:
        log.warning("degenerate importance weights (ESS %.4f with K=%d)", e, k)
    return CDGradient(grads, e, degenerate)


def mmd(X, Y, bandwidth: float = 0.1) -> float:
    """Biased MMD^2 with k(x, y) = exp(-Hamming(x, y) / (d * bandwidth))."""
    X = np.atleast_2d(np.asarray(X))
    Y = np.atleast_2d(np.asarray(Y))
    if X.shape[0] == 0 or Y.shape[0] == 0:
        raise ValueError("empty sample set")
    if X.shape[1] != Y.shape[1]:
        raise ValueError("sample sets differ in dimension")
    d = X.shape[1]
    # canonical row order makes identical multisets give identical sums
    X = X[np.lexsort(X.T[::-1])]
    Y = Y[np.lexsort(Y.T[::-1])]

    def kmean(A, B):
        ham = (A[:, None, :] != B[None, :, :]).sum(axis=2)
        return np.exp(-ham / (d * bandwidth)).mean()

    return float(kmean(X, X) + kmean(Y, Y) - 2.0 * kmean(X, Y))


@dataclass
class EBMTrainConfig:
    ebm_steps: int = 100
    sampler_steps_per_ebm_step: int = 10
    lr: float = 1e-4
    batch: int = 128  # data rows per EBM step
    num_samples: int = 128  # importance samples per EBM step
    K: int = 16
    sampler_lr: float = 1e-3
    sampler_batch: int = 64
    hidden: int = 32
    layers: int = 1
    heads: int = 2
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("ebm_steps", "sampler_steps_per_ebm_step", "batch", "num_samples", "K"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.sampler_lr <= 0:
            raise ValueError("learning rates must be positive")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class EBMResult:
    model: object
    sampler: object
    history: list = field(default_factory=list)


def _sampler_for(d: int, cfg: EBMTrainConfig):
    return build_network(NetworkConfig(variant="leTF", d=d, S=2, hidden=cfg.hidden,
                                       layers=cfg.layers, heads=cfg.heads, seed=cfg.seed))


def alternate(model, data, cfg: EBMTrainConfig, callback=None) -> EBMResult:
    """10 sampler updates, then one EBM update; the path is refreshed after each EBM step."""
    rng = np.random.default_rng(cfg.seed)
    sim_rng, buf_rng, data_rng = rng.spawn(3)
    data = np.atleast_2d(np.asarray(data, dtype=np.int64))
    sampler = _sampler_for(model.d, cfg)
    s_hyper = T.AdamWConfig(lr=cfg.sampler_lr)
    e_hyper = T.AdamWConfig(lr=cfg.lr, weight_decay=cfg.weight_decay)
    hist = []
    path = AnnealedPath(model.to_target())
    for step in range(cfg.ebm_steps):
        batch = simulate_batch(sampler, path, cfg.K, cfg.num_samples, sim_rng)
        vals = np.append(batch.xi.mean(axis=0), xi_batch(path, sampler, 1.0, batch.final).mean())
        ct = CtTable(batch.grid, vals)
        M, K1, d = batch.states.shape
        ks = np.tile(np.arange(K1), M)
        xs = batch.states.reshape(-1, d)
        s_losses = []
        for _ in range(cfg.sampler_steps_per_ebm_step):
            idx = buf_rng.integers(0, len(ks), size=cfg.sampler_batch)
            with T.Tape() as tape:
                loss = loss_batch(path, sampler, ks[idx] / cfg.K, xs[idx], ct)
            if math.isfinite(float(loss.data)) and T.adamw_step(
                    sampler.params, tape.gradient(loss, sampler.params), s_hyper):
                s_losses.append(float(loss.data))
        ws = WeightedSampleSet(batch.final, batch.w)
        rows = data_rng.integers(0, data.shape[0], size=cfg.batch)
        cd = cd_gradient(model, data[rows], ws)
        pen = model.l1_subgradient()
        # descent on the negative log-likelihood plus penalty
        grads = {k: -g + pen.get(k, 0.0) for k, g in cd.grads.items()}
        if not T.adamw_step(model.params, grads, e_hyper):
            raise FloatingPointError(f"non-finite EBM gradient at step {step}")
        path = AnnealedPath(model.to_target())
        row = {"step": step, "sampler_loss": float(np.mean(s_losses)) if s_losses else float("nan"),
               "ess": cd.ess, "log_z": estimate_log_z(batch.w, path.log_z0)}
        hist.append(row)
        if callback is not None:
            callback(row)
    return EBMResult(model, sampler, hist)


def neg_log_rmse(J_learned: np.ndarray, J_true: np.ndarray) -> float:
    rmse = math.sqrt(float(np.mean((J_learned - J_true) ** 2)))
    return -math.log(max(rmse, 1e-300))


def edge_precision(J_learned: np.ndarray, A_true: np.ndarray) -> float:
    """Fraction of the top-|E| learned couplings (by magnitude) that are true edges."""
    iu, ju = np.triu_indices(len(A_true), 1)
    truth = A_true[iu, ju] != 0
    n_edges = int(truth.sum())
    if n_edges == 0:
        return 1.0
    top = np.argsort(-np.abs(J_learned[iu, ju]), kind="stable")[:n_edges]
    return float(truth[top].mean())


def train_ising_ebm(data, cfg: EBMTrainConfig, J_true=None, l1: float = 0.05, callback=None) -> EBMResult:
    data = np.atleast_2d(np.asarray(data))
    model = IsingEBM(data.shape[1], l1=l1)
    res = alternate(model, data, cfg, callback)
    if J_true is not None:
        J = model.J
        res.history.append({"neg_log_rmse": neg_log_rmse(J, J_true),
                            "edge_precision": edge_precision(J, (J_true != 0).astype(float))})
    return res


def train_deep_ebm(data, cfg: EBMTrainConfig, held_out=None, energy_hidden: int = 64,
                   callback=None) -> EBMResult:
    data = np.atleast_2d(np.asarray(data))
    model = DeepEBM(data.shape[1], energy_hidden, seed=cfg.seed)
    res = alternate(model, data, cfg, callback)
    if held_out is not None:
        res.history.append(evaluate_deep_ebm(res, held_out, cfg))
    return res


def evaluate_deep_ebm(res: EBMResult, held_out, cfg: EBMTrainConfig, count: int = 256) -> dict:
    rng = np.random.default_rng(cfg.seed + 1)
    path = AnnealedPath(res.model.to_target())
    batch = simulate_batch(res.sampler, path, cfg.K, count, rng)
    log_z = estimate_log_z(batch.w, path.log_z0)
    held_out = np.atleast_2d(held_out)
    nll = float(res.model.energy(held_out).data.mean() + log_z)
    return {"mmd": mmd(batch.final, held_out), "nll": nll, "log_z": log_z}


def write_matrix_csv(fname: str, M: np.ndarray) -> None:
    with open(fname, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in np.atleast_2d(M):
            w.writerow([repr(float(v)) for v in row])

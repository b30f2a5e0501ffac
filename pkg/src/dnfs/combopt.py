"""Combinatorial optimisation as low-temperature sampling (MIS and MaxCut).

MIS:     log rho(x) = invT * (1^T x - lam/2 x^T A x)
MaxCut:  log rho(x) = -invT * 1/4 s^T A s with spins s = 2x - 1

Both are quadratic in the bits, so they reuse the closed-form flip ratios of
:class:`~dnfs.targets.QuadraticBinaryTarget`.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .ctmc import simulate_batch, xi_batch
from .mcmc import mh_refine
from .path import AnnealedPath
from .targets import QuadraticBinaryTarget
from .train import CtTable, TrainConfig, loss_batch

MIS_LAMBDA = 1.0001


@dataclass
class Graph:
    n: int
    edges: list = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        clean = []
        for i, j in self.edges:
            i, j = int(i), int(j)
            if i == j:
                raise ValueError(f"self-loop at vertex {i}")
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise ValueError(f"edge ({i}, {j}) outside 0..{self.n - 1}")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ValueError(f"duplicate edge {key}")
            seen.add(key)
            clean.append(key)
        self.edges = sorted(clean)

    @property
    def adjacency(self) -> np.ndarray:
        A = np.zeros((self.n, self.n))
        for i, j in self.edges:
            A[i, j] = A[j, i] = 1.0
        return A

    @property
    def neighbours(self) -> list[list[int]]:
        nb = [[] for _ in range(self.n)]
        for i, j in self.edges:
            nb[i].append(j)
            nb[j].append(i)
        return nb

    def to_json(self) -> dict:
        return {"n": self.n, "edges": [list(e) for e in self.edges]}

    @classmethod
    def from_json(cls, obj: dict) -> "Graph":
        return cls(int(obj["n"]), [tuple(e) for e in obj["edges"]])


def read_graphs(fname: str) -> list[Graph]:
    with open(fname) as fh:
        return [Graph.from_json(json.loads(line)) for line in fh if line.strip()]


def write_graphs(fname: str, graphs: list[Graph]) -> None:
    with open(fname, "w") as fh:
        for g in graphs:
            fh.write(json.dumps(g.to_json()) + "\n")


def make_er_graph(n_range, p: float, rng) -> Graph:
    lo, hi = n_range
    if not 0.0 <= p <= 1.0:
        raise ValueError("edge probability must lie in [0, 1]")
    n = int(rng.integers(lo, hi + 1))
    iu, ju = np.triu_indices(n, 1)
    keep = rng.random(iu.size) < p
    return Graph(n, list(zip(iu[keep].tolist(), ju[keep].tolist())))


def make_ba_graph(n_range, m: int, rng) -> Graph:
    """Preferential attachment seeded with a complete graph on m vertices.

    Each later vertex attaches to m distinct earlier vertices chosen with
    probability proportional to degree, so |E| = m(m-1)/2 + m(n-m).
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    lo, hi = n_range
    n = int(rng.integers(lo, hi + 1))
    if n < m + 1:
        raise ValueError("need more vertices than attachments")
    edges = [(i, j) for i in range(m) for j in range(i + 1, m)]
    deg = np.zeros(n)
    for i, j in edges:
        deg[i] += 1
        deg[j] += 1
    for v in range(m, n):
        w = deg[:v] + (deg[:v].sum() == 0)  # m = 1 seed has no edges yet
        targets = rng.choice(v, size=m, replace=False, p=w / w.sum())
        for u in sorted(int(u) for u in targets):
            edges.append((u, v))
            deg[u] += 1
            deg[v] += 1
    return Graph(n, edges)


def mis_target(graph: Graph, lam: float = MIS_LAMBDA, invT: float = 1.0) -> QuadraticBinaryTarget:
    if lam <= 1.0:
        raise ValueError("MIS penalty lambda must exceed 1")
    A = graph.adjacency
    return QuadraticBinaryTarget(-0.5 * lam * invT * A, invT * np.ones(graph.n))


def mis_flip_log_ratios(graph: Graph, x, lam: float = MIS_LAMBDA, invT: float = 1.0) -> np.ndarray:
    """(1 - 2x) * invT * (1 - lam A x)."""
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    out = (1.0 - 2.0 * X) * invT * (1.0 - lam * X @ graph.adjacency)
    return out[0] if np.ndim(x) == 1 else out


def maxcut_target(graph: Graph, invT: float = 1.0) -> QuadraticBinaryTarget:
    # -1/4 s^T A s = -(b^T A b - deg^T b) - |E|/2 with s = 2b - 1; constant dropped
    A = graph.adjacency
    return QuadraticBinaryTarget(-invT * A, invT * A.sum(axis=1))


def maxcut_energy(graph: Graph, x) -> np.ndarray:
    """1/4 s^T A s on bits x."""
    s = 2.0 * np.atleast_2d(np.asarray(x, dtype=np.float64)) - 1.0
    e = 0.25 * np.einsum("bi,ij,bj->b", s, graph.adjacency, s)
    return e[0] if np.ndim(x) == 1 else e


def cut_value(graph: Graph, x) -> np.ndarray:
    X = np.atleast_2d(np.asarray(x))
    if not graph.edges:
        v = np.zeros(X.shape[0], dtype=np.int64)
    else:
        e = np.array(graph.edges)
        v = (X[:, e[:, 0]] != X[:, e[:, 1]]).sum(axis=1)
    return v[0] if np.ndim(x) == 1 else v


def is_independent(graph: Graph, x) -> np.ndarray:
    X = np.atleast_2d(np.asarray(x))
    if not graph.edges:
        ok = np.ones(X.shape[0], dtype=bool)
    else:
        e = np.array(graph.edges)
        ok = ~np.any((X[:, e[:, 0]] == 1) & (X[:, e[:, 1]] == 1), axis=1)
    return ok[0] if np.ndim(x) == 1 else ok


def postprocess_mis(graph: Graph, x) -> np.ndarray:
    """Scan vertices in order; a kept vertex evicts every selected neighbour."""
    X = np.array(np.atleast_2d(x), dtype=np.int64, copy=True)
    nb = graph.neighbours
    for i in range(graph.n):
        on = X[:, i] == 1
        if nb[i] and np.any(on):
            cols = np.array(nb[i])
            X[np.ix_(on, cols)] = 0
    return X[0] if np.ndim(x) == 1 else X


def exact_mis(graph: Graph) -> int:
    """Maximum independent set size by branch and bound (n <= 30)."""
    if graph.n > 30:
        raise ValueError("exact_mis is limited to 30 vertices")
    nbr = [0] * graph.n
    for i, j in graph.edges:
        nbr[i] |= 1 << j
        nbr[j] |= 1 << i
    best = 0

    def rec(cand: int, size: int) -> None:
        nonlocal best
        while True:
            if cand == 0:
                best = max(best, size)
                return
            if size + bin(cand).count("1") <= best:
                return
            # vertices of degree <= 1 within the candidates are always safe to take
            low = None
            hi_v, hi_d = -1, -1
            c = cand
            while c:
                v = (c & -c).bit_length() - 1
                c &= c - 1
                dv = bin(nbr[v] & cand).count("1")
                if dv <= 1:
                    low = v
                    break
                if dv > hi_d:
                    hi_v, hi_d = v, dv
            if low is None:
                break
            cand &= ~(nbr[low] | (1 << low))
            size += 1
        v = hi_v
        rec(cand & ~(nbr[v] | (1 << v)), size + 1)
        rec(cand & ~(1 << v), size)

    rec((1 << graph.n) - 1, 0)
    return best


def exact_maxcut(graph: Graph) -> int:
    """Maximum cut by enumeration with vertex 0 fixed (n <= 22)."""
    n = graph.n
    if n > 22:
        raise ValueError("exact_maxcut is limited to 22 vertices")
    if not graph.edges or n < 2:
        return 0
    e = np.array(graph.edges)
    best = 0
    idx = np.arange(2 ** (n - 1), dtype=np.int64)
    for start in range(0, idx.size, 1 << 16):
        block = idx[start:start + (1 << 16)] << 1  # bit 0 (vertex 0) stays 0
        bits = (block[:, None] >> np.arange(n)) & 1
        best = max(best, int((bits[:, e[:, 0]] != bits[:, e[:, 1]]).sum(axis=1).max()))
    return best


@dataclass
class CombOptConfig:
    kind: str = "mis"
    lam: float = MIS_LAMBDA
    invT_start: float = 0.1
    invT_end: float = 5.0
    K: int = 32
    batch: int = 128  # samples per instance at evaluation
    refine_steps: int = 0

    def __post_init__(self):
        if self.kind not in ("mis", "maxcut"):
            raise ValueError(f"unknown problem kind {self.kind!r}")
        if self.kind == "mis" and self.lam <= 1.0:
            raise ValueError("MIS penalty lambda must exceed 1")

    def invT(self, epoch: int, epochs: int) -> float:
        if epochs <= 1:
            return self.invT_end
        a = epoch / (epochs - 1)
        return self.invT_start + a * (self.invT_end - self.invT_start)


def problem_target(cfg: CombOptConfig, graph: Graph, invT: float) -> QuadraticBinaryTarget:
    if cfg.kind == "mis":
        return mis_target(graph, cfg.lam, invT)
    return maxcut_target(graph, invT)


def objective(cfg: CombOptConfig, graph: Graph, X) -> np.ndarray:
    if cfg.kind == "mis":
        return np.atleast_2d(X).sum(axis=1)
    return cut_value(graph, np.atleast_2d(X))


def _bind(model, graph):
    return model.bind(graph) if hasattr(model, "bind") and model.config.variant == "leGF" else model


def solve(cfg: CombOptConfig, graph: Graph, model, rng, invT: float | None = None) -> dict:
    """Sample a batch, optionally refine along the path, and post-process."""
    t0 = time.perf_counter()
    invT = cfg.invT_end if invT is None else invT
    path = AnnealedPath(problem_target(cfg, graph, invT))
    m = _bind(model, graph)
    refine = None
    if cfg.refine_steps > 0:
        refine = lambda t, X, g: mh_refine(path, t, X, cfg.refine_steps, g)
    batch = simulate_batch(m, path, cfg.K, cfg.batch, rng, refine=refine, record_xi=False)
    X = batch.final
    if cfg.kind == "mis":
        X = postprocess_mis(graph, X)
        assert np.all(is_independent(graph, X)), "post-processing left an infeasible set"
    obj = objective(cfg, graph, X)
    best = int(np.argmax(obj))
    return {"solution": X[best], "objective": int(obj[best]), "mean_objective": float(obj.mean()),
            "samples": X, "wallclock": time.perf_counter() - t0}


def train_amortised(cfg: CombOptConfig, graphs: list[Graph], model, tcfg: TrainConfig,
                    rng=None, callback=None) -> list[dict]:
    """Train one graph-conditioned sampler over a set of instances.

    Each epoch visits one graph (cycling), simulates a fresh outer batch at
    the annealed inverse temperature, refreshes c_t and takes ``inner_steps``
    optimiser steps on that batch.
    """
    rng = np.random.default_rng(tcfg.seed) if rng is None else rng
    sim_rng, buf_rng = rng.spawn(2)
    hyper = T.AdamWConfig(lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    rows = []
    for epoch in range(tcfg.epochs):
        g = graphs[epoch % len(graphs)]
        invT = cfg.invT(epoch, tcfg.epochs)
        path = AnnealedPath(problem_target(cfg, g, invT))
        m = _bind(model, g)
        batch = simulate_batch(m, path, tcfg.K, tcfg.outer_batch, sim_rng)
        vals = np.append(batch.xi.mean(axis=0), xi_batch(path, m, 1.0, batch.final).mean())
        ct = CtTable(batch.grid, vals)
        M, K1, d = batch.states.shape
        ks = np.tile(np.arange(K1), M)
        xs = batch.states.reshape(-1, d)
        losses = []
        for _ in range(tcfg.inner_steps):
            idx = buf_rng.integers(0, len(ks), size=tcfg.inner_batch)
            with T.Tape() as tape:
                loss = loss_batch(path, m, ks[idx] / tcfg.K, xs[idx], ct)
            if not math.isfinite(float(loss.data)):
                continue
            if T.adamw_step(model.params, tape.gradient(loss, model.params), hyper):
                losses.append(float(loss.data))
        row = {"epoch": epoch, "invT": invT, "loss": float(np.mean(losses)) if losses else float("nan"),
               "mean_objective": float(objective(cfg, g, batch.final).mean())}
        rows.append(row)
        if callback is not None:
            callback(row)
    return rows


def write_results_csv(fname: str, rows: list[dict]) -> None:
    cols = ["instance", "objective", "oracle", "drop", "seconds"]
    with open(fname, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([r["instance"], r["objective"], r.get("oracle", ""),
                        "" if r.get("drop") is None else repr(float(r["drop"])),
                        repr(float(r["seconds"]))])

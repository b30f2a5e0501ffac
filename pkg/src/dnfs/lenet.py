"""Locally equivariant networks G(tau, i | x) = (w_tau - w_{x_i})^T H(x)_i.

H is a hollow network: row i of H never reads token x_i.  Four hollow bodies
are provided:

* ``leMLP``  sum_k act(W^k X + b^k) with zero-diagonal position mixers W^k.
* ``leAttn`` one attention layer where position i attends to s != i.  The
  query comes from position i's positional/time embedding, never from x_i.
* ``leTF``   hollow transformer: a left-to-right and a right-to-left stream,
  fused by a masked readout attention.
* ``leGF``   leTF with a learned shortest-path-distance bias on every
  attention logit (shared by all layers).

Stream layout.  Each stream prepends a learned boundary key.  Layer 1 is
strictly causal (query i sees tokens j < i for left-to-right, j > i for
right-to-left) and its query and residual come from the positional/time
embedding only, so the state at position i summarises x_{<i} (resp. x_{>i}).
Later layers are causal including the diagonal, which keeps that property.
The readout queries Q = Q_L + Q_R and attends to left states j <= i and right
states j >= i with logits scaled by 1/sqrt(2 d_k).
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.sparse.csgraph import shortest_path

from . import tensor as T
from .tensor import ParamStore, Tensor

VARIANTS = ("leMLP", "leAttn", "leTF", "leGF")
NEG_INF = -np.inf


@dataclass
class NetworkConfig:
    variant: str = "leTF"
    d: int = 16
    S: int = 2
    hidden: int = 128
    layers: int = 3
    heads: int = 4
    time_dim: int = 16
    ffn_mult: int = 2
    mlp_terms: int = 2
    max_d: int | None = None  # leGF: largest graph size the positional table covers
    maxdist: int = 8
    zero_init_output: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.hidden % self.heads:
            raise ValueError("hidden width must be divisible by heads")
        if self.variant in ("leTF", "leGF") and self.layers < 1:
            raise ValueError("leTF/leGF need at least one layer")
        if self.time_dim % 2:
            raise ValueError("time_dim must be even")
        if self.max_d is None:
            self.max_d = self.d

    def to_json(self) -> dict:
        return asdict(self)


def time_features(t, B: int, n: int) -> np.ndarray:
    """Sinusoidal features of t, frequencies geometric in [1, 100]."""
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    freqs = np.exp(np.linspace(0.0, math.log(100.0), n // 2))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def shortest_path_buckets(adjacency, maxdist: int = 8) -> np.ndarray:
    """All-pairs BFS distances clamped to ``maxdist``; disconnected -> maxdist + 1."""
    A = np.asarray(adjacency, dtype=np.float64)
    dist = shortest_path(A, method="D", unweighted=True, directed=False)
    out = np.where(np.isinf(dist), maxdist + 1, np.minimum(dist, maxdist))
    return out.astype(np.int64)


def legf_bias(graph, maxdist: int = 8) -> np.ndarray:
    adj = graph.adjacency if hasattr(graph, "adjacency") else graph
    return shortest_path_buckets(adj, maxdist)


def _causal_masks(d: int, strict: bool) -> tuple[np.ndarray, np.ndarray]:
    """Blocked-entry masks (True = blocked) of shape (d, d + 1); column 0 is the boundary."""
    i = np.arange(d)[:, None]
    j = np.arange(d)[None, :]
    l2r = (j >= i) if strict else (j > i)
    r2l = (j <= i) if strict else (j < i)
    pad = np.zeros((d, 1), dtype=bool)
    return np.concatenate([pad, l2r], 1), np.concatenate([pad, r2l], 1)


class LENet:
    """Shared machinery: embeddings, time conditioning and the G readout."""

    def __init__(self, config: NetworkConfig, params: ParamStore | None = None):
        self.config = config
        self.graph_buckets: np.ndarray | None = None
        if params is None:
            params = ParamStore()
            self._rng = np.random.default_rng(config.seed)
            self._init_params(params)
        self.params = params

    # -- parameter helpers
    def _lin(self, params, name, n_in, n_out, bias=True):
        params.add(f"{name}.w", self._rng.normal(size=(n_in, n_out)) / math.sqrt(n_in))
        if bias:
            params.add(f"{name}.b", np.zeros(n_out))

    def _ln(self, params, name, n):
        params.add(f"{name}.g", np.ones(n))
        params.add(f"{name}.b", np.zeros(n))

    def _init_params(self, params: ParamStore) -> None:
        c = self.config
        params.add("tok", self._rng.normal(size=(c.S, c.hidden)) / math.sqrt(c.hidden))
        params.add("pos", self._rng.normal(size=(c.max_d, c.hidden)) / math.sqrt(c.hidden))
        self._lin(params, "time", c.time_dim, c.hidden)
        self._init_body(params)
        scale = 0.0 if c.zero_init_output else 1.0 / math.sqrt(c.hidden)
        params.add("omega", self._rng.normal(size=(c.S, c.hidden)) * scale)

    def _init_body(self, params: ParamStore) -> None:
        raise NotImplementedError

    def linear(self, x: Tensor, name: str) -> Tensor:
        y = x @ self.params[f"{name}.w"]
        if f"{name}.b" in self.params:
            y = y + self.params[f"{name}.b"]
        return y

    def ln(self, x: Tensor, name: str) -> Tensor:
        return T.layernorm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _time(self, t, B: int, L: int) -> Tensor:
        f = time_features(t, B, self.config.time_dim)
        f = np.repeat(f[:, None, :], L, axis=1)
        return self.linear(Tensor(f), "time")

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X)
        if X.ndim == 1:
            X = X[None, :]
        c = self.config
        if X.ndim != 2:
            raise ValueError(f"states must be (B, d), got {X.shape}")
        d = X.shape[1]
        if self.config.variant == "leGF":
            if d > c.max_d:
                raise ValueError(f"graph of size {d} exceeds max_d={c.max_d}")
            if self.graph_buckets is None or self.graph_buckets.shape != (d, d):
                raise ValueError("leGF needs a bound graph matching the state size; use bind(graph)")
        elif d != c.d:
            raise ValueError(f"state dimension {d} does not match network d={c.d}")
        if X.size and (X.min() < 0 or X.max() >= c.S):
            raise ValueError(f"tokens must lie in [0, {c.S})")
        return X.astype(np.int64)

    def bind(self, graph) -> "LENet":
        """A view sharing parameters, conditioned on ``graph`` (leGF only)."""
        view = copy.copy(self)
        view.graph_buckets = legf_bias(graph, self.config.maxdist)
        return view

    # -- public API
    def hollow(self, t, X) -> Tensor:
        X = self._check(X)
        return self._hollow(t, X)

    def g_tensor(self, t, X) -> Tensor:
        """(B, d, S) tensor of G(tau, i | x), recorded on the active tape."""
        X = self._check(X)
        H = self._hollow(t, X)
        B, d = X.shape
        S = self.config.S
        scores = H @ T.apply("transpose", [self.params["omega"]], axes=(1, 0))  # (B, d, S)
        onehot = np.zeros((B, d, S))
        onehot[np.arange(B)[:, None], np.arange(d)[None, :], X] = 1.0
        # exact gather of scores[b, i, x_i]: one non-zero product plus exact zeros
        own = (scores * Tensor(onehot)).sum(axis=-1, keepdims=True)  # (B, d, 1)
        own = own @ Tensor(np.ones((1, S)))
        return scores - own

    def g(self, t, X) -> np.ndarray:
        return self.g_tensor(t, X).data

    def rate_pair(self, t, X) -> tuple[np.ndarray, np.ndarray]:
        """Outgoing rates [G]_+ and incoming rates [-G]_+ (one-way construction)."""
        G = self.g(t, X)
        return np.maximum(G, 0.0), np.maximum(-G, 0.0)

    def _hollow(self, t, X: np.ndarray) -> Tensor:
        raise NotImplementedError

    # -- shared embeddings
    def _embed(self, t, X):
        B, d = X.shape
        pos = self.params["pos"][:d]
        time = self._time(t, B, d)
        tok = T.embed(self.params["tok"], X)
        return tok, pos, time

    def _attend(self, name: str, q_src: Tensor, kv: Tensor, mask: np.ndarray,
                bias: Tensor | None, scale_dim: int | None = None) -> Tensor:
        c = self.config
        B, Lq, h = q_src.shape
        Lk = kv.shape[1]
        H, dk = c.heads, h // c.heads
        q = self.linear(q_src, f"{name}.q").reshape(B, Lq, H, dk).transpose(0, 2, 1, 3)
        k = self.linear(kv, f"{name}.k").reshape(B, Lk, H, dk).transpose(0, 2, 3, 1)
        v = self.linear(kv, f"{name}.v").reshape(B, Lk, H, dk).transpose(0, 2, 1, 3)
        logits = (q @ k) * (1.0 / math.sqrt(scale_dim or dk))
        if bias is not None:
            logits = logits + bias
        a = T.softmax(T.masked_fill(logits, mask, NEG_INF))
        o = (a @ v).transpose(0, 2, 1, 3).reshape(B, Lq, h)
        return self.linear(o, f"{name}.o")

    def _init_attn(self, params, name, h):
        for part in "qvo":
            self._lin(params, f"{name}.{part}", h, h)
        self._lin(params, f"{name}.k", h, h, bias=False)  # a key bias only shifts logits row-wise

    def _init_ffn(self, params, name, h):
        self._lin(params, f"{name}.fc1", h, self.config.ffn_mult * h)
        self._lin(params, f"{name}.fc2", self.config.ffn_mult * h, h)

    def _ffn(self, x: Tensor, name: str) -> Tensor:
        return self.linear(T.swish(self.linear(x, f"{name}.fc1")), f"{name}.fc2")


class LeMLP(LENet):
    def _init_body(self, params):
        c = self.config
        for k in range(c.mlp_terms):
            params.add(f"mlp.{k}.mix", self._rng.normal(size=(c.d, c.d)) / math.sqrt(c.d))
            params.add(f"mlp.{k}.b", np.zeros(c.hidden))

    def _hollow(self, t, X):
        c = self.config
        tok, pos, time = self._embed(t, X)
        emb = tok + pos + time
        own = time + pos  # position/time context: independent of x_i
        hollow_mask = Tensor(1.0 - np.eye(c.d))
        embT = emb.transpose(0, 2, 1)  # (B, h, d)
        out = None
        for k in range(c.mlp_terms):
            mix = self.params[f"mlp.{k}.mix"] * hollow_mask  # zero diagonal
            pre = (embT @ mix.transpose(1, 0)).transpose(0, 2, 1) + self.params[f"mlp.{k}.b"]
            term = T.tanh(pre + own)
            out = term if out is None else out + term
        return out


class LeAttn(LENet):
    def _init_body(self, params):
        h = self.config.hidden
        params.add("attn.bnd", self._rng.normal(size=(1, h)) / math.sqrt(h))
        self._init_attn(params, "attn", h)

    def _hollow(self, t, X):
        B, d = X.shape
        tok, pos, time = self._embed(t, X)
        keys = T.concat([self._boundary(t, B, "attn.bnd"), tok + pos + time], axis=1)
        mask = np.concatenate([np.zeros((d, 1), bool), np.eye(d, dtype=bool)], 1)
        return self._attend("attn", time + pos, keys, mask, None)

    def _boundary(self, t, B, name):
        return self._time(t, B, 1) + self.params[name]


class LeTF(LENet):
    def _init_body(self, params):
        c = self.config
        h = c.hidden
        for s in ("L", "R"):
            params.add(f"{s}.bnd", self._rng.normal(size=(1, h)) / math.sqrt(h))
            for l in range(c.layers):
                p = f"{s}.{l}"
                self._ln(params, f"{p}.ln_q", h)
                self._ln(params, f"{p}.ln_kv", h)
                self._ln(params, f"{p}.ln_ff", h)
                self._init_attn(params, f"{p}.attn", h)
                self._init_ffn(params, f"{p}.ff", h)
            self._ln(params, f"{s}.ln_out", h)
            self._lin(params, f"read.{s}.q", h, h)
            self._lin(params, f"read.{s}.k", h, h, bias=False)
            self._lin(params, f"read.{s}.v", h, h)
        self._lin(params, "read.o", h, h)
        self._ln(params, "read.ln_ff", h)
        self._init_ffn(params, "read.ff", h)
        self._ln(params, "read.ln_out", h)
        if c.variant == "leGF":
            params.add("gf.bias", np.zeros((c.maxdist + 2, 1)))

    def _bias(self, buckets: np.ndarray | None) -> Tensor | None:
        if buckets is None:
            return None
        return T.embed(self.params["gf.bias"], buckets).reshape(buckets.shape)

    def _stream(self, s: str, t, tok, base, masks_strict, masks_causal, bias_stream):
        c = self.config
        B = tok.shape[0]
        bnd = self._time(t, B, 1) + self.params[f"{s}.bnd"]
        h = None
        for l in range(c.layers):
            p = f"{s}.{l}"
            if l == 0:
                q_src, kv_src, mask = base, tok + base, masks_strict
            else:
                q_src, kv_src, mask = h, h, masks_causal
            kv = self.ln(T.concat([bnd, kv_src], axis=1), f"{p}.ln_kv")
            h = q_src + self._attend(f"{p}.attn", self.ln(q_src, f"{p}.ln_q"), kv, mask, bias_stream)
            h = h + self._ffn(self.ln(h, f"{p}.ln_ff"), f"{p}.ff")
        return self.ln(h, f"{s}.ln_out")

    def _hollow(self, t, X):
        c = self.config
        B, d = X.shape
        tok, pos, time = self._embed(t, X)
        base = time + pos
        strict_l, strict_r = _causal_masks(d, strict=True)
        causal_l, causal_r = _causal_masks(d, strict=False)
        buckets = self.graph_buckets if c.variant == "leGF" else None
        if buckets is not None:
            # boundary column shares the distance-0 bucket
            stream_b = self._bias(np.concatenate([np.zeros((d, 1), np.int64), buckets], 1))
            read_b = self._bias(np.concatenate([buckets, buckets], 1))
        else:
            stream_b = read_b = None
        hl = self._stream("L", t, tok, base, strict_l, causal_l, stream_b)
        hr = self._stream("R", t, tok, base, strict_r, causal_r, stream_b)

        H, dk = c.heads, c.hidden // c.heads
        q = self.linear(hl, "read.L.q") + self.linear(hr, "read.R.q")
        k = T.concat([self.linear(hl, "read.L.k"), self.linear(hr, "read.R.k")], axis=1)
        v = T.concat([self.linear(hl, "read.L.v"), self.linear(hr, "read.R.v")], axis=1)
        i = np.arange(d)[:, None]
        j = np.arange(d)[None, :]
        mask = np.concatenate([j > i, j < i], axis=1)  # (d, 2d)
        qh = q.reshape(B, d, H, dk).transpose(0, 2, 1, 3)
        kh = k.reshape(B, 2 * d, H, dk).transpose(0, 2, 3, 1)
        vh = v.reshape(B, 2 * d, H, dk).transpose(0, 2, 1, 3)
        logits = (qh @ kh) * (1.0 / math.sqrt(2 * dk))
        if read_b is not None:
            logits = logits + read_b
        a = T.softmax(T.masked_fill(logits, mask, NEG_INF))
        o = (a @ vh).transpose(0, 2, 1, 3).reshape(B, d, c.hidden)
        out = self.linear(o, "read.o") + hl + hr
        out = out + self._ffn(self.ln(out, "read.ln_ff"), "read.ff")
        return self.ln(out, "read.ln_out")


def build_network(config: NetworkConfig, params: ParamStore | None = None) -> LENet:
    cls = {"leMLP": LeMLP, "leAttn": LeAttn, "leTF": LeTF, "leGF": LeTF}[config.variant]
    return cls(config, params)


def g_forward(model: LENet, t, x) -> np.ndarray:
    G = model.g(t, x)
    return G[0] if np.ndim(x) == 1 else G


def rate_from_g(G: np.ndarray, x=None) -> tuple[np.ndarray, np.ndarray]:
    """Off-diagonal one-way rates max(G, 0) and the diagonal -sum of them.

    Entries at tau = x_i are zero by construction of G; if ``x`` is given they
    are zeroed explicitly as well.
    """
    rates = np.maximum(np.asarray(G, dtype=np.float64), 0.0)
    if x is not None:
        x = np.asarray(x)
        if rates.ndim == 2:
            rates[np.arange(rates.shape[0]), x] = 0.0
        else:
            B, d = x.shape
            rates[np.arange(B)[:, None], np.arange(d)[None, :], x] = 0.0
    diag = -rates.sum(axis=(-2, -1))
    return rates, diag


def swap(x, i: int, tau: int) -> np.ndarray:
    y = np.array(x, copy=True)
    y[..., i] = tau
    return y

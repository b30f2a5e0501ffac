"""Exact enumeration tools for small state spaces.

States are enumerated little-endian in tokens: state number n has
x_i = (n // S**i) % S, so token 0 varies fastest.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import expm
from scipy.optimize import nnls

from .ctmc import step_distribution, xi_from_rates
from .path import AnnealedPath, time_grid

MAX_STATES = 2 ** 20


def all_states(d: int, S: int) -> np.ndarray:
    n = S ** d
    if n > MAX_STATES:
        raise ValueError(f"S^d = {n} exceeds the enumeration cap {MAX_STATES}")
    idx = np.arange(n)
    return (idx[:, None] // (S ** np.arange(d))[None, :]) % S


def state_index(X: np.ndarray, S: int) -> np.ndarray:
    X = np.atleast_2d(X)
    return X @ (S ** np.arange(X.shape[1]))


def log_sum_exp(v: np.ndarray) -> float:
    m = float(np.max(v))
    if m == -math.inf:
        return -math.inf
    return m + math.log(math.fsum(np.exp(v - m)))


class ExactEnumeration:
    """All states of a path plus cached log p~_t per requested time."""

    def __init__(self, path: AnnealedPath):
        self.path = path
        self.states = all_states(path.d, path.S)
        self.log_rho = path.target.log_unnorm(self.states)
        self._cache: dict[float, np.ndarray] = {}

    def log_p_tilde(self, t: float) -> np.ndarray:
        t = float(t)
        if t not in self._cache:
            self._cache[t] = self.path.log_p_tilde(t, self.states, log_rho=self.log_rho)
        return self._cache[t]

    def log_z(self, t: float) -> float:
        return log_sum_exp(self.log_p_tilde(t))

    def probs(self, t: float) -> np.ndarray:
        lp = self.log_p_tilde(t)
        p = np.exp(lp - lp.max())
        return p / math.fsum(p)

    def dt_log_z(self, t: float) -> float:
        p = self.probs(t)
        return math.fsum(p * self.path.dt_log_p_tilde(t, self.states, log_rho=self.log_rho))

    def sample(self, t: float, count: int, rng) -> np.ndarray:
        cdf = np.cumsum(self.probs(t))
        u = rng.random(count) * cdf[-1]
        idx = np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1)
        return self.states[idx]

    def log_prob(self, t: float, X) -> np.ndarray:
        X = np.atleast_2d(X)
        return self.path.log_p_tilde(t, X) - self.log_z(t)


def enumerate_log_z(path: AnnealedPath, t: float) -> float:
    return ExactEnumeration(path).log_z(t)


def exact_dt_log_z(path: AnnealedPath, t: float) -> float:
    return ExactEnumeration(path).dt_log_z(t)


def exact_sample(path: AnnealedPath, t: float, count: int, rng) -> np.ndarray:
    return ExactEnumeration(path).sample(t, count, rng)


def exact_marginal(path: AnnealedPath, t: float) -> tuple[np.ndarray, np.ndarray]:
    en = ExactEnumeration(path)
    return en.states, en.probs(t)


def empirical_distribution(X: np.ndarray, S: int) -> np.ndarray:
    X = np.atleast_2d(X)
    counts = np.bincount(state_index(X, S), minlength=S ** X.shape[1])
    return counts / counts.sum()


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def _scatter_flips(values: np.ndarray, d: int, S: int) -> np.ndarray:
    """(n, d, S) per-flip values -> (n, n) matrix indexed [from, to]; self-flips dropped."""
    X = all_states(d, S)
    n = len(X)
    M = np.zeros((n, n))
    w = S ** np.arange(d)
    for i in range(d):
        for tau in range(S):
            moved = X[:, i] != tau
            dest = np.arange(n) + (tau - X[:, i]) * w[i]
            M[np.arange(n)[moved], dest[moved]] += values[moved, i, tau]
    return M


def euler_kernel(model, t: float, d: int, S: int, dt: float) -> np.ndarray:
    """(S^d, S^d) transition matrix of one Euler step from time t."""
    out, _ = model.rate_pair(t, all_states(d, S))
    flips, stay = step_distribution(out, dt)
    M = _scatter_flips(flips.reshape(out.shape), d, S)
    M[np.diag_indices_from(M)] += stay
    return M


def generator(model, t: float, d: int, S: int) -> np.ndarray:
    """Rate matrix Q[x, y] at time t; rows sum to zero."""
    out, _ = model.rate_pair(t, all_states(d, S))
    Q = _scatter_flips(out, d, S)
    Q[np.diag_indices_from(Q)] -= Q.sum(axis=1)
    return Q


def _check_small(path: AnnealedPath) -> None:
    if path.S ** path.d > 4096:
        raise ValueError("exact propagation is limited to S^d <= 4096")


def euler_marginal(model, path: AnnealedPath, K: int) -> np.ndarray:
    """Exact law of the K-step Euler chain at t = 1, started from the uniform prior."""
    _check_small(path)
    d, S = path.d, path.S
    P = np.full(S ** d, float(S) ** -d)
    for k in range(K):
        P = P @ euler_kernel(model, k / K, d, S, 1.0 / K)
    return P


def ctmc_marginal(model, path: AnnealedPath, K: int) -> np.ndarray:
    """Exact law at t = 1 of the continuous-time chain with rates held at their
    left grid point on each interval, started from the uniform prior."""
    _check_small(path)
    d, S = path.d, path.S
    P = np.full(S ** d, float(S) ** -d)
    for k in range(K):
        P = P @ expm(generator(model, k / K, d, S) / K)
    return P


def _stein_terms(path, model, t, X, clip=None):
    out, inn = model.rate_pair(t, X)
    r = path.neighbor_log_ratios(t, X, clip=clip)
    return out, inn, r


def kolmogorov_residual(path: AnnealedPath, model, t: float, enum: ExactEnumeration | None = None) -> float:
    """max_x |delta_t(x)| with delta = xi (unclipped ratios) - exact dt log Z_t."""
    en = enum or ExactEnumeration(path)
    X = en.states
    out, inn, r = _stein_terms(path, model, t, X)
    xi = xi_from_rates(path.dt_log_p_tilde(t, X, log_rho=en.log_rho), out, inn, r)
    return float(np.max(np.abs(xi - en.dt_log_z(t))))


def stein_expectation(path: AnnealedPath, model, t: float, enum: ExactEnumeration | None = None) -> float:
    """E_{p_t} [sum_y R(x, y) p_t(y) / p_t(x)] by enumeration (zero for any valid R)."""
    en = enum or ExactEnumeration(path)
    X = en.states
    out, inn, r = _stein_terms(path, model, t, X)
    p = en.probs(t)
    # p(x) in(x) p(y)/p(x) = in(x) p(y); evaluated in log space for accuracy
    lp = np.log(p)
    flow_in = inn * np.exp(lp[:, None, None] + r)
    flow_out = out * p[:, None, None]
    return math.fsum((flow_in - flow_out).ravel())


class TabularRates:
    """Rates stored per grid time for every state and flip; implements rate_pair.

    ``rates[k, n, i, tau]`` is the rate from state n to Swap(state n, i, tau)
    at grid time k / K; off-grid times use the nearest grid time.
    """

    def __init__(self, rates: np.ndarray, d: int, S: int, residuals=None):
        self.rates = np.asarray(rates, dtype=np.float64)
        self.d, self.S = d, S
        self.K = self.rates.shape[0] - 1
        self.residuals = residuals
        n = S ** d
        self._nb = np.empty((n, d, S), dtype=np.int64)  # neighbour state numbers
        states = all_states(d, S)
        w = S ** np.arange(d)
        for i in range(d):
            for tau in range(S):
                self._nb[:, i, tau] = state_index(states, S) + (tau - states[:, i]) * w[i]

    def _k(self, t) -> int:
        t = float(np.atleast_1d(np.asarray(t, dtype=np.float64))[0])
        return int(np.clip(round(t * self.K), 0, self.K))

    def rate_pair(self, t, X):
        X = np.atleast_2d(X)
        R = self.rates[self._k(t)]
        n = state_index(X, self.S)
        out = R[n]
        nb = self._nb[n]  # (B, d, S)
        xi = np.broadcast_to(X[:, :, None], nb.shape)
        i = np.broadcast_to(np.arange(self.d)[None, :, None], nb.shape)
        inn = R[nb, i, xi]
        return out.copy(), inn.copy()

    @classmethod
    def random(cls, d: int, S: int, K: int, rng, scale: float = 1.0) -> "TabularRates":
        rates = rng.exponential(scale, size=(K + 1, S ** d, d, S))
        states = all_states(d, S)
        rates[:, np.arange(S ** d)[:, None], np.arange(d)[None, :], states] = 0.0
        return cls(rates, d, S)


def _kolmogorov_system(en: ExactEnumeration, t: float):
    """Linear map from flip rates to the rate term of delta, and the target."""
    path = en.path
    d, S = path.d, path.S
    X = en.states
    n = len(X)
    lp = en.log_p_tilde(t)
    w = S ** np.arange(d)
    cols, index = [], {}
    A = np.zeros((n, n * d * (S - 1)))
    b = path.dt_log_p_tilde(t, X, log_rho=en.log_rho) - en.dt_log_z(t)
    c = 0
    for u in range(n):
        for i in range(d):
            for tau in range(S):
                if tau == X[u, i]:
                    continue
                v = u + (tau - X[u, i]) * w[i]
                index[(u, i, tau)] = c
                A[u, c] -= 1.0  # outflow u -> v
                A[v, c] += math.exp(lp[u] - lp[v])  # inflow into v, scaled by p(u)/p(v)
                c += 1
    return A, b, index


def fit_tabular_rates(path: AnnealedPath, K: int, one_way: bool = True) -> TabularRates:
    """Nonnegative least-squares flip rates solving the Kolmogorov equation per grid time."""
    d, S = path.d, path.S
    if S ** d > 256:
        raise ValueError("tabular fitting is limited to S^d <= 256")
    en = ExactEnumeration(path)
    n = S ** d
    rates = np.zeros((K + 1, n, d, S))
    residuals = []
    w = S ** np.arange(d)
    for k, t in enumerate(time_grid(K)):
        A, b, index = _kolmogorov_system(en, float(t))
        sol, _ = nnls(A, b, maxiter=50 * A.shape[1])
        res = float(np.max(np.abs(A @ sol - b))) if len(b) else 0.0
        R = np.zeros((n, d, S))
        for (u, i, tau), c in index.items():
            R[u, i, tau] = sol[c]
        if one_way:
            p = en.probs(float(t))
            for u in range(n):
                for i in range(d):
                    for tau in range(S):
                        v = u + (tau - en.states[u, i]) * w[i]
                        if tau == en.states[u, i] or v < u:
                            continue
                        back = en.states[u, i]
                        flux = R[u, i, tau] * p[u] - R[v, i, back] * p[v]
                        R[u, i, tau] = max(flux, 0.0) / p[u]
                        R[v, i, back] = max(-flux, 0.0) / p[v]
        rates[k] = R
        residuals.append(res)
    model = TabularRates(rates, d, S, residuals)
    worst = max(residuals)
    if worst > 1e-6:
        raise RuntimeError(f"NNLS did not reach a solution; max residual {worst:.3e}")
    return model

"""Unnormalised targets log rho(x) over {0..S-1}^d.

Every target evaluates batches: ``log_unnorm(X)`` takes an integer array of
shape (B, d) (or a single state of shape (d,)) and returns log rho per row.
``neighbor_log_ratios(X)`` returns a (B, d, S) array whose entry (i, tau) is
log rho(x with x_i := tau) - log rho(x); the entry at tau = x_i is exactly 0.

Toy 2-D densities
-----------------
The Gray-code targets wrap analytic densities on [-4, 4]^2.  The exact
conventions used here (they are ours, not canonical):

* ``8gaussians``   8 isotropic Gaussians (std 0.3) on the circle of radius 3.
* ``25gaussians``  5x5 grid at {-3, -1.5, 0, 1.5, 3}^2, std 0.15.
* ``circles``      rings of radius 3 and 1.5, kernel std 0.1.
* ``rings``        rings of radius 0.75, 1.5, 2.25, 3, kernel std 0.08.
* ``moons``        two interleaved half circles (radius 2), kernel std 0.1.
* ``swissroll``    spiral r = 3.5 * theta / (4.5 pi), theta in [1.5 pi, 4.5 pi], std 0.1.
* ``2spirals``     two opposite spirals r = 3.5 * theta / (3 pi), std 0.1.
* ``pinwheel``     5 arms; fixed-seed kernel density over 2000 pinwheel points, std 0.08.
* ``checkerboard`` uniform on the 8 dark cells of a 4x4 board of 2x2 squares.

Ring/spiral densities are equal-weight Gaussian mixtures centred on a dense
polyline of the curve, so they can be sampled exactly as well as evaluated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

LOG_FLOOR = math.log(1e-300)


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


class Target:
    """Base class: subclasses set ``d``, ``S`` and implement ``_log_unnorm``."""

    d: int
    S: int

    def check(self, X: np.ndarray) -> None:
        if X.ndim != 2 or X.shape[1] != self.d:
            raise ValueError(f"state dimension mismatch: expected d={self.d}, got shape {X.shape}")
        if X.size and (X.min() < 0 or X.max() >= self.S):
            raise ValueError(f"tokens must lie in [0, {self.S})")

    def log_unnorm(self, x) -> np.ndarray | float:
        X, single = _as_batch(x)
        self.check(X)
        out = self._log_unnorm(X.astype(np.int64))
        return float(out[0]) if single else out

    def _log_unnorm(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def neighbor_log_ratios(self, x) -> np.ndarray:
        X, single = _as_batch(x)
        self.check(X)
        out = generic_neighbor_log_ratios(self, X)
        return out[0] if single else out

    def to_json(self) -> dict:
        raise NotImplementedError


def generic_neighbor_log_ratios(target: Target, X: np.ndarray) -> np.ndarray:
    """Evaluate log rho at every 1-Hamming neighbour and subtract log rho(x)."""
    X = np.asarray(X, dtype=np.int64)
    B, d = X.shape
    S = target.S
    base = target._log_unnorm(X)
    nb = np.repeat(X[:, None, None, :], d, axis=1)
    nb = np.repeat(nb, S, axis=2)  # (B, d, S, d)
    idx = np.arange(d)
    nb[:, idx, :, idx] = np.arange(S)[None, None, :]
    vals = target._log_unnorm(nb.reshape(-1, d)).reshape(B, d, S)
    out = vals - base[:, None, None]
    out[np.arange(B)[:, None], idx[None, :], X] = 0.0
    return out


def quadratic_neighbor_log_ratios(W: np.ndarray, h: np.ndarray, x) -> np.ndarray:
    """Flip log-ratios of rho(x) = exp(x^T W x + h^T x) over bits, vectorised.

    For x_i = 0 the diagonal enters as +W_ii and for x_i = 1 as -W_ii, which
    gives (1 - 2x) * ((W + W^T) x + (1 - 2x) * diag(W) + h).
    """
    X, single = _as_batch(x)
    if X.size and X.max() > 1:
        raise ValueError("closed-form ratios need binary states")
    X = X.astype(np.float64)
    sgn = 1.0 - 2.0 * X
    out = sgn * (X @ (W + W.T).T + sgn * np.diag(W)[None, :] + h[None, :])
    return out[0] if single else out


@dataclass
class QuadraticBinaryTarget(Target):
    W: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.h = np.asarray(self.h, dtype=np.float64)
        if self.W.ndim != 2 or self.W.shape[0] != self.W.shape[1] or self.h.shape != (self.W.shape[0],):
            raise ValueError(f"bad quadratic shapes W={self.W.shape} h={self.h.shape}")
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.h))):
            raise ValueError("quadratic target entries must be finite")
        self.d = self.W.shape[0]
        self.S = 2

    def _log_unnorm(self, X):
        Xf = X.astype(np.float64)
        return np.einsum("bi,ij,bj->b", Xf, self.W, Xf) + Xf @ self.h

    def flip_log_ratios(self, x) -> np.ndarray:
        return quadratic_neighbor_log_ratios(self.W, self.h, x)

    def neighbor_log_ratios(self, x) -> np.ndarray:
        X, single = _as_batch(x)
        self.check(X)
        flips = quadratic_neighbor_log_ratios(self.W, self.h, X)
        out = np.zeros(X.shape + (2,))
        B, d = X.shape
        out[np.arange(B)[:, None], np.arange(d)[None, :], 1 - X] = flips
        return out[0] if single else out

    def scaled(self, factor: float) -> "QuadraticBinaryTarget":
        return QuadraticBinaryTarget(self.W * factor, self.h * factor)

    def to_json(self) -> dict:
        return {"kind": "quadratic", "d": self.d, "W": self.W.reshape(-1).tolist(), "h": self.h.tolist()}


def lattice_adjacency(D: int) -> np.ndarray:
    """Adjacency of the circular D x D grid as a simple graph (0/1 entries).

    For D = 2 the two wrap-around neighbours coincide, so each vertex has
    degree 2 rather than 4.
    """
    n = D * D
    A = np.zeros((n, n))
    for r in range(D):
        for c in range(D):
            v = r * D + c
            for u in (((r + 1) % D) * D + c, r * D + (c + 1) % D):
                if u != v:
                    A[v, u] = A[u, v] = 1.0
    return A


@dataclass
class IsingLattice(QuadraticBinaryTarget):
    """Lattice Ising model p(s) ~ exp(s^T J s), J = sigma * A_D, held in bit form."""

    D: int = 0
    sigma: float = 0.0
    J: np.ndarray = field(default=None, repr=False)
    const: float = 0.0

    def log_unnorm_spin(self, s) -> np.ndarray | float:
        s = np.asarray(s, dtype=np.float64)
        if s.ndim == 1:
            return float(s @ self.J @ s)
        return np.einsum("bi,ij,bj->b", s, self.J, s)

    def to_json(self) -> dict:
        return {"kind": "ising", "D": self.D, "sigma": self.sigma}


def make_ising(D: int, sigma: float) -> IsingLattice:
    if D < 2:
        raise ValueError("lattice side must be >= 2")
    J = sigma * lattice_adjacency(D)
    # s = 2b - 1:  s^T J s = 4 b^T J b - 4 (J 1)^T b + 1^T J 1
    return IsingLattice(W=4.0 * J, h=-4.0 * J.sum(axis=1), D=D, sigma=float(sigma), J=J,
                        const=float(J.sum()))


# ---------------------------------------------------------------- Gray code

BITS = 16
LEVELS = 2 ** BITS - 1


def gray_decode(bits, lo: float = -4.0, hi: float = 4.0) -> float:
    """16 Gray-code bits (most significant first) -> coordinate in [lo, hi]."""
    bits = np.asarray(bits, dtype=np.int64)
    if bits.shape[-1] != BITS:
        raise ValueError(f"expected {BITS} bits, got {bits.shape[-1]}")
    return _gray_decode_batch(bits.reshape(-1, BITS), lo, hi).reshape(bits.shape[:-1])[()]


def _gray_decode_batch(G: np.ndarray, lo: float, hi: float) -> np.ndarray:
    # binary b_15 = g_15, b_i = b_{i+1} xor g_i; column 0 is the MSB
    B = np.bitwise_xor.accumulate(G, axis=1)
    weights = 1 << np.arange(BITS - 1, -1, -1, dtype=np.int64)
    k = B @ weights
    return lo + (hi - lo) * k / LEVELS


def gray_encode(k) -> np.ndarray:
    """Integers in [0, 2^16) -> (..., 16) Gray bits, most significant first."""
    k = np.asarray(k, dtype=np.int64)
    g = k ^ (k >> 1)
    shifts = np.arange(BITS - 1, -1, -1, dtype=np.int64)
    return (g[..., None] >> shifts) & 1


def quantise(v, lo: float = -4.0, hi: float = 4.0) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return np.clip(np.rint((v - lo) / (hi - lo) * LEVELS), 0, LEVELS).astype(np.int64)


def points_to_bits(P: np.ndarray, lo: float = -4.0, hi: float = 4.0) -> np.ndarray:
    """(n, 2) float points -> (n, 32) Gray-coded bit vectors."""
    return np.concatenate([gray_encode(quantise(P[:, 0], lo, hi)),
                           gray_encode(quantise(P[:, 1], lo, hi))], axis=1)


def bits_to_points(X: np.ndarray, lo: float = -4.0, hi: float = 4.0) -> np.ndarray:
    X = np.asarray(X, dtype=np.int64)
    return np.stack([_gray_decode_batch(X[:, :BITS], lo, hi),
                     _gray_decode_batch(X[:, BITS:], lo, hi)], axis=1)


def _ring(radius: float, n: int = 256) -> np.ndarray:
    th = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return radius * np.stack([np.cos(th), np.sin(th)], 1)


def _pinwheel_points() -> np.ndarray:
    rng = np.random.default_rng(0)
    n_arms, per, rate = 5, 400, 0.25
    feats = rng.normal(size=(n_arms * per, 2)) * np.array([0.3, 0.05]) + np.array([1.0, 0.0])
    labels = np.repeat(np.arange(n_arms), per)
    ang = 2 * np.pi * labels / n_arms + rate * np.exp(feats[:, 0])
    rot = np.stack([np.cos(ang), -np.sin(ang), np.sin(ang), np.cos(ang)], 1).reshape(-1, 2, 2)
    return 2.0 * np.einsum("ni,nji->nj", feats, rot)


def _mixture_spec(name: str) -> tuple[np.ndarray, float]:
    if name == "8gaussians":
        th = np.arange(8) * np.pi / 4
        return 3.0 * np.stack([np.cos(th), np.sin(th)], 1), 0.3
    if name == "25gaussians":
        g = np.array([-3.0, -1.5, 0.0, 1.5, 3.0])
        return np.array([[a, b] for a in g for b in g]), 0.15
    if name == "circles":
        return np.concatenate([_ring(3.0), _ring(1.5)]), 0.1
    if name == "rings":
        return np.concatenate([_ring(r) for r in (0.75, 1.5, 2.25, 3.0)]), 0.08
    if name == "moons":
        th = np.linspace(0, np.pi, 200)
        upper = np.stack([np.cos(th), np.sin(th)], 1)
        lower = np.stack([1 - np.cos(th), 0.5 - np.sin(th)], 1)
        return 2.0 * (np.concatenate([upper, lower]) - np.array([0.5, 0.25])), 0.1
    if name == "swissroll":
        th = np.linspace(1.5 * np.pi, 4.5 * np.pi, 600)
        return 3.5 * (th / (4.5 * np.pi))[:, None] * np.stack([np.cos(th), np.sin(th)], 1), 0.1
    if name == "2spirals":
        th = np.linspace(0.05, 3 * np.pi, 400)
        arm = 3.5 * (th / (3 * np.pi))[:, None] * np.stack([-np.cos(th), np.sin(th)], 1)
        return np.concatenate([arm, -arm]), 0.1
    if name == "pinwheel":
        return _pinwheel_points(), 0.08
    raise ValueError(f"unknown density {name!r}")


DENSITIES = ("2spirals", "8gaussians", "circles", "moons", "pinwheel", "swissroll",
             "checkerboard", "rings", "25gaussians")


class Density2D:
    """Analytic density on the plane with exact sampling."""

    def __init__(self, name: str):
        if name not in DENSITIES:
            raise ValueError(f"unknown density {name!r}; choose from {DENSITIES}")
        self.name = name
        if name != "checkerboard":
            self.centres, self.std = _mixture_spec(name)

    def pdf(self, P: np.ndarray) -> np.ndarray:
        P = np.asarray(P, dtype=np.float64)
        if self.name == "checkerboard":
            inside = np.all(np.abs(P) <= 4.0, axis=1)
            cells = np.floor(P[:, 0] / 2.0) + np.floor(P[:, 1] / 2.0)
            return np.where(inside & (cells % 2 == 0), 1.0 / 32.0, 0.0)
        d2 = ((P[:, None, :] - self.centres[None, :, :]) ** 2).sum(-1)
        s2 = self.std ** 2
        return np.exp(-0.5 * d2 / s2).mean(axis=1) / (2 * np.pi * s2)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.name == "checkerboard":
            out = np.empty((0, 2))
            while len(out) < n:
                P = rng.uniform(-4, 4, size=(2 * n, 2))
                out = np.concatenate([out, P[self.pdf(P) > 0]])
            return out[:n]
        idx = rng.integers(len(self.centres), size=n)
        return self.centres[idx] + self.std * rng.normal(size=(n, 2))


class GrayCode2DTarget(Target):
    """log rho(x) = log p(decode(x[:16]), decode(x[16:])) with a 1e-300 floor."""

    def __init__(self, density: str, lo: float = -4.0, hi: float = 4.0):
        self.density = Density2D(density)
        self.lo, self.hi = lo, hi
        self.d, self.S = 2 * BITS, 2

    def _log_unnorm(self, X):
        p = self.density.pdf(bits_to_points(X, self.lo, self.hi))
        return np.log(np.maximum(p, 1e-300))

    def sample_data(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return points_to_bits(self.density.sample(n, rng), self.lo, self.hi)

    def to_json(self) -> dict:
        return {"kind": "graycode", "density": self.density.name, "lo": self.lo, "hi": self.hi}


class MLPEnergy(Target):
    """log rho(x) = -E(x) with E a 4-layer swish perceptron."""

    def __init__(self, d: int, hidden: int = 256, rng: np.random.Generator | None = None,
                 params: T.ParamStore | None = None):
        self.d, self.S, self.hidden = d, 2, hidden
        if params is None:
            rng = rng or np.random.default_rng(0)
            params = T.ParamStore()
            dims = [d, hidden, hidden, hidden, 1]
            for k in range(4):
                params.add(f"energy.l{k}.w", rng.normal(size=(dims[k], dims[k + 1])) / math.sqrt(dims[k]))
                params.add(f"energy.l{k}.b", np.zeros(dims[k + 1]))
        self.params = params

    def energy(self, X) -> T.Tensor:
        h = T.Tensor(np.asarray(X, dtype=np.float64))
        for k in range(4):
            h = h @ self.params[f"energy.l{k}.w"] + self.params[f"energy.l{k}.b"]
            if k < 3:
                h = T.swish(h)
        return h.reshape(-1)

    def _log_unnorm(self, X):
        return -self.energy(X).data

    def to_json(self) -> dict:
        return {"kind": "mlp_energy", "d": self.d, "hidden": self.hidden}


def target_from_json(spec: dict) -> Target:
    kind = spec["kind"]
    if kind == "ising":
        return make_ising(int(spec["D"]), float(spec["sigma"]))
    if kind == "quadratic":
        d = int(spec["d"])
        return QuadraticBinaryTarget(np.asarray(spec["W"], dtype=np.float64).reshape(d, d),
                                     np.asarray(spec["h"], dtype=np.float64))
    if kind == "graycode":
        return GrayCode2DTarget(spec["density"], spec.get("lo", -4.0), spec.get("hi", 4.0))
    raise ValueError(f"cannot rebuild target of kind {kind!r} from JSON")


def log_unnorm(target: Target, x):
    return target.log_unnorm(x)


def neighbor_log_ratios(target: Target, x):
    return target.neighbor_log_ratios(x)

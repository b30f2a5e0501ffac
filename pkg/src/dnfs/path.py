"""Annealed path p_t ~ rho^beta(t) * eta^(1 - beta(t)) with a uniform prior eta = 1."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .targets import Target

SCHEDULES = ("linear", "cosine")


def beta(schedule: str, t):
    t = np.asarray(t, dtype=np.float64)
    if schedule == "linear":
        return t
    if schedule == "cosine":
        return 0.5 * (1.0 - np.cos(np.pi * t))
    raise ValueError(f"unknown schedule {schedule!r}")


def dbeta(schedule: str, t):
    t = np.asarray(t, dtype=np.float64)
    if schedule == "linear":
        return np.ones_like(t)
    if schedule == "cosine":
        return 0.5 * np.pi * np.sin(np.pi * t)
    raise ValueError(f"unknown schedule {schedule!r}")


def time_grid(K: int) -> np.ndarray:
    if K < 1:
        raise ValueError("need at least one time step")
    return np.arange(K + 1) / K


def _check_t(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0) or not np.all(np.isfinite(t)):
        raise ValueError(f"time must lie in [0, 1], got {t}")
    return t


@dataclass
class AnnealedPath:
    target: Target
    schedule: str = "linear"
    clip: float | None = 5.0

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.clip is not None and self.clip <= 0:
            raise ValueError("clip must be positive")

    @property
    def d(self) -> int:
        return self.target.d

    @property
    def S(self) -> int:
        return self.target.S

    @property
    def log_z0(self) -> float:
        return self.d * math.log(self.S)

    def log_prior(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        return np.zeros(X.shape[0])

    def log_p_tilde(self, t, x, log_rho=None):
        """beta(t) log rho(x) + (1 - beta(t)) log eta(x); ``t`` scalar or per row."""
        t = _check_t(t)
        if log_rho is None:
            log_rho = self.target.log_unnorm(x)
        b = beta(self.schedule, t)
        return b * log_rho  # log eta = 0

    def dt_log_p_tilde(self, t, x, log_rho=None):
        t = _check_t(t)
        if log_rho is None:
            log_rho = self.target.log_unnorm(x)
        return dbeta(self.schedule, t) * log_rho

    def neighbor_log_ratios(self, t, x, clip="default", target_ratios=None):
        """(B, d, S) log p_t(y)/p_t(x), clipped from above at ``clip``.

        ``clip="default"`` uses the path's bound; ``None`` disables clipping.
        """
        t = _check_t(t)
        if clip == "default":
            clip = self.clip
        if target_ratios is None:
            target_ratios = self.target.neighbor_log_ratios(x)
        b = beta(self.schedule, t)
        if np.ndim(b) > 0 and target_ratios.ndim == 3:
            b = b[:, None, None]
        r = b * target_ratios
        if clip is not None:
            r = np.minimum(r, clip)
        return r

    def to_json(self) -> dict:
        return {"schedule": self.schedule, "clip": self.clip, "target": self.target.to_json()}


# module-level aliases matching the operation names
def log_p_tilde(path: AnnealedPath, t, x):
    return path.log_p_tilde(t, x)


def dt_log_p_tilde(path: AnnealedPath, t, x):
    return path.dt_log_p_tilde(t, x)


def path_neighbor_log_ratios(path: AnnealedPath, t, x, clip="default"):
    return path.neighbor_log_ratios(t, x, clip=clip)

"""Discrete neural flow samplers: CTMC samplers trained with a Kolmogorov-equation loss."""

from .lenet import NetworkConfig, build_network
from .path import AnnealedPath
from .targets import QuadraticBinaryTarget, make_ising
from .train import TrainConfig, train_loop

__all__ = ["AnnealedPath", "NetworkConfig", "QuadraticBinaryTarget", "TrainConfig",
           "build_network", "make_ising", "train_loop"]
__version__ = "0.1.0"

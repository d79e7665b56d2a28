"""Noise-gated federated training of quantum classifiers on a dense simulator."""

from .encode import fidelity, pairwise_fidelity_spread
from .fed import FedConfig, Federation, aggregate, partition, sporadic_variable
from .noise import NoiseModel, error_bound, variance_bound, xi_empirical, xi_oracle
from .qnn import QnnModel, forward, loss, param_shift_grad, sgd_step

__version__ = "0.1.0"

__all__ = [
    "FedConfig", "Federation", "NoiseModel", "QnnModel", "aggregate", "error_bound", "fidelity",
    "forward", "loss", "pairwise_fidelity_spread", "param_shift_grad", "partition", "sgd_step",
    "sporadic_variable", "variance_bound", "xi_empirical", "xi_oracle",
]

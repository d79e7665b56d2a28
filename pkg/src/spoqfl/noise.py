"""Gate-level Pauli noise, readout flips, gradient-deviation estimators, bounds.

A :class:`NoiseModel` puts the channel
``rho -> (1 - eps) rho + eps (w_x X rho X + w_y Y rho Y + w_z Z rho Z)``
after every gate, once per qubit the gate touches, and flips each measured
bit with probability ``readout_flip``.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .qsim import KrausChannel

PLACEMENTS = ("all", "trainable")
XI_METRICS = ("rms", "mean_abs")


@dataclass(frozen=True)
class NoiseModel:
    epsilon: float = 0.0
    pauli_weights: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    readout_flip: float = 0.0
    placement: str = "all"

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if not 0.0 <= self.readout_flip <= 1.0:
            raise ValueError(f"readout_flip must be in [0, 1], got {self.readout_flip}")
        w = tuple(float(v) for v in self.pauli_weights)
        if len(w) != 3 or min(w) < 0 or abs(sum(w) - 1.0) > 1e-9:
            raise ValueError(f"pauli_weights must be 3 non-negative numbers summing to 1, got {self.pauli_weights}")
        if self.placement not in PLACEMENTS:
            raise ValueError(f"placement must be one of {PLACEMENTS}")
        object.__setattr__(self, "pauli_weights", w)
        # construction checks Kraus completeness
        self.channel()

    def channel(self, qubit: int = 0) -> KrausChannel:
        wx, wy, wz = self.pauli_weights
        e = self.epsilon
        return KrausChannel.pauli(e * wx, e * wy, e * wz, qubit)

    @property
    def noiseless(self) -> bool:
        return self.epsilon == 0 and self.readout_flip == 0


class Channels(NamedTuple):
    gate_channel: KrausChannel
    readout_flip: float
    placement: str


def build_channels(nm: NoiseModel) -> Channels:
    """Per-gate Kraus channel and per-shot readout flip probability."""
    return Channels(nm.channel(), nm.readout_flip, nm.placement)


# --------------------------------------------------------------------------
# noise profile files


PROFILE_FIELDS = ("client_id", "epsilon", "w_x", "w_y", "w_z", "readout_flip")


def read_noise_profile(path) -> dict[int, NoiseModel]:
    """Per-client noise models from a CSV with header ``client_id,epsilon,w_x,w_y,w_z,readout_flip``."""
    models = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(PROFILE_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: noise profile is missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                cid = int(row["client_id"])
                nm = NoiseModel(
                    float(row["epsilon"]),
                    (float(row["w_x"]), float(row["w_y"]), float(row["w_z"])),
                    float(row["readout_flip"]),
                )
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if cid in models:
                raise ValueError(f"{path}:{lineno}: duplicate client_id {cid}")
            models[cid] = nm
    return models


def write_noise_profile(path, models: dict[int, NoiseModel]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PROFILE_FIELDS)
        for cid in sorted(models):
            nm = models[cid]
            w.writerow([cid, repr(nm.epsilon), *map(repr, nm.pauli_weights), repr(nm.readout_flip)])


# --------------------------------------------------------------------------
# gradient deviation


@dataclass
class XiEstimate:
    vector: np.ndarray
    magnitude: float
    method: str


def xi_magnitude(vector, metric: str = "rms") -> float:
    v = np.asarray(vector, dtype=float)
    if v.size == 0:
        return 0.0
    if metric == "rms":
        return float(np.sqrt(np.mean(v * v)))
    if metric == "mean_abs":
        return float(np.mean(np.abs(v)))
    raise ValueError(f"unknown xi metric {metric!r}")


def xi_oracle(noisy_grad, clean_grad, metric: str = "rms") -> XiEstimate:
    """Deviation of a noisy gradient from the exact noiseless one."""
    noisy = np.asarray(noisy_grad, dtype=float)
    clean = np.asarray(clean_grad, dtype=float)
    if noisy.shape != clean.shape:
        raise ValueError(f"gradient length mismatch {noisy.shape} vs {clean.shape}")
    vec = noisy - clean
    return XiEstimate(vec, xi_magnitude(vec, metric), "oracle")


def xi_empirical(model, features, labels, nm: NoiseModel | None, repeats: int, shots: int | None, rng, metric: str = "rms") -> XiEstimate:
    """Spread of ``repeats`` independent noisy gradient draws.

    Needs no clean reference, so it is what a real device could compute.
    The vector is the per-coordinate sample standard deviation.
    """
    from .qnn import param_shift_grad

    if repeats < 2:
        raise ValueError("xi_empirical needs at least 2 repeats")
    draws = np.stack([
        param_shift_grad(model, features, labels, noise=nm, shots=shots, rng=sub).grad
        for sub in rng.spawn(repeats)
    ])
    # identical draws give an exact zero, not mean-rounding residue
    vec = np.where(np.ptp(draws, axis=0) == 0, 0.0, draws.std(axis=0, ddof=1))
    est = XiEstimate(vec, xi_magnitude(vec, metric), "empirical")
    if est.magnitude == 0 and shots is not None:
        warnings.warn("empirical xi is exactly zero; repeated draws were identical", RuntimeWarning, stacklevel=2)
    return est


# --------------------------------------------------------------------------
# analytic bounds


@dataclass
class BoundParams:
    nu: float = 1.0
    n_h: int = 1
    d_qubits: int = 1
    tr_h2: float = 2.0
    m_shots: int = 1
    eta: float = 0.1
    mu: float = 1.0
    lipschitz: float = 1.0
    v_bound: float = 0.0
    l_star: float = 0.0

    def __post_init__(self):
        for name in ("nu", "n_h", "d_qubits", "tr_h2", "eta", "mu", "lipschitz"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.v_bound < 0:
            raise ValueError("v_bound must be non-negative")
        if self.m_shots < 0:
            raise ValueError("m_shots must be non-negative")


def variance_bound(bp: BoundParams) -> float:
    """Shot-noise variance bound ``nu * N_h * D * Tr(H^2) / (2 M)``."""
    if bp.m_shots == 0:
        raise ValueError("m_shots must be positive")
    return bp.nu * bp.n_h * bp.d_qubits * bp.tr_h2 / (2 * bp.m_shots)


def error_bound(bp: BoundParams, rounds: int, loss0: float) -> float:
    """``(1 - eta mu)^T (loss0 - L*) + eta * lipschitz * V / (2 mu)``."""
    contraction = bp.eta * bp.mu
    if not 0 < contraction < 1:
        raise ValueError(f"need 0 < eta*mu < 1, got {contraction}")
    if rounds < 0:
        raise ValueError("rounds must be non-negative")
    return (1 - contraction) ** rounds * (loss0 - bp.l_star) + bp.eta * bp.lipschitz * bp.v_bound / (2 * bp.mu)

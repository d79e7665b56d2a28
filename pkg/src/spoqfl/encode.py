"""Classical-to-quantum encoders and state fidelity.

Every gate-based encoder is a fixed circuit whose rotation angles come from
the features, so a batch of inputs runs as one batched simulation and the
noise model can attach channels to encoding gates like any other gate.
Amplitude encoding has no gate decomposition here; it is an exact state
preparation.

Definitions (features ``w`` in [0, 1], ``scale`` defaults to pi):

* ``basis``: qubit ``i`` is flipped when ``w_i >= 0.5``, realised as
  ``RX(pi * bit_i)`` (equal to ``X`` up to global phase).
* ``angle``: ``RY(scale * w_i)`` on qubit ``i``.
* ``phase``: ``H`` on every qubit, then ``RZ(scale * w_i)``.
* ``amplitude``: amplitudes proportional to ``w`` zero-padded to ``2**D``.
* ``entanglement``: ``angle`` followed by a CNOT ring ``i -> i+1 mod D``.

Qubits beyond the feature count receive angle 0.
"""

from __future__ import annotations

from itertools import combinations
from typing import Sequence

import numpy as np

from .qsim import Circuit, Gate, StateVector, simulate

ENCODINGS = ("basis", "angle", "phase", "amplitude", "entanglement")


def capacity(kind: str, num_qubits: int) -> int:
    """Maximum number of features ``kind`` can take on ``num_qubits`` qubits."""
    _check_kind(kind)
    return 1 << num_qubits if kind == "amplitude" else num_qubits


def _check_kind(kind: str) -> None:
    if kind not in ENCODINGS:
        raise ValueError(f"unknown encoding {kind!r}; expected one of {ENCODINGS}")


def _cnot_ring(num_qubits: int) -> list[Gate]:
    if num_qubits < 2:
        return []
    return [Gate("CNOT", (i + 1) % num_qubits, control=i) for i in range(num_qubits)]


def encoding_circuit(kind: str, num_qubits: int) -> Circuit:
    """Gate template of an encoder; rotation ``i`` reads angle slot ``i``."""
    _check_kind(kind)
    n = num_qubits
    if kind == "amplitude":
        return Circuit(n, [])
    if kind == "basis":
        return Circuit(n, [Gate("RX", q, param_slot=q) for q in range(n)])
    if kind == "phase":
        gates = [Gate("H", q) for q in range(n)]
        return Circuit(n, gates + [Gate("RZ", q, param_slot=q) for q in range(n)])
    gates = [Gate("RY", q, param_slot=q) for q in range(n)]
    if kind == "entanglement":
        gates += _cnot_ring(n)
    return Circuit(n, gates)


def _features(w, kind: str, num_qubits: int) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.ndim == 0:
        w = w[None]
    if not np.all(np.isfinite(w)):
        raise ValueError("features must be finite")
    cap = capacity(kind, num_qubits)
    if w.shape[-1] > cap:
        raise ValueError(f"{kind} encoding on {num_qubits} qubits takes at most {cap} features, got {w.shape[-1]}")
    return w


def encoding_angles(kind: str, w, num_qubits: int, scale: float = np.pi) -> np.ndarray:
    """Angle vector(s) for :func:`encoding_circuit`; shape ``w.shape[:-1] + (D,)``."""
    w = _features(w, kind, num_qubits)
    if kind == "amplitude":
        return np.zeros(w.shape[:-1] + (0,))
    angles = np.zeros(w.shape[:-1] + (num_qubits,))
    if kind == "basis":
        # ties round up
        angles[..., : w.shape[-1]] = np.pi * (w >= 0.5)
    else:
        angles[..., : w.shape[-1]] = scale * w
    return angles


def amplitude_state(w, num_qubits: int) -> StateVector:
    w = _features(w, "amplitude", num_qubits)
    padded = np.zeros(w.shape[:-1] + (1 << num_qubits,))
    padded[..., : w.shape[-1]] = w
    norm = np.linalg.norm(padded, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("amplitude encoding of a zero vector is undefined")
    return StateVector(padded / norm, num_qubits)


def prepare(kind: str, w, num_qubits: int, scale: float = np.pi):
    """Return ``(circuit, angles, initial_state)`` that together encode ``w``.

    For gate encoders the initial state is ``None`` (``|0...0>``); for
    amplitude encoding the circuit is empty and the state carries the data.
    """
    circuit = encoding_circuit(kind, num_qubits)
    if kind == "amplitude":
        return circuit, encoding_angles(kind, w, num_qubits), amplitude_state(w, num_qubits)
    return circuit, encoding_angles(kind, w, num_qubits, scale), None


def encode(kind: str, w, num_qubits: int, scale: float = np.pi) -> StateVector:
    """Noiseless encoded state ``U_enc(w)|0...0>`` (batched if ``w`` is 2-D)."""
    circuit, angles, state = prepare(kind, w, num_qubits, scale)
    if kind == "amplitude":
        return state
    return simulate(circuit, angles)


def fidelity(a: StateVector, b: StateVector) -> float:
    """``|<a|b>|**2``."""
    if a.num_qubits != b.num_qubits:
        raise ValueError(f"fidelity between {a.num_qubits}- and {b.num_qubits}-qubit states")
    f = np.abs(np.sum(a.data.conj() * b.data, axis=-1)) ** 2
    f = np.clip(f, 0.0, 1.0)
    return float(f) if np.ndim(f) == 0 else f


def pairwise_fidelity_spread(states: Sequence[StateVector]) -> float:
    """Mean of ``1 - fidelity`` over unordered pairs of ``states``."""
    if len(states) < 2:
        raise ValueError("need at least two states")
    gaps = [1.0 - fidelity(a, b) for a, b in combinations(states, 2)]
    return float(np.mean(gaps))

"""Variational quantum classifier.

Circuit per example: encoder gates, then ``L`` layers of (RX, RY, RZ on every
qubit, CNOT ring). Class ``c`` is read from ``<Z_c>`` on qubit ``c``; the
logits are turned into probabilities with ``softmax(beta * logits)``.

Gradients use the parameter-shift rule for every circuit expectation and
analytic Jacobians for softmax and loss. All shifted circuits of a minibatch
are simulated as one batched run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .encode import capacity, prepare
from .qsim import (
    Circuit,
    Gate,
    StateVector,
    sample_counts,
    simulate,
    z_expectations,
    z_means_from_counts,
)

if TYPE_CHECKING:
    from .noise import NoiseModel

LOSSES = ("cross_entropy", "mse", "bce")
SHIFT = np.pi / 2
# complex entries per simulation chunk
CHUNK_ELEMENTS = 1 << 22
_EPS = 1e-12


@dataclass
class QnnModel:
    num_qubits: int
    num_layers: int
    num_classes: int
    params: np.ndarray
    encoding: str = "angle"
    loss_kind: str = "cross_entropy"
    beta: float = 2.0
    angle_scale: float = np.pi

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=float)
        if self.num_layers < 0:
            raise ValueError("num_layers must be >= 0")
        if not 1 <= self.num_classes <= self.num_qubits:
            raise ValueError(f"need 1 <= classes <= qubits, got C={self.num_classes}, D={self.num_qubits}")
        if self.params.shape != (self.num_params,):
            raise ValueError(f"expected {self.num_params} parameters, got {self.params.shape}")
        if self.loss_kind not in LOSSES:
            raise ValueError(f"unknown loss {self.loss_kind!r}")
        capacity(self.encoding, self.num_qubits)

    @classmethod
    def initialize(cls, num_qubits, num_layers, num_classes, rng, init_scale=np.pi / 1000, **kwargs):
        size = 3 * num_qubits * num_layers
        params = rng.uniform(-init_scale, init_scale, size=size)
        return cls(num_qubits, num_layers, num_classes, params, **kwargs)

    @property
    def num_params(self) -> int:
        return 3 * self.num_qubits * self.num_layers

    @property
    def readout_qubits(self) -> list[int]:
        return list(range(self.num_classes))

    def with_params(self, params) -> "QnnModel":
        return QnnModel(
            self.num_qubits, self.num_layers, self.num_classes, np.array(params, dtype=float),
            self.encoding, self.loss_kind, self.beta, self.angle_scale,
        )

    def ansatz(self, slot_offset: int = 0) -> Circuit:
        n = self.num_qubits
        gates = []
        slot = slot_offset
        for _ in range(self.num_layers):
            for q in range(n):
                for kind in ("RX", "RY", "RZ"):
                    gates.append(Gate(kind, q, param_slot=slot))
                    slot += 1
            if n >= 2:
                gates += [Gate("CNOT", (q + 1) % n, control=q) for q in range(n)]
        return Circuit(n, gates)


@dataclass
class Prediction:
    logits: np.ndarray
    probs: np.ndarray


@dataclass
class GradResult:
    grad: np.ndarray
    loss: float
    circuits: int
    per_example_loss: np.ndarray = field(repr=False, default=None)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _noise_parts(noise):
    """``(channel or None, readout_flip, placement)`` for an optional noise model."""
    if noise is None:
        return None, 0.0, "all"
    ch = noise.channel()
    return (None if ch.is_identity else ch), float(noise.readout_flip), noise.placement


def _expectations(model: QnnModel, features: np.ndarray, param_rows: np.ndarray, noise, shots, rng):
    """``<Z_c>`` for every (example, parameter row) pair; shape ``(B, R, C)``.

    ``features`` is ``(B, d)`` and ``param_rows`` is ``(R, P)``.
    """
    n = model.num_qubits
    enc_circ, enc_angles, init = prepare(model.encoding, features, n, model.angle_scale)
    e = enc_angles.shape[-1]
    circuit = enc_circ + model.ansatz(slot_offset=e)
    b, r = features.shape[0], param_rows.shape[0]
    angles = np.concatenate(
        [np.repeat(enc_angles, r, axis=0), np.tile(param_rows, (b, 1))], axis=1
    )
    channel, flip, placement = _noise_parts(noise)
    noisy = None
    if placement == "trainable":
        noisy = [g.param_slot is not None and g.param_slot >= e for g in circuit.gates]
    if init is not None:
        init_rows = np.repeat(init.data, r, axis=0)
    qubits = model.readout_qubits
    rows = b * r
    dim = 1 << n
    trajectories = shots is not None and channel is not None
    if channel is not None and not trajectories:
        per_row = dim * dim
    elif trajectories:
        per_row = dim * shots
    else:
        per_row = dim
    step = max(1, CHUNK_ELEMENTS // per_row)
    out = np.empty((rows, len(qubits)))
    for lo in range(0, rows, step):
        hi = min(rows, lo + step)
        a = angles[lo:hi]
        if init is not None:
            state = StateVector(init_rows[lo:hi], n)
        else:
            state = StateVector.zero(n, hi - lo)
        if trajectories:
            # one pure-state trajectory per shot
            a = np.repeat(a, shots, axis=0)
            state = StateVector(np.repeat(state.data, shots, axis=0), n)
            final = simulate(circuit, a, state, channel=channel, noisy=noisy, rng=rng)
            counts = sample_counts(final.probabilities(), 1, rng)
            counts = counts.reshape(hi - lo, shots, dim).sum(axis=1)
            out[lo:hi] = z_means_from_counts(counts, qubits, flip, rng)
            continue
        if channel is not None:
            state = state.to_density()
        final = simulate(circuit, a, state, channel=channel, noisy=noisy, rng=rng)
        probs = final.probabilities()
        if shots is None:
            out[lo:hi] = z_expectations(probs, qubits) * (1.0 - 2.0 * flip)
        else:
            counts = sample_counts(probs, shots, rng)
            out[lo:hi] = z_means_from_counts(counts, qubits, flip, rng)
    return out.reshape(b, r, len(qubits))


def _check_mode(shots, rng, noise):
    if shots is not None:
        if int(shots) < 1:
            raise ValueError("shots must be >= 1")
        if rng is None:
            raise ValueError("shot mode needs an rng")


def _as_batch(w) -> tuple[np.ndarray, bool]:
    w = np.asarray(w, dtype=float)
    if w.ndim == 1:
        return w[None, :], True
    return w, False


def forward(model: QnnModel, w, noise: "NoiseModel | None" = None, shots: int | None = None, rng=None) -> Prediction:
    """Class logits and probabilities for one example (1-D ``w``) or a batch.

    ``shots=None`` gives exact expectations (density matrix when noisy);
    otherwise each expectation is a mean over ``shots`` samples, with one
    noise trajectory per shot.
    """
    _check_mode(shots, rng, noise)
    feats, single = _as_batch(w)
    logits = _expectations(model, feats, model.params[None, :], noise, shots, rng)[:, 0, :]
    probs = softmax(model.beta * logits)
    if single:
        return Prediction(logits[0], probs[0])
    return Prediction(logits, probs)


def _targets(y, num_classes: int) -> np.ndarray:
    y = np.asarray(y, dtype=int)
    if np.any(y < 0) or np.any(y >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return np.eye(num_classes)[y]


def loss(pred: Prediction, y, kind: str = "cross_entropy"):
    """Per-example loss (float for a single prediction, array for a batch)."""
    probs = np.atleast_2d(pred.probs)
    t = _targets(np.atleast_1d(y), probs.shape[-1])
    p = np.clip(probs, _EPS, 1.0 - _EPS) if kind == "bce" else probs
    if kind == "cross_entropy":
        val = -np.log(np.clip(np.sum(probs * t, axis=-1), _EPS, None))
    elif kind == "mse":
        val = np.mean((probs - t) ** 2, axis=-1)
    elif kind == "bce":
        val = -np.mean(t * np.log(p) + (1 - t) * np.log(1 - p), axis=-1)
    else:
        raise ValueError(f"unknown loss {kind!r}")
    return float(val[0]) if np.ndim(pred.probs) == 1 else val


def loss_grad_logits(logits: np.ndarray, y, kind: str, beta: float) -> np.ndarray:
    """d(loss)/d(logits) through ``softmax(beta * logits)``; shape ``(B, C)``."""
    probs = softmax(beta * logits)
    t = _targets(y, probs.shape[-1])
    c = probs.shape[-1]
    if kind == "cross_entropy":
        return beta * (probs - t)
    if kind == "mse":
        g = 2.0 * (probs - t) / c
    elif kind == "bce":
        p = np.clip(probs, _EPS, 1.0 - _EPS)
        g = (-t / p + (1 - t) / (1 - p)) / c
    else:
        raise ValueError(f"unknown loss {kind!r}")
    return beta * probs * (g - np.sum(probs * g, axis=-1, keepdims=True))


def shifted_rows(params: np.ndarray) -> np.ndarray:
    """Rows ``[w, w + s e_0, ..., w + s e_{P-1}, w - s e_0, ...]`` with ``s = pi/2``."""
    p = params.shape[0]
    eye = np.eye(p) * SHIFT
    return np.concatenate([params[None, :], params + eye, params - eye], axis=0)


def param_shift_grad(
    model: QnnModel,
    features,
    labels,
    noise: "NoiseModel | None" = None,
    shots: int | None = None,
    rng=None,
) -> GradResult:
    """Minibatch-mean loss gradient via the parameter-shift rule.

    Each example costs ``2P + 1`` circuits: the unshifted one provides the
    logits for the classical Jacobian, the shifted pairs give
    ``d<Z_c>/dw_d = (E(w + pi/2 e_d) - E(w - pi/2 e_d)) / 2``.
    """
    _check_mode(shots, rng, noise)
    feats, _ = _as_batch(features)
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    if feats.shape[0] == 0:
        raise ValueError("empty batch")
    if labels.shape[0] != feats.shape[0]:
        raise ValueError("features and labels differ in length")
    p = model.num_params
    e = _expectations(model, feats, shifted_rows(model.params), noise, shots, rng)
    logits = e[:, 0, :]
    d_exp = (e[:, 1 : p + 1, :] - e[:, p + 1 :, :]) / 2.0
    d_logits = loss_grad_logits(logits, labels, model.loss_kind, model.beta)
    per_example = np.einsum("bc,bpc->bp", d_logits, d_exp)
    grad = per_example.mean(axis=0)
    losses = loss(Prediction(logits, softmax(model.beta * logits)), labels, model.loss_kind)
    return GradResult(grad, float(np.mean(losses)), e.shape[0] * e.shape[1], losses)


def sgd_step(params, grad, eta: float) -> np.ndarray:
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if params.shape != grad.shape:
        raise ValueError(f"parameter/gradient shape mismatch {params.shape} vs {grad.shape}")
    if not eta > 0:
        raise ValueError("learning rate must be positive")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient entries")
    return params - eta * grad


def evaluate(model: QnnModel, features, labels, noise=None, shots=None, rng=None) -> tuple[float, float]:
    """``(mean loss, accuracy)`` of ``model`` on a labelled set."""
    feats, _ = _as_batch(features)
    labels = np.asarray(labels, dtype=int)
    pred = forward(model, feats, noise=noise, shots=shots, rng=rng)
    losses = loss(pred, labels, model.loss_kind)
    acc = float(np.mean(np.argmax(pred.logits, axis=-1) == labels))
    return float(np.mean(losses)), acc


# --------------------------------------------------------------------------
# checkpoints

CHECKPOINT_VERSION = 1


def checkpoint_dict(model: QnnModel) -> dict:
    return {
        "format": "spoqfl-checkpoint",
        "version": CHECKPOINT_VERSION,
        "num_qubits": model.num_qubits,
        "num_layers": model.num_layers,
        "num_classes": model.num_classes,
        "encoding": model.encoding,
        "loss_kind": model.loss_kind,
        "beta": model.beta,
        "angle_scale": model.angle_scale,
        "params": [float(v) for v in model.params],
    }


def save_checkpoint(model: QnnModel, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    # json writes floats with repr, which round-trips exactly
    tmp.write_text(json.dumps(checkpoint_dict(model), indent=1) + "\n")
    tmp.replace(path)


def load_checkpoint(path) -> QnnModel:
    rec = json.loads(Path(path).read_text())
    if rec.get("format") != "spoqfl-checkpoint":
        raise ValueError(f"{path} is not a model checkpoint")
    return QnnModel(
        rec["num_qubits"], rec["num_layers"], rec["num_classes"], np.array(rec["params"], dtype=float),
        encoding=rec["encoding"], loss_kind=rec["loss_kind"], beta=rec["beta"],
        angle_scale=rec.get("angle_scale", np.pi),
    )

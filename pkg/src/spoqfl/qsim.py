"""Dense quantum simulation: statevectors, density matrices, Pauli trajectories.

Qubit ordering is little-endian everywhere in the package: qubit ``q`` is bit
``q`` of the computational-basis index, so basis index 1 on two qubits has
qubit 0 set and qubit 1 clear.

States may carry leading batch axes. A ``StateVector`` with data of shape
``(B, 2**n)`` is ``B`` independent pure states; a ``DensityMatrix`` with data
of shape ``(B, 2**n, 2**n)`` is ``B`` independent mixed states. Batched
execution is how the classifier evaluates every parameter-shifted circuit of a
minibatch in one pass.

Density matrices are internally treated as ``2n``-qubit vectors: the flat
index ``i * 2**n + j`` of entry ``rho[i, j]`` puts the column bits on qubits
``0..n-1`` and the row bits on ``n..2n-1``. ``U rho U^dagger`` is then ``U`` on
the row copy of a qubit and ``conj(U)`` on the column copy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

MAX_QUBITS = 14

I2 = np.eye(2, dtype=np.complex128)
X = np.array([[0, 1], [1, 0]], dtype=np.complex128)
Y = np.array([[0, -1j], [1j, 0]], dtype=np.complex128)
Z = np.array([[1, 0], [0, -1]], dtype=np.complex128)
H = np.array([[1, 1], [1, -1]], dtype=np.complex128) / np.sqrt(2)
SDG = np.array([[1, 0], [0, -1j]], dtype=np.complex128)

PAULIS = {"I": I2, "X": X, "Y": Y, "Z": Z}

ROTATIONS = ("RX", "RY", "RZ")
FIXED = ("X", "Y", "Z", "H")
GATE_KINDS = ROTATIONS + FIXED + ("CNOT", "U")


def rotation(kind: str, theta) -> np.ndarray:
    """Return ``exp(-i theta/2 P)`` for ``P`` in {X, Y, Z}.

    ``theta`` may be an array; the result then has shape ``theta.shape + (2, 2)``.
    """
    theta = np.asarray(theta, dtype=float)
    c = np.cos(theta / 2)
    s = np.sin(theta / 2)
    out = np.empty(theta.shape + (2, 2), dtype=np.complex128)
    if kind == "RX":
        out[..., 0, 0] = c
        out[..., 0, 1] = -1j * s
        out[..., 1, 0] = -1j * s
        out[..., 1, 1] = c
    elif kind == "RY":
        out[..., 0, 0] = c
        out[..., 0, 1] = -s
        out[..., 1, 0] = s
        out[..., 1, 1] = c
    elif kind == "RZ":
        out[..., 0, 0] = c - 1j * s
        out[..., 0, 1] = 0
        out[..., 1, 0] = 0
        out[..., 1, 1] = c + 1j * s
    else:
        raise ValueError(f"not a rotation gate: {kind!r}")
    return out


@dataclass(frozen=True)
class Gate:
    """One circuit instruction.

    Rotations read their angle from ``param_slot`` of the angle vector handed
    to :func:`simulate`. ``U`` is a fixed single-qubit unitary given by
    ``matrix``.
    """

    kind: str
    target: int
    control: int | None = None
    param_slot: int | None = None
    matrix: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in GATE_KINDS:
            raise ValueError(f"unknown gate kind {self.kind!r}")
        if self.target < 0 or (self.control is not None and self.control < 0):
            raise ValueError("qubit indices must be non-negative")
        if (self.kind == "CNOT") != (self.control is not None):
            raise ValueError("control is required for CNOT and only for CNOT")
        if self.control is not None and self.control == self.target:
            raise ValueError("control and target must differ")
        if (self.kind in ROTATIONS) != (self.param_slot is not None):
            raise ValueError("param_slot is required for rotations and only for rotations")
        if self.kind == "U":
            if self.matrix is None or np.shape(self.matrix) != (2, 2):
                raise ValueError("fixed-unitary gate needs a 2x2 matrix")
            m = np.asarray(self.matrix, dtype=np.complex128)
            if not np.allclose(m.conj().T @ m, I2, atol=1e-10):
                raise ValueError("fixed-unitary matrix is not unitary")
            object.__setattr__(self, "matrix", m)

    @property
    def qubits(self) -> tuple[int, ...]:
        if self.control is None:
            return (self.target,)
        return (self.control, self.target)

    @property
    def parameterized(self) -> bool:
        return self.kind in ROTATIONS

    def unitary(self, theta=None) -> np.ndarray:
        """Single-qubit matrix of the gate (``theta`` may be batched)."""
        if self.kind in ROTATIONS:
            if theta is None:
                raise ValueError(f"{self.kind} gate needs an angle")
            return rotation(self.kind, theta)
        if theta is not None:
            raise ValueError(f"{self.kind} gate takes no angle")
        if self.kind == "U":
            return self.matrix
        if self.kind == "CNOT":
            raise ValueError("CNOT has no single-qubit matrix")
        return {"X": X, "Y": Y, "Z": Z, "H": H}[self.kind]

    def full_matrix(self, num_qubits: int, theta=None) -> np.ndarray:
        """Dense ``2**n x 2**n`` matrix. Used by tests only."""
        dim = 1 << num_qubits
        if self.kind == "CNOT":
            perm = _cnot_perm(num_qubits, self.control, self.target)
            m = np.zeros((dim, dim), dtype=np.complex128)
            m[np.arange(dim), perm] = 1
            return m
        u = self.unitary(theta)
        out = np.array([[1.0 + 0j]])
        for q in reversed(range(num_qubits)):
            out = np.kron(out, u if q == self.target else I2)
        return out


@dataclass
class Circuit:
    """Ordered gate list over ``num_qubits`` qubits."""

    num_qubits: int
    gates: list[Gate] = field(default_factory=list)

    def __post_init__(self):
        if not 1 <= self.num_qubits <= MAX_QUBITS:
            raise ValueError(f"num_qubits must be in [1, {MAX_QUBITS}]")
        for g in self.gates:
            if max(g.qubits) >= self.num_qubits:
                raise ValueError(f"gate {g.kind} touches qubit {max(g.qubits)} >= {self.num_qubits}")

    @property
    def num_slots(self) -> int:
        slots = [g.param_slot for g in self.gates if g.param_slot is not None]
        return max(slots) + 1 if slots else 0

    def __add__(self, other: "Circuit") -> "Circuit":
        if other.num_qubits != self.num_qubits:
            raise ValueError("qubit count mismatch")
        return Circuit(self.num_qubits, self.gates + other.gates)


def _check_n(num_qubits: int) -> int:
    if not 1 <= num_qubits <= MAX_QUBITS:
        raise ValueError(f"num_qubits must be in [1, {MAX_QUBITS}], got {num_qubits}")
    return num_qubits


class StateVector:
    """Pure state(s) on ``num_qubits`` qubits; ``data[..., i]`` is an amplitude."""

    def __init__(self, data, num_qubits: int | None = None):
        data = np.asarray(data, dtype=np.complex128)
        dim = data.shape[-1]
        if num_qubits is None:
            num_qubits = dim.bit_length() - 1
        _check_n(num_qubits)
        if dim != 1 << num_qubits:
            raise ValueError(f"expected {1 << num_qubits} amplitudes, got {dim}")
        self.data = data
        self.num_qubits = num_qubits

    @classmethod
    def zero(cls, num_qubits: int, batch: int | None = None) -> "StateVector":
        return cls.basis(0, num_qubits, batch)

    @classmethod
    def basis(cls, index: int, num_qubits: int, batch: int | None = None) -> "StateVector":
        dim = 1 << _check_n(num_qubits)
        shape = (dim,) if batch is None else (batch, dim)
        data = np.zeros(shape, dtype=np.complex128)
        data[..., index] = 1
        return cls(data, num_qubits)

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.data.shape[:-1]

    def norm(self):
        return np.sqrt(np.sum(np.abs(self.data) ** 2, axis=-1))

    def probabilities(self) -> np.ndarray:
        return np.abs(self.data) ** 2

    def check(self, atol: float = 1e-10) -> None:
        if not np.all(np.abs(self.norm() - 1) <= atol):
            raise ValueError("state is not normalized")

    def to_density(self) -> "DensityMatrix":
        rho = self.data[..., :, None] * self.data[..., None, :].conj()
        return DensityMatrix(rho, self.num_qubits)

    def copy(self) -> "StateVector":
        return StateVector(self.data.copy(), self.num_qubits)

    def __repr__(self):
        return f"StateVector(num_qubits={self.num_qubits}, batch={self.batch_shape})"


class DensityMatrix:
    """Mixed state(s); ``data`` has shape ``(..., 2**n, 2**n)``."""

    def __init__(self, data, num_qubits: int | None = None):
        data = np.asarray(data, dtype=np.complex128)
        dim = data.shape[-1]
        if data.ndim < 2 or data.shape[-2] != dim:
            raise ValueError("density matrix must be square")
        if num_qubits is None:
            num_qubits = dim.bit_length() - 1
        _check_n(num_qubits)
        if dim != 1 << num_qubits:
            raise ValueError(f"expected dimension {1 << num_qubits}, got {dim}")
        self.data = data
        self.num_qubits = num_qubits

    @classmethod
    def zero(cls, num_qubits: int, batch: int | None = None) -> "DensityMatrix":
        return StateVector.zero(num_qubits, batch).to_density()

    @classmethod
    def maximally_mixed(cls, num_qubits: int) -> "DensityMatrix":
        dim = 1 << _check_n(num_qubits)
        return cls(np.eye(dim, dtype=np.complex128) / dim, num_qubits)

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.data.shape[:-2]

    def trace(self):
        return np.trace(self.data, axis1=-2, axis2=-1)

    def probabilities(self) -> np.ndarray:
        return np.clip(np.diagonal(self.data, axis1=-2, axis2=-1).real, 0.0, None)

    def check(self, atol: float = 1e-10, psd_floor: float = -1e-9) -> None:
        """Raise ``ValueError`` unless trace-one, Hermitian and PSD up to tolerance."""
        if not np.all(np.abs(self.trace() - 1) <= atol):
            raise ValueError("trace is not 1")
        herm = self.data - np.swapaxes(self.data, -1, -2).conj()
        if np.max(np.abs(herm), initial=0.0) > atol:
            raise ValueError("density matrix is not Hermitian")
        if np.min(np.linalg.eigvalsh(self.data)) < psd_floor:
            raise ValueError("density matrix is not positive semidefinite")

    def copy(self) -> "DensityMatrix":
        return DensityMatrix(self.data.copy(), self.num_qubits)

    def __repr__(self):
        return f"DensityMatrix(num_qubits={self.num_qubits}, batch={self.batch_shape})"


class KrausChannel:
    """Single-qubit channel ``rho -> sum_j K_j rho K_j^dagger`` on ``qubit``.

    Completeness is checked at construction. When the channel is a
    probabilistic mixture of unitaries (every Pauli channel is), ``mixture``
    holds ``(probabilities, unitaries)`` and trajectory sampling is allowed.
    """

    def __init__(self, operators: Sequence[np.ndarray], qubit: int = 0, *, atol: float = 1e-10):
        ops = [np.asarray(k, dtype=np.complex128) for k in operators]
        if not ops:
            raise ValueError("channel needs at least one Kraus operator")
        if any(k.shape != (2, 2) for k in ops):
            raise ValueError("only single-qubit Kraus operators are supported")
        total = sum(k.conj().T @ k for k in ops)
        if not np.allclose(total, I2, atol=atol, rtol=0):
            raise ValueError("Kraus operators are not trace preserving")
        self.operators = ops
        self.qubit = qubit
        self.pauli_probs: np.ndarray | None = None
        self.mixture = self._as_mixture(ops)

    @classmethod
    def pauli(cls, p_x: float, p_y: float, p_z: float, qubit: int = 0) -> "KrausChannel":
        """``(1-p)rho + p_x X rho X + p_y Y rho Y + p_z Z rho Z`` with ``p = p_x+p_y+p_z``."""
        probs = np.array([1.0 - p_x - p_y - p_z, p_x, p_y, p_z])
        if np.any(probs < -1e-15) or np.any(probs > 1 + 1e-15):
            raise ValueError(f"invalid Pauli probabilities {probs[1:]}")
        probs = np.clip(probs, 0.0, 1.0)
        ch = cls([np.sqrt(p) * P for p, P in zip(probs, (I2, X, Y, Z))], qubit)
        ch.pauli_probs = probs
        ch.mixture = (probs, [I2, X, Y, Z])
        return ch

    @staticmethod
    def _as_mixture(ops):
        probs, units = [], []
        for k in ops:
            p = np.real(np.trace(k.conj().T @ k)) / 2
            if p <= 0:
                continue
            u = k / np.sqrt(p)
            if not np.allclose(u.conj().T @ u, I2, atol=1e-10):
                return None
            probs.append(p)
            units.append(u)
        return np.array(probs), units

    def on(self, qubit: int) -> "KrausChannel":
        ch = object.__new__(KrausChannel)
        ch.__dict__.update(self.__dict__)
        ch.qubit = qubit
        return ch

    @property
    def is_identity(self) -> bool:
        return self.pauli_probs is not None and self.pauli_probs[0] == 1.0

    def completeness_error(self) -> float:
        total = sum(k.conj().T @ k for k in self.operators)
        return float(np.max(np.abs(total - I2)))


class Observable:
    """Real linear combination of Pauli strings.

    Each string has one character per qubit, character ``q`` acting on qubit
    ``q``; ``Observable.z(0, 2)`` is therefore ``"ZI"``.
    """

    def __init__(self, terms: Iterable[tuple[float, str]]):
        merged: dict[str, float] = {}
        n = None
        for coeff, ps in terms:
            ps = ps.upper()
            if set(ps) - set("IXYZ"):
                raise ValueError(f"bad Pauli string {ps!r}")
            if n is None:
                n = len(ps)
            elif len(ps) != n:
                raise ValueError("Pauli strings have different lengths")
            merged[ps] = merged.get(ps, 0.0) + float(coeff)
        if n is None:
            raise ValueError("observable needs at least one term")
        self.terms = [(c, p) for p, c in merged.items()]
        self.num_qubits = n

    @classmethod
    def z(cls, qubit: int, num_qubits: int) -> "Observable":
        s = ["I"] * num_qubits
        s[qubit] = "Z"
        return cls([(1.0, "".join(s))])

    @property
    def n_terms(self) -> int:
        return len(self.terms)

    def trace_h2(self) -> float:
        return sum(c * c for c, _ in self.terms) * float(1 << self.num_qubits)

    def matrix(self) -> np.ndarray:
        dim = 1 << self.num_qubits
        out = np.zeros((dim, dim), dtype=np.complex128)
        for c, ps in self.terms:
            m = np.array([[1.0 + 0j]])
            for ch in reversed(ps):
                m = np.kron(m, PAULIS[ch])
            out += c * m
        return out


# --------------------------------------------------------------------------
# kernels on flat vectors; ``q`` indexes a bit of the last axis


def _apply_1q(data: np.ndarray, mat: np.ndarray, q: int) -> np.ndarray:
    """Apply a 2x2 ``mat`` to bit ``q`` of the last axis of ``data``.

    ``mat`` is ``(2, 2)`` or ``(B, 2, 2)`` with ``B == data.shape[0]``.
    """
    shape = data.shape
    v = data.reshape(shape[:-1] + (shape[-1] >> (q + 1), 2, 1 << q))
    v0 = v[..., 0, :]
    v1 = v[..., 1, :]
    if mat.ndim == 2:
        m00, m01, m10, m11 = mat[0, 0], mat[0, 1], mat[1, 0], mat[1, 1]
    else:
        extra = (1,) * (v0.ndim - 1)
        m = mat.reshape(mat.shape[:1] + extra + (2, 2))
        m00, m01, m10, m11 = m[..., 0, 0], m[..., 0, 1], m[..., 1, 0], m[..., 1, 1]
    out = np.empty_like(v)
    out[..., 0, :] = m00 * v0 + m01 * v1
    out[..., 1, :] = m10 * v0 + m11 * v1
    return out.reshape(shape)


@lru_cache(maxsize=None)
def _cnot_perm(num_bits: int, control: int, target: int) -> np.ndarray:
    idx = np.arange(1 << num_bits)
    return np.where((idx >> control) & 1, idx ^ (1 << target), idx)


@lru_cache(maxsize=None)
def _cnot_perm_dm(n: int, control: int, target: int) -> np.ndarray:
    p_rows = _cnot_perm(2 * n, control + n, target + n)
    p_cols = _cnot_perm(2 * n, control, target)
    return p_rows[p_cols]


def _flat(rho: DensityMatrix) -> np.ndarray:
    return rho.data.reshape(rho.batch_shape + (-1,))


def _unflat(flat: np.ndarray, n: int) -> DensityMatrix:
    dim = 1 << n
    return DensityMatrix(flat.reshape(flat.shape[:-1] + (dim, dim)), n)


def _row_mats(mat: np.ndarray, batch_shape: tuple[int, ...]) -> np.ndarray:
    """Normalize a gate matrix to ``(2,2)`` or ``(B,2,2)`` for the kernels."""
    if mat.ndim == 2:
        return mat
    if len(batch_shape) != 1 or mat.shape[0] != batch_shape[0]:
        raise ValueError("per-row gate matrices require a single batch axis of matching size")
    return mat


def _check_qubits(gate: Gate, n: int) -> None:
    if max(gate.qubits) >= n:
        raise IndexError(f"gate on qubit {max(gate.qubits)} but state has {n} qubits")


def apply_gate(state, gate: Gate, theta=None):
    """Return ``state`` evolved by ``gate``; the input is not modified.

    ``theta`` is required iff the gate is a rotation. For batched states it
    may be an array with one angle per batch row.
    """
    n = state.num_qubits
    _check_qubits(gate, n)
    if gate.kind == "CNOT":
        if isinstance(state, DensityMatrix):
            flat = _flat(state)[..., _cnot_perm_dm(n, gate.control, gate.target)]
            return _unflat(flat, n)
        return StateVector(state.data[..., _cnot_perm(n, gate.control, gate.target)], n)
    mat = gate.unitary(theta)
    if isinstance(state, DensityMatrix):
        mat = _row_mats(mat, state.batch_shape)
        flat = _apply_1q(_flat(state), mat, gate.target + n)
        flat = _apply_1q(flat, mat.conj(), gate.target)
        return _unflat(flat, n)
    mat = _row_mats(mat, state.batch_shape)
    return StateVector(_apply_1q(state.data, mat, gate.target), n)


def _pauli_channel_dm(rho: DensityMatrix, probs: np.ndarray, q: int) -> DensityMatrix:
    # Block form of (1-e)rho + sum_P p_P P rho P on the 2x2 blocks of qubit q.
    n = rho.num_qubits
    p_i, p_x, p_y, p_z = probs
    hi, lo = 1 << (n - 1 - q), 1 << q
    r = rho.data.reshape(rho.batch_shape + (hi, 2, lo, hi, 2, lo))
    out = np.empty_like(r)
    r00, r11 = r[..., 0, :, :, 0, :], r[..., 1, :, :, 1, :]
    r01, r10 = r[..., 0, :, :, 1, :], r[..., 1, :, :, 0, :]
    keep_d, swap_d = p_i + p_z, p_x + p_y
    keep_o, swap_o = p_i - p_z, p_x - p_y
    out[..., 0, :, :, 0, :] = keep_d * r00 + swap_d * r11
    out[..., 1, :, :, 1, :] = keep_d * r11 + swap_d * r00
    out[..., 0, :, :, 1, :] = keep_o * r01 + swap_o * r10
    out[..., 1, :, :, 0, :] = keep_o * r10 + swap_o * r01
    return DensityMatrix(out.reshape(rho.data.shape), n)


def apply_channel(rho: DensityMatrix, ch: KrausChannel, *, use_fast_path: bool = True) -> DensityMatrix:
    """Return ``sum_j K_j rho K_j^dagger`` acting on ``ch.qubit``."""
    if not isinstance(rho, DensityMatrix):
        raise TypeError("apply_channel needs a DensityMatrix; use sample_trajectory for pure states")
    n = rho.num_qubits
    if ch.qubit >= n:
        raise IndexError(f"channel on qubit {ch.qubit} but state has {n} qubits")
    if ch.is_identity:
        return rho
    if use_fast_path and ch.pauli_probs is not None:
        return _pauli_channel_dm(rho, ch.pauli_probs, ch.qubit)
    flat = _flat(rho)
    acc = np.zeros_like(flat)
    for k in ch.operators:
        acc += _apply_1q(_apply_1q(flat, k, ch.qubit + n), k.conj(), ch.qubit)
    return _unflat(acc, n)


def _sample_channel_sv(state: StateVector, ch: KrausChannel, rng: np.random.Generator) -> StateVector:
    if ch.mixture is None:
        raise ValueError("channel is not a mixture of unitaries; use the density-matrix path")
    if ch.is_identity:
        return state
    probs, units = ch.mixture
    rows = int(np.prod(state.batch_shape, dtype=int))
    branch = rng.choice(len(probs), size=rows, p=probs / probs.sum())
    mats = np.stack(units)[branch]
    data = state.data.reshape(rows, -1)
    data = _apply_1q(data, mats, ch.qubit)
    return StateVector(data.reshape(state.data.shape), state.num_qubits)


def sample_trajectory(state: StateVector, ops: Iterable, rng: np.random.Generator) -> StateVector:
    """Run one stochastic pure-state trajectory per batch row.

    ``ops`` items are a ``Gate`` (unparameterized), a ``(Gate, theta)`` pair, or
    a ``KrausChannel``; each channel picks one unitary branch per row with its
    probability.
    """
    for op in ops:
        if isinstance(op, KrausChannel):
            state = _sample_channel_sv(state, op, rng)
        elif isinstance(op, tuple):
            state = apply_gate(state, *op)
        else:
            state = apply_gate(state, op)
    norm = state.norm()[..., None]
    return StateVector(state.data / norm, state.num_qubits)


def simulate(
    circuit: Circuit,
    angles=None,
    state=None,
    *,
    channel: KrausChannel | None = None,
    noisy: Sequence[bool] | None = None,
    rng: np.random.Generator | None = None,
):
    """Run ``circuit`` on ``state`` (default ``|0...0>``).

    ``angles`` has shape ``(S,)`` or ``(B, S)`` with ``S >= circuit.num_slots``;
    a 2-D array broadcasts a single initial state over ``B`` rows. When
    ``channel`` is given it follows every gate flagged in ``noisy`` (all gates
    by default), once on each qubit the gate touches. Density-matrix input
    applies the channel exactly; statevector input samples a trajectory and
    requires ``rng``.
    """
    n = circuit.num_qubits
    angles = None if angles is None else np.asarray(angles, dtype=float)
    if angles is not None and angles.shape[-1] < circuit.num_slots:
        raise ValueError(f"need {circuit.num_slots} angles, got {angles.shape[-1]}")
    if angles is None and circuit.num_slots:
        raise ValueError("circuit has rotation gates but no angles were given")
    batch = angles.shape[0] if angles is not None and angles.ndim == 2 else None
    if state is None:
        state = StateVector.zero(n, batch)
    elif state.num_qubits != n:
        raise ValueError("state and circuit qubit counts differ")
    if batch is not None and state.batch_shape != (batch,):
        data = state.data
        trail = data.shape[-2:] if isinstance(state, DensityMatrix) else data.shape[-1:]
        if state.batch_shape not in ((), (1,)):
            raise ValueError(f"state batch {state.batch_shape} does not match angle batch {batch}")
        data = np.broadcast_to(data.reshape(trail), (batch,) + trail).copy()
        state = type(state)(data, n)
    is_dm = isinstance(state, DensityMatrix)
    if channel is not None and not is_dm and rng is None:
        raise ValueError("trajectory sampling needs an rng")
    if noisy is not None and len(noisy) != len(circuit.gates):
        raise ValueError("noise mask length differs from gate count")
    for i, gate in enumerate(circuit.gates):
        theta = None
        if gate.param_slot is not None:
            theta = angles[..., gate.param_slot]
        state = apply_gate(state, gate, theta)
        if channel is None or channel.is_identity or (noisy is not None and not noisy[i]):
            continue
        for q in gate.qubits:
            ch = channel.on(q)
            state = apply_channel(state, ch) if is_dm else _sample_channel_sv(state, ch, rng)
    return state


# --------------------------------------------------------------------------
# measurement


def _apply_pauli_string(data: np.ndarray, ps: str, offset: int = 0) -> np.ndarray:
    for q, ch in enumerate(ps):
        if ch != "I":
            data = _apply_1q(data, PAULIS[ch], q + offset)
    return data


def expectation(state, obs: Observable):
    """``<psi|O|psi>`` or ``Tr(rho O)``; a float, or an array for batched states."""
    n = state.num_qubits
    if obs.num_qubits != n:
        raise ValueError(f"observable on {obs.num_qubits} qubits, state on {n}")
    total = 0.0
    if isinstance(state, DensityMatrix):
        flat = _flat(state)
        dim = 1 << n
        for c, ps in obs.terms:
            moved = _apply_pauli_string(flat, ps, offset=n)
            moved = moved.reshape(moved.shape[:-1] + (dim, dim))
            total = total + c * np.trace(moved, axis1=-2, axis2=-1).real
    else:
        for c, ps in obs.terms:
            moved = _apply_pauli_string(state.data, ps)
            total = total + c * np.sum(state.data.conj() * moved, axis=-1).real
    if np.ndim(total) == 0:
        return float(total)
    return total


@lru_cache(maxsize=None)
def _bit_table(n: int) -> np.ndarray:
    """``table[i, q]`` is bit ``q`` of basis index ``i``."""
    idx = np.arange(1 << n)
    return ((idx[:, None] >> np.arange(n)[None, :]) & 1).astype(np.int64)


def z_expectations(probs: np.ndarray, qubits: Sequence[int]) -> np.ndarray:
    """Exact ``<Z_q>`` for each ``q`` in ``qubits`` from basis probabilities."""
    n = probs.shape[-1].bit_length() - 1
    signs = 1.0 - 2.0 * _bit_table(n)[:, list(qubits)]
    return probs @ signs


def _flip_counts(ones: np.ndarray, total: int, p: float, rng: np.random.Generator) -> np.ndarray:
    if p == 0:
        return ones
    return rng.binomial(ones, 1.0 - p) + rng.binomial(total - ones, p)


def z_means_from_counts(
    counts: np.ndarray,
    qubits: Sequence[int],
    readout_flip: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Shot means of ``Z_q`` from outcome counts, with per-shot readout flips.

    ``counts[..., i]`` is how many shots gave basis outcome ``i``. A flipped
    readout bit is drawn independently per shot and per qubit, which for the
    per-qubit means is exactly two binomial draws.
    """
    n = counts.shape[-1].bit_length() - 1
    shots = counts.sum(axis=-1, keepdims=True)
    ones = counts @ _bit_table(n)[:, list(qubits)]
    if readout_flip:
        ones = _flip_counts(ones, shots, readout_flip, rng)
    return (shots - 2 * ones) / shots


def sample_counts(probs: np.ndarray, shots: int, rng: np.random.Generator) -> np.ndarray:
    """Multinomial outcome counts for each row of ``probs``."""
    p = np.clip(probs, 0.0, None)
    p = p / p.sum(axis=-1, keepdims=True)
    return rng.multinomial(shots, p)


def sample_shots(state, obs: Observable, shots: int, rng: np.random.Generator, readout_flip: float = 0.0):
    """Shot estimate of ``<O>``: each term measured with ``shots`` fresh shots.

    A term is measured by rotating its support into the Z basis; each shot's
    eigenvalue is the parity of the support bits, and a readout flip on any
    support bit flips the parity.
    """
    if shots < 1:
        raise ValueError("need at least one shot")
    n = state.num_qubits
    if obs.num_qubits != n:
        raise ValueError(f"observable on {obs.num_qubits} qubits, state on {n}")
    bits = _bit_table(n)
    total = 0.0
    for c, ps in obs.terms:
        support = [q for q, ch in enumerate(ps) if ch != "I"]
        if not support:
            total = total + c
            continue
        rotated = state
        for q in support:
            if ps[q] == "X":
                rotated = apply_gate(rotated, Gate("H", q))
            elif ps[q] == "Y":
                rotated = apply_gate(rotated, Gate("U", q, matrix=SDG))
                rotated = apply_gate(rotated, Gate("H", q))
        counts = sample_counts(rotated.probabilities(), shots, rng)
        odd = bits[:, support].sum(axis=1) % 2
        minus = counts @ odd
        if readout_flip:
            p_odd = (1.0 - (1.0 - 2.0 * readout_flip) ** len(support)) / 2.0
            minus = _flip_counts(minus, shots, p_odd, rng)
        total = total + c * (shots - 2 * minus) / shots
    if np.ndim(total) == 0:
        return float(total)
    return total

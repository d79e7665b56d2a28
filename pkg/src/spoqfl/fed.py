"""Federated training with sporadic update gating.

Each round the server broadcasts the global parameters, every client runs
``epochs`` local steps, and the server averages what the clients send back.
In ``spoqfl`` mode a client scales each step by ``x = exp(-gamma * |xi|)``,
where ``|xi|`` measures how far its noisy gradient is from a clean one, and
drops the step entirely when ``x < tau``. ``vanilla_qfl`` is the same loop
without gating.

Every client/round pair owns two random streams derived from the master seed:
one for minibatches and shots, one for the deviation estimator. Keeping the
estimator on its own stream is what makes ``spoqfl`` with ``gamma = tau = 0``
reproduce ``vanilla_qfl`` bit for bit.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import noise as nz
from .qnn import QnnModel, evaluate, param_shift_grad, sgd_step

log = logging.getLogger(__name__)

MODES = ("spoqfl", "vanilla_qfl")
ESTIMATORS = ("oracle", "empirical")
SCHEMES = ("iid", "label_skew", "dirichlet")


class ClientFailure(RuntimeError):
    pass


@dataclass
class FedConfig:
    rounds: int = 10
    epochs: int = 1
    clients: int = 5
    lr: float = 0.1
    gamma: float = 0.0
    tau: float = 0.0
    mode: str = "spoqfl"
    estimator: str = "oracle"
    shots: int | None = None
    batch_size: int = 16
    xi_metric: str = "rms"
    xi_repeats: int = 4
    weighted: bool = False
    noisy_eval: bool = False
    track_xi: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.rounds < 1 or self.clients < 1 or self.epochs < 0:
            raise ValueError("rounds and clients must be >= 1, epochs >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.gamma < 0 or self.tau < 0:
            raise ValueError("gamma and tau must be non-negative")
        if self.shots is not None and self.shots < 1:
            raise ValueError("shots must be >= 1 (or None for exact expectations)")
        if self.batch_size < 0:
            raise ValueError("batch_size must be >= 0 (0 means the whole shard)")
        if self.xi_metric not in nz.XI_METRICS:
            raise ValueError(f"xi_metric must be one of {nz.XI_METRICS}")

    @property
    def gating(self) -> bool:
        return self.mode == "spoqfl"

    @property
    def effective_gamma(self) -> float:
        return self.gamma if self.gating else 0.0

    @property
    def effective_tau(self) -> float:
        return self.tau if self.gating else 0.0


@dataclass
class EpochStat:
    epoch: int
    loss: float
    xi: float
    x: float
    skipped: bool


@dataclass
class ClientState:
    id: int
    shard: np.ndarray
    noise: nz.NoiseModel = field(default_factory=nz.NoiseModel)
    encoding: str | None = None
    local_params: np.ndarray | None = None
    round_stats: list[EpochStat] = field(default_factory=list)

    def __post_init__(self):
        self.shard = np.asarray(self.shard, dtype=int)
        if self.shard.size == 0:
            raise ValueError(f"client {self.id} has an empty shard")


@dataclass
class ClientResult:
    client_id: int
    params: np.ndarray | None
    stats: list[EpochStat]
    circuits: int
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


@dataclass
class RoundReport:
    round: int
    global_loss: float
    global_accuracy: float
    clients: list[ClientResult]
    skip_count: int
    mean_x: float
    mean_xi: float
    mean_train_loss: float
    wall_clock: float
    circuit_evals: int
    failed: list[int]


def sporadic_variable(xi_mag: float, gamma: float) -> float:
    """``exp(-gamma * |xi|)``: 1 for a clean gradient, toward 0 as noise grows."""
    if xi_mag < 0 or gamma < 0:
        raise ValueError("xi magnitude and gamma must be non-negative")
    return float(np.exp(-gamma * xi_mag))


def client_streams(seed: int, round_index: int, client_id: int):
    """``(train_rng, xi_rng)`` for one client in one round."""
    train = np.random.default_rng([seed, round_index, client_id, 0])
    xi = np.random.default_rng([seed, round_index, client_id, 1])
    return train, xi


def _estimate_xi(model, feats, labels, grad, client, cfg, xi_rng) -> tuple[float, int]:
    if cfg.estimator == "oracle":
        clean = param_shift_grad(model, feats, labels)
        return nz.xi_oracle(grad, clean.grad, cfg.xi_metric).magnitude, clean.circuits
    reps = max(2, cfg.xi_repeats)
    est = nz.xi_empirical(model, feats, labels, client.noise, reps, cfg.shots, xi_rng, cfg.xi_metric)
    return est.magnitude, reps * (2 * model.num_params + 1) * feats.shape[0]


def local_train(
    client: ClientState,
    global_params: np.ndarray,
    cfg: FedConfig,
    template: QnnModel,
    features: np.ndarray,
    labels: np.ndarray,
    seed: int = 0,
    round_index: int = 0,
) -> ClientResult:
    """Run ``cfg.epochs`` gated local steps starting from ``global_params``.

    Each epoch draws one minibatch from the shard, estimates the gradient on
    the client's noisy device, estimates ``|xi|`` on the same batch and
    applies ``w <- w - lr * x * g`` unless ``x < tau``. Non-finite values
    abort the client for this round.
    """
    train_rng, xi_rng = client_streams(seed, round_index, client.id)
    params = np.array(global_params, dtype=float)
    model = replace(template, params=params, encoding=client.encoding or template.encoding)
    noise = None if client.noise.noiseless else client.noise
    stats: list[EpochStat] = []
    circuits = 0
    need_xi = cfg.gating or cfg.track_xi
    gamma, tau = cfg.effective_gamma, cfg.effective_tau
    for t in range(cfg.epochs):
        size = len(client.shard) if cfg.batch_size == 0 else min(cfg.batch_size, len(client.shard))
        idx = np.sort(train_rng.choice(client.shard, size=size, replace=False))
        feats, ys = features[idx], labels[idx]
        model.params = params
        res = param_shift_grad(model, feats, ys, noise=noise, shots=cfg.shots, rng=train_rng)
        circuits += res.circuits
        if not (np.isfinite(res.loss) and np.all(np.isfinite(res.grad))):
            return ClientResult(client.id, None, stats, circuits, f"non-finite loss/gradient at epoch {t}")
        xi = 0.0
        if need_xi:
            xi, cost = _estimate_xi(model, feats, ys, res.grad, client, cfg, xi_rng)
            circuits += cost
        x = sporadic_variable(xi, gamma) if cfg.gating else 1.0
        skipped = cfg.gating and x < tau
        if not skipped:
            step = res.grad * x if cfg.gating else res.grad
            params = sgd_step(params, step, cfg.lr)
        stats.append(EpochStat(t, res.loss, xi, x, bool(skipped)))
    client.local_params = params
    client.round_stats = stats
    return ClientResult(client.id, params, stats, circuits)


def aggregate(updates, weights=None) -> np.ndarray:
    """Elementwise mean of client parameter vectors (optionally weighted)."""
    if len(updates) == 0:
        raise ValueError("no client updates to aggregate")
    stack = np.stack([np.asarray(u, dtype=float) for u in updates])
    if weights is None:
        return stack.mean(axis=0)
    w = np.asarray(weights, dtype=float)
    return (w[:, None] * stack).sum(axis=0) / w.sum()


class Federation:
    """Server-side coordinator for one federated run."""

    def __init__(self, template: QnnModel, clients: list[ClientState], cfg: FedConfig,
                 features, labels, test_features, test_labels, seed: int = 0,
                 eval_noise: nz.NoiseModel | None = None):
        self.model = template
        self.clients = sorted(clients, key=lambda c: c.id)
        self.cfg = cfg
        self.features = np.asarray(features, dtype=float)
        self.labels = np.asarray(labels, dtype=int)
        self.test_features = np.asarray(test_features, dtype=float)
        self.test_labels = np.asarray(test_labels, dtype=int)
        self.seed = seed
        self.eval_noise = eval_noise
        self.round = 0

    @property
    def params(self) -> np.ndarray:
        return self.model.params

    def _train_one(self, client: ClientState) -> ClientResult:
        try:
            return local_train(client, self.model.params, self.cfg, self.model,
                               self.features, self.labels, self.seed, self.round)
        except (FloatingPointError, ClientFailure) as exc:
            return ClientResult(client.id, None, [], 0, str(exc))

    def evaluate(self) -> tuple[float, float]:
        if self.cfg.noisy_eval and self.eval_noise is not None:
            return evaluate(self.model, self.test_features, self.test_labels, noise=self.eval_noise)
        return evaluate(self.model, self.test_features, self.test_labels)

    def run_round(self) -> RoundReport:
        start = time.perf_counter()
        if self.cfg.workers > 1:
            with ThreadPoolExecutor(self.cfg.workers) as pool:
                results = list(pool.map(self._train_one, self.clients))
        else:
            results = [self._train_one(c) for c in self.clients]
        ok = [r for r in results if not r.failed]
        failed = [r.client_id for r in results if r.failed]
        for r in results:
            if r.failed:
                log.warning("round %d: client %d excluded: %s", self.round, r.client_id, r.error)
        if ok:
            weights = None
            if self.cfg.weighted:
                sizes = {c.id: len(c.shard) for c in self.clients}
                weights = [sizes[r.client_id] for r in ok]
            new = aggregate([r.params for r in ok], weights)
            self.model = replace(self.model, params=new)
        else:
            log.warning("round %d: every client failed; keeping previous global model", self.round)
        g_loss, g_acc = self.evaluate()
        stats = [s for r in results for s in r.stats]
        report = RoundReport(
            round=self.round,
            global_loss=g_loss,
            global_accuracy=g_acc,
            clients=results,
            skip_count=sum(s.skipped for s in stats),
            mean_x=float(np.mean([s.x for s in stats])) if stats else 1.0,
            mean_xi=float(np.mean([s.xi for s in stats])) if stats else 0.0,
            mean_train_loss=float(np.mean([s.loss for s in stats])) if stats else float("nan"),
            wall_clock=time.perf_counter() - start,
            circuit_evals=sum(r.circuits for r in results),
            failed=failed,
        )
        self.round += 1
        return report

    def run(self, rounds: int | None = None, callback=None) -> list[RoundReport]:
        reports = []
        for _ in range(self.cfg.rounds if rounds is None else rounds):
            rep = self.run_round()
            reports.append(rep)
            if callback is not None:
                callback(rep)
        return reports


# --------------------------------------------------------------------------
# partitioning


def _labels_of(dataset) -> np.ndarray:
    return np.asarray(getattr(dataset, "labels", dataset), dtype=int)


def partition(dataset, scheme: str, num_clients: int, rng, *, alpha: float = 0.5,
              classes_per_client: int = 2, max_attempts: int = 100) -> list[np.ndarray]:
    """Split example indices into ``num_clients`` disjoint, non-empty shards.

    ``dataset`` is a label array or anything with a ``labels`` attribute.
    """
    labels = _labels_of(dataset)
    n = labels.shape[0]
    if scheme not in SCHEMES:
        raise ValueError(f"unknown partition scheme {scheme!r}")
    if not 1 <= num_clients <= n:
        raise ValueError(f"cannot split {n} examples over {num_clients} clients")
    if num_clients == 1:
        return [np.arange(n)]
    if scheme == "iid":
        return [np.sort(s) for s in np.array_split(rng.permutation(n), num_clients)]
    classes = np.unique(labels)
    if scheme == "dirichlet":
        if not alpha > 0:
            raise ValueError("alpha must be positive")
        draw = lambda: _dirichlet_split(labels, classes, num_clients, alpha, rng)
    else:
        s = classes_per_client
        if not 1 <= s <= len(classes):
            raise ValueError(f"classes_per_client must be in [1, {len(classes)}]")
        if s * num_clients < len(classes):
            raise ValueError(f"{num_clients} clients x {s} classes cannot cover {len(classes)} classes")
        draw = lambda: _label_skew_split(labels, classes, num_clients, s, rng)
    for _ in range(max_attempts):
        shards = draw()
        if all(len(s) for s in shards):
            return shards
    raise ValueError(f"{scheme} partition left a client empty after {max_attempts} attempts")


def _dirichlet_split(labels, classes, num_clients, alpha, rng):
    parts = [[] for _ in range(num_clients)]
    for c in classes:
        idx = rng.permutation(np.flatnonzero(labels == c))
        props = rng.dirichlet(np.full(num_clients, alpha))
        cuts = (np.cumsum(props)[:-1] * len(idx)).astype(int)
        for k, chunk in enumerate(np.split(idx, cuts)):
            parts[k].append(chunk)
    return [np.sort(np.concatenate(p)) for p in parts]


def _label_skew_split(labels, classes, num_clients, s, rng):
    order = classes[rng.permutation(len(classes))]
    holders = {c: [] for c in classes}
    for k in range(num_clients):
        for j in range(s):
            holders[order[(k * s + j) % len(classes)]].append(k)
    parts = [[] for _ in range(num_clients)]
    for c in classes:
        idx = rng.permutation(np.flatnonzero(labels == c))
        for k, chunk in zip(holders[c], np.array_split(idx, len(holders[c]))):
            parts[k].append(chunk)
    return [np.sort(np.concatenate(p)) if p else np.array([], dtype=int) for p in parts]

"""Run experiments and sweeps; write metrics, checkpoints and plot data.

Run directory layout::

    config.ini         full config echo; re-running it reproduces the run
    metrics.csv        one row per round, columns METRIC_COLUMNS
    rounds.jsonl       append-only round log (flushed every round)
    client_trace.csv   round, client, epoch, loss, xi, x, skipped
    plot_rounds.csv    round, accuracy, loss
    timings.csv        wall-clock per round (the only non-deterministic file)
    model.json         final global model checkpoint

Everything except ``timings.csv`` and the ``wall_clock`` field of
``rounds.jsonl`` is a pure function of the config.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..encode import capacity
from ..fed import ClientState, Federation, partition
from ..noise import read_noise_profile
from ..qnn import QnnModel, save_checkpoint
from . import data as dt
from .config import ConfigError, ExperimentConfig

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "round", "global_loss", "global_accuracy", "mean_train_loss", "mean_xi",
    "mean_x", "skip_count", "circuit_evals", "failed_clients",
)

SWEEP_AXES = {
    "qubits": ("model", "qubits"),
    "layers": ("model", "layers"),
    "lr": ("fed", "lr"),
    "loss_kind": ("model", "loss"),
    "clients": ("fed", "clients"),
    "noise_level": ("noise", "epsilon"),
    "gamma": ("fed", "gamma"),
    "tau": ("fed", "tau"),
}

# model init stream tag; keeps init independent of data and client streams
_INIT_STREAM = 7919


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def read_metrics(run_dir) -> list[dict]:
    with open(Path(run_dir) / "metrics.csv", newline="") as fh:
        return list(csv.DictReader(fh))


# ----------------------------------------------------------------- datasets


def build_dataset(cfg: ExperimentConfig) -> dt.Dataset:
    """Load or generate the dataset and reduce images to encoder capacity."""
    d = cfg.data
    seed = cfg.run.seed if d.data_seed < 0 else d.data_seed
    rng = np.random.default_rng([seed, 1])
    if d.source == "csv":
        ds = dt.load_csv(cfg.resolve(d.path))
    elif d.generator == "patterns":
        side = d.image_side or int(round(np.sqrt(d.features)))
        ds = dt.synth_patterns(d.n_per_class, d.classes, side, d.spread, rng)
    else:
        ds = dt.synth_blobs(d.n_per_class, d.classes, d.features, d.spread, rng)
    if d.image_side > 0:
        channels = 1 if (d.source == "synthetic") else d.image_channels
        cap = capacity(cfg.model.encoding, cfg.model.qubits)
        out_side = d.downsample_side or dt.auto_side(d.image_side, cap if d.grayscale or channels == 1 else cap // channels)
        feats = dt.downsample_image(ds.features, d.image_side, out_side, d.grayscale, channels)
        ds = dt.Dataset(feats, ds.labels, ds.num_classes, ds.name)
    return ds


def _augment(ds: dt.Dataset, cfg: ExperimentConfig) -> dt.Dataset:
    d = cfg.data
    if not d.hflip or d.image_side <= 0:
        return ds
    side = d.downsample_side or int(round(np.sqrt(ds.num_features)))
    if side * side != ds.num_features:
        raise ConfigError("hflip needs square single-channel image features")
    flipped = dt.hflip(ds.features, side)
    return dt.Dataset(np.vstack([ds.features, flipped]), np.concatenate([ds.labels, ds.labels]),
                      ds.num_classes, ds.name)


# --------------------------------------------------------------- experiment


@dataclass
class Setup:
    federation: Federation
    train: dt.Dataset
    test: dt.Dataset


def build(cfg: ExperimentConfig) -> Setup:
    """Everything a run needs, derived deterministically from ``cfg``."""
    ds = build_dataset(cfg)
    m = cfg.model
    if ds.num_classes > m.qubits:
        raise ConfigError(f"{ds.num_classes} classes need at least as many qubits (have {m.qubits})")
    encodings = cfg.client_encodings()
    for e in {m.encoding, *encodings}:
        if ds.num_features > capacity(e, m.qubits):
            raise ConfigError(
                f"{ds.num_features} features exceed {e} encoding capacity on {m.qubits} qubits")
    seed = cfg.run.seed
    train, test = dt.train_test_split(ds, cfg.data.test_fraction, np.random.default_rng([seed, 2]))
    train = _augment(train, cfg)
    fc = cfg.fed_config()
    try:
        shards = partition(train, cfg.data.partition, fc.clients, np.random.default_rng([seed, 3]),
                           alpha=cfg.data.alpha, classes_per_client=cfg.data.classes_per_client)
    except ValueError as exc:
        raise ConfigError(f"partition: {exc}") from None
    base = cfg.default_noise()
    eps = cfg.epsilons()
    profile = read_noise_profile(cfg.resolve(cfg.noise.profile)) if cfg.noise.profile else None
    clients = []
    for k, shard in enumerate(shards):
        if profile is not None:
            if k not in profile:
                raise ConfigError(f"noise profile has no entry for client {k}")
            nm = replace(profile[k], placement=base.placement)
        elif eps:
            nm = replace(base, epsilon=eps[k % len(eps)])
        else:
            nm = base
        e = encodings[k % len(encodings)] if encodings else None
        clients.append(ClientState(k, shard, nm, e))
    model = QnnModel.initialize(
        m.qubits, m.layers, ds.num_classes, np.random.default_rng([seed, _INIT_STREAM]),
        init_scale=m.init_scale, encoding=m.encoding, loss_kind=m.loss, beta=m.beta,
        angle_scale=m.angle_scale,
    )
    fed = Federation(model, clients, fc, train.features, train.labels, test.features, test.labels,
                     seed=seed, eval_noise=base)
    return Setup(fed, train, test)


def _metric_row(rep) -> list:
    return [rep.round, rep.global_loss, rep.global_accuracy, rep.mean_train_loss, rep.mean_xi,
            rep.mean_x, rep.skip_count, rep.circuit_evals, ";".join(map(str, rep.failed))]


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> Path:
    """Execute every round of ``cfg`` and write the run directory."""
    out = Path(out_dir) if out_dir is not None else cfg.resolve(cfg.run.output)
    out.mkdir(parents=True, exist_ok=True)
    write_atomic(out / "config.ini", cfg.to_ini())
    setup = build(cfg)
    fed = setup.federation
    metrics, traces, timings = [], [], []
    log_path = out / "rounds.jsonl"
    log_path.write_text("")

    def on_round(rep):
        metrics.append(_metric_row(rep))
        timings.append([rep.round, rep.wall_clock])
        for r in rep.clients:
            for s in r.stats:
                traces.append([rep.round, r.client_id, s.epoch, s.loss, s.xi, s.x, int(s.skipped)])
        record = dict(zip(METRIC_COLUMNS, _metric_row(rep)))
        record["failed_clients"] = rep.failed
        record["wall_clock"] = rep.wall_clock
        record["clients"] = [
            {"id": r.client_id, "error": r.error,
             "epochs": [[s.loss, s.xi, s.x, s.skipped] for s in r.stats]}
            for r in rep.clients
        ]
        with open(log_path, "a") as fh:
            fh.write(json.dumps(record) + "\n")
            fh.flush()
        log.info("round %d: loss=%.4f acc=%.3f skips=%d", rep.round, rep.global_loss,
                 rep.global_accuracy, rep.skip_count)

    try:
        fed.run(callback=on_round)
    finally:
        write_atomic(out / "metrics.csv", _csv_text(METRIC_COLUMNS, metrics))
        write_atomic(out / "client_trace.csv",
                     _csv_text(("round", "client", "epoch", "loss", "xi", "x", "skipped"), traces))
        write_atomic(out / "plot_rounds.csv",
                     _csv_text(("round", "accuracy", "loss"), [[r[0], r[2], r[1]] for r in metrics]))
        write_atomic(out / "timings.csv", _csv_text(("round", "wall_clock"), timings))
    save_checkpoint(fed.model, out / "model.json")
    return out


# -------------------------------------------------------------------- sweeps


@dataclass
class SweepRow:
    value: str
    final_loss: float
    final_accuracy: float
    status: str
    run_dir: str


def sweep_config(base: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {sorted(SWEEP_AXES)}")
    section, key = SWEEP_AXES[axis]
    cfg = base.with_value(section, key, str(value))
    if axis == "noise_level":
        cfg = cfg.with_value("noise", "epsilons", "")
    cfg.validate()
    return cfg


def run_sweep(base: ExperimentConfig, axis: str, values, out_dir=None) -> list[SweepRow]:
    """One run per axis value (seed held fixed) plus ``summary.csv``."""
    out = Path(out_dir) if out_dir is not None else base.resolve(base.run.output)
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {sorted(SWEEP_AXES)}")
    rows: list[SweepRow] = []
    for value in values:
        cell = out / f"{axis}={value}"
        try:
            cfg = sweep_config(base, axis, value)
            run_dir = run_experiment(cfg, cell)
            last = read_metrics(run_dir)[-1]
            rows.append(SweepRow(str(value), float(last["global_loss"]),
                                 float(last["global_accuracy"]), "ok", str(cell)))
        except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the sweep
            log.error("sweep cell %s=%s failed: %s", axis, value, exc)
            rows.append(SweepRow(str(value), float("nan"), float("nan"), f"error: {exc}", str(cell)))
    if rows:
        out.mkdir(parents=True, exist_ok=True)
        write_atomic(out / "summary.csv", _csv_text(
            (axis, "final_loss", "final_accuracy", "status"),
            [[r.value, r.final_loss, r.final_accuracy, r.status] for r in rows]))
    return rows


# ----------------------------------------------------------------- plotting


def emit_plot_data(run_dirs, labels, out_dir, prefix: str = "compare",
                   metrics=("global_accuracy", "global_loss")) -> list[Path]:
    """Align per-round series of several runs; one CSV per metric.

    Runs of unequal length are truncated to the shortest, with a warning.
    """
    run_dirs = [Path(p) for p in run_dirs]
    if len(labels) != len(run_dirs):
        raise ValueError("need one label per run")
    if not run_dirs:
        raise ValueError("no runs to plot")
    series = [read_metrics(p) for p in run_dirs]
    n = min(len(s) for s in series)
    if any(len(s) != n for s in series):
        warnings.warn(f"runs have different round counts; truncating to {n}", RuntimeWarning, stacklevel=2)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for metric in metrics:
        short = metric.replace("global_", "")
        rows = [[series[0][i]["round"]] + [s[i][metric] for s in series] for i in range(n)]
        path = out / f"{prefix}_{short}.csv"
        write_atomic(path, _csv_text(["round", *labels], rows))
        written.append(path)
    return written


def run_compare(base: ExperimentConfig, out_dir=None) -> list[Path]:
    """Vanilla QFL and SpoQFL on the same seed, plus aligned plot data."""
    out = Path(out_dir) if out_dir is not None else base.resolve(base.run.output)
    vanilla = base.with_overrides(["fed.mode=vanilla_qfl", "fed.gamma=0.0", "fed.tau=0.0"])
    spo = base.with_overrides(["fed.mode=spoqfl"])
    dirs = [run_experiment(vanilla, out / "qfl"), run_experiment(spo, out / "spoqfl")]
    label = base.run.label
    prefix = f"compare_{label}" if label else "compare"
    return emit_plot_data(dirs, ["QFL", "SpoQFL"], out, prefix=prefix)

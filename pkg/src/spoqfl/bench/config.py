"""Experiment configuration: INI file with five sections, every key typed.

Unknown sections or keys are errors. Overrides use ``section.key=value`` or
a bare ``key=value`` when the key name is unique across sections.
"""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from ..encode import ENCODINGS
from ..fed import SCHEMES, FedConfig
from ..noise import NoiseModel
from ..qnn import LOSSES


class ConfigError(ValueError):
    pass


@dataclass
class DataSpec:
    source: str = "synthetic"
    path: str = ""
    generator: str = "blobs"
    n_per_class: int = 40
    classes: int = 2
    features: int = 2
    spread: float = 0.1
    data_seed: int = -1
    image_side: int = 0
    image_channels: int = 1
    downsample_side: int = 0
    grayscale: bool = True
    hflip: bool = False
    test_fraction: float = 0.25
    partition: str = "iid"
    alpha: float = 0.5
    classes_per_client: int = 1


@dataclass
class ModelSpec:
    qubits: int = 2
    layers: int = 1
    encoding: str = "angle"
    loss: str = "cross_entropy"
    beta: float = 2.0
    angle_scale: float = math.pi
    init_scale: float = math.pi / 1000


@dataclass
class FedSpec:
    rounds: int = 10
    epochs: int = 1
    clients: int = 5
    lr: float = 0.1
    gamma: float = 0.0
    tau: float = 0.0
    mode: str = "spoqfl"
    estimator: str = "oracle"
    shots: int = 0
    batch_size: int = 16
    xi_metric: str = "rms"
    xi_repeats: int = 4
    weighted: bool = False
    noisy_eval: bool = False
    track_xi: bool = True
    workers: int = 1
    client_encodings: str = ""


@dataclass
class NoiseSpec:
    epsilon: float = 0.0
    epsilons: str = ""
    pauli_weights: str = "1,1,1"
    readout_flip: float = 0.0
    placement: str = "all"
    profile: str = ""


@dataclass
class RunSpec:
    seed: int = 0
    output: str = "runs/experiment"
    label: str = ""


SECTIONS = {"data": DataSpec, "model": ModelSpec, "fed": FedSpec, "noise": NoiseSpec, "run": RunSpec}


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _float_list(text: str, what: str) -> list[float]:
    try:
        return [float(t) for t in text.replace(";", ",").split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"{what}: expected comma-separated numbers, got {text!r}") from None


@dataclass
class ExperimentConfig:
    data: DataSpec = field(default_factory=DataSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    fed: FedSpec = field(default_factory=FedSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    run: RunSpec = field(default_factory=RunSpec)
    base_dir: Path = field(default_factory=Path.cwd, compare=False)

    # ---------------------------------------------------------------- parsing

    @classmethod
    def from_string(cls, text: str, base_dir=None) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"unreadable config: {exc}") from None
        cfg = cls(base_dir=Path(base_dir) if base_dir else Path.cwd())
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]")
            for key, raw in parser.items(section):
                cfg = cfg.with_value(section, key, raw)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_string(path.read_text(), base_dir=path.parent)

    def with_value(self, section: str, key: str, raw) -> "ExperimentConfig":
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        spec = getattr(self, section)
        names = {f.name: f for f in fields(spec)}
        if key not in names:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        default = getattr(SECTIONS[section](), key)
        try:
            value = raw if not isinstance(raw, str) else _parse_value(raw, default)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from None
        return replace(self, **{section: replace(spec, **{key: value})})

    def with_overrides(self, overrides) -> "ExperimentConfig":
        """Apply ``["section.key=value", "key=value", ...]``."""
        cfg = self
        for item in overrides or ():
            if "=" not in item:
                raise ConfigError(f"override must look like key=value: {item!r}")
            name, raw = item.split("=", 1)
            name = name.strip()
            if "." in name:
                section, key = name.split(".", 1)
            else:
                owners = [s for s, t in SECTIONS.items() if name in {f.name for f in fields(t)}]
                if len(owners) != 1:
                    raise ConfigError(f"key {name!r} is {'ambiguous' if owners else 'unknown'}; use section.key")
                section, key = owners[0], name
            cfg = cfg.with_value(section, key, raw)
        cfg.validate()
        return cfg

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for section in SECTIONS:
            spec = getattr(self, section)
            parser[section] = {f.name: _format_value(getattr(spec, f.name)) for f in fields(spec)}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    # ------------------------------------------------------------- validation

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def validate(self) -> None:
        d, m, n = self.data, self.model, self.noise
        if d.source not in ("synthetic", "csv"):
            raise ConfigError("data.source must be 'synthetic' or 'csv'")
        if d.source == "csv" and not self.resolve(d.path).is_file():
            raise ConfigError(f"data.path does not exist: {d.path!r}")
        if d.generator not in ("blobs", "patterns"):
            raise ConfigError("data.generator must be 'blobs' or 'patterns'")
        if d.partition not in SCHEMES:
            raise ConfigError(f"data.partition must be one of {SCHEMES}")
        if m.encoding not in ENCODINGS:
            raise ConfigError(f"model.encoding must be one of {ENCODINGS}")
        if m.loss not in LOSSES:
            raise ConfigError(f"model.loss must be one of {LOSSES}")
        if not 1 <= m.qubits <= 14:
            raise ConfigError("model.qubits must be in [1, 14]")
        for e in self.client_encodings():
            if e not in ENCODINGS:
                raise ConfigError(f"fed.client_encodings: unknown encoding {e!r}")
        if n.profile and not self.resolve(n.profile).is_file():
            raise ConfigError(f"noise.profile does not exist: {n.profile!r}")
        try:
            self.fed_config()
            self.default_noise()
            for eps in _float_list(n.epsilons, "noise.epsilons"):
                replace(self.default_noise(), epsilon=eps)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    # ---------------------------------------------------------------- helpers

    def fed_config(self) -> FedConfig:
        f = self.fed
        return FedConfig(
            rounds=f.rounds, epochs=f.epochs, clients=f.clients, lr=f.lr, gamma=f.gamma, tau=f.tau,
            mode=f.mode, estimator=f.estimator, shots=f.shots or None, batch_size=f.batch_size,
            xi_metric=f.xi_metric, xi_repeats=f.xi_repeats, weighted=f.weighted,
            noisy_eval=f.noisy_eval, track_xi=f.track_xi, workers=f.workers,
        )

    def client_encodings(self) -> list[str]:
        return [e.strip() for e in self.fed.client_encodings.split(",") if e.strip()]

    def default_noise(self) -> NoiseModel:
        n = self.noise
        w = _float_list(n.pauli_weights, "noise.pauli_weights")
        if len(w) != 3 or min(w) < 0 or sum(w) <= 0:
            raise ConfigError("noise.pauli_weights needs three non-negative numbers")
        total = sum(w)
        return NoiseModel(n.epsilon, tuple(v / total for v in w), n.readout_flip, n.placement)

    def epsilons(self) -> list[float]:
        return _float_list(self.noise.epsilons, "noise.epsilons")

"""Run configuration stored as INI text, one section per module."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields

from .nn import NetworkConfig
from .topology import EvolutionConfig

TRAINERS = ("sequential", "wasap", "wassp")


@dataclass
class DataSection:
    source: str = "synth"  # synth | file
    train: str = ""
    test: str = ""
    label_column: int = -1
    has_header: bool = True
    samples: int = 2600
    test_samples: int = 600
    test_fraction: float = 0.3
    features: int = 500
    informative: int = 5
    redundant: int = 15
    classes: int = 2
    class_sep: float = 2.0
    flip: float = 0.01
    clusters_per_class: int = 16
    data_seed: int = 0


@dataclass
class NetworkSection:
    hidden: str = "400,100,400"
    epsilon: float = 10.0
    activation: str = "all_relu"
    alpha: float = 0.5
    dropout: float = 0.3
    init: str = "normal"
    loss: str = "softmax_cross_entropy"
    dtype: str = "float32"


@dataclass
class OptimizerSection:
    eta: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0002
    batch_size: int = 32


@dataclass
class EvolutionSection:
    zeta: float = 0.3
    importance: bool = False
    importance_start: int = 200
    importance_period: int = 5
    importance_percentile: float = 5.0
    prune_outgoing: bool = True
    exclude_isolated: bool = True


@dataclass
class TrainerSection:
    trainer: str = "sequential"
    workers: int = 1
    tau1: int = 0  # 0: 80 % of epochs
    tau2: int = 0  # 0: all epochs
    warmup_epochs: int = 5
    lr_boost: float = 2.0
    boost_epochs: int = 5
    scheduler: str = "threaded"
    watchdog: float = 30.0


@dataclass
class RunSection:
    epochs: int = 500
    seed: int = 0
    out: str = "runs/default"
    audit: bool = False


SECTIONS = {
    "data": DataSection,
    "network": NetworkSection,
    "optimizer": OptimizerSection,
    "evolution": EvolutionSection,
    "trainer": TrainerSection,
    "run": RunSection,
}


def _parse_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(value, typ):
    if typ in (bool, "bool"):
        return value if isinstance(value, bool) else _parse_bool(value)
    if typ in (int, "int"):
        return int(value)
    if typ in (float, "float"):
        return float(value)
    return str(value)


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    evolution: EvolutionSection = field(default_factory=EvolutionSection)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    run: RunSection = field(default_factory=RunSection)

    # -- key lookup ----------------------------------------------------------

    @staticmethod
    def keys() -> dict:
        """Map each key name to its section; key names are unique."""
        out = {}
        for section, cls in SECTIONS.items():
            for f in fields(cls):
                out[f.name] = section
        return out

    def set(self, key: str, value) -> None:
        key = key.replace("-", "_")
        section = self.keys().get(key)
        if section is None:
            raise ValueError(f"unknown config key {key!r}")
        obj = getattr(self, section)
        typ = {f.name: f.type for f in fields(obj)}[key]
        try:
            setattr(obj, key, _convert(value, typ))
        except ValueError as exc:
            raise ValueError(f"{key}: {exc}") from None

    def get(self, key: str):
        return getattr(getattr(self, self.keys()[key]), key)

    # -- INI ------------------------------------------------------------------

    def to_ini(self) -> str:
        lines = []
        for section in SECTIONS:
            lines.append(f"[{section}]")
            for f in fields(getattr(self, section)):
                v = getattr(getattr(self, section), f.name)
                if isinstance(v, bool):
                    v = "true" if v else "false"
                lines.append(f"{f.name} = {v}")
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_ini(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.read_string(text)
        cfg = cls()
        for section in parser.sections():
            if section not in SECTIONS:
                raise ValueError(f"unknown config section [{section}]")
            valid = {f.name for f in fields(SECTIONS[section])}
            for key, value in parser.items(section):
                if key not in valid:
                    raise ValueError(f"unknown key {key!r} in [{section}]")
                cfg.set(key, value)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_ini(fh.read())

    def copy(self) -> "RunConfig":
        return dataclasses.replace(
            self, **{s: dataclasses.replace(getattr(self, s)) for s in SECTIONS}
        )

    # -- derived objects --------------------------------------------------------

    @property
    def hidden_sizes(self) -> list:
        text = self.network.hidden.strip()
        if not text:
            return []
        return [int(v) for v in text.split(",")]

    def network_config(self, n_features: int, n_classes: int) -> NetworkConfig:
        n = self.network
        return NetworkConfig(
            layer_sizes=[n_features, *self.hidden_sizes, n_classes],
            epsilon=n.epsilon,
            activation=n.activation,
            alpha=n.alpha,
            dropout_rate=n.dropout,
            init_scheme=n.init,
            loss=n.loss,
            seed=self.run.seed,
            dtype=n.dtype,
        )

    def evolution_config(self) -> EvolutionConfig:
        e = self.evolution
        return EvolutionConfig(
            zeta=e.zeta,
            importance_enabled=e.importance,
            importance_start_epoch=e.importance_start,
            importance_period=e.importance_period,
            importance_percentile=e.importance_percentile,
            prune_outgoing=e.prune_outgoing,
            exclude_isolated=e.exclude_isolated,
        )

    def phase_epochs(self) -> tuple[int, int]:
        epochs = self.run.epochs
        tau2 = self.trainer.tau2 or epochs
        tau1 = self.trainer.tau1 or max(1, int(round(0.8 * tau2)))
        return tau1, tau2

    def validate(self) -> None:
        """Check every module precondition before any work starts."""
        if self.run.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.trainer.trainer not in TRAINERS:
            raise ValueError(f"trainer must be one of {TRAINERS}, got {self.trainer.trainer!r}")
        if self.trainer.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.trainer.trainer == "sequential" and self.trainer.workers != 1:
            raise ValueError("the sequential trainer uses exactly one worker")
        if self.trainer.scheduler not in ("threaded", "scripted"):
            raise ValueError("scheduler must be 'threaded' or 'scripted'")
        if self.trainer.trainer != "sequential":
            tau1, tau2 = self.phase_epochs()
            if not 1 <= tau1 <= tau2:
                raise ValueError(f"need 1 <= tau1 <= tau2, got tau1={tau1}, tau2={tau2}")
            if tau2 != self.run.epochs:
                raise ValueError(f"tau2 ({tau2}) must equal epochs ({self.run.epochs})")
        if self.optimizer.eta <= 0:
            raise ValueError("eta must be > 0")
        if not 0 <= self.optimizer.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.optimizer.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if any(h < 1 for h in self.hidden_sizes):
            raise ValueError("hidden layer sizes must be >= 1")
        d = self.data
        if d.source not in ("synth", "file"):
            raise ValueError("data source must be synth or file")
        if d.source == "file" and not d.train:
            raise ValueError("data source 'file' needs a train path")
        if d.source == "synth" and d.informative + d.redundant > d.features:
            raise ValueError("informative + redundant exceeds features")
        self.evolution_config()
        self.network_config(2, 2).validate()

"""Sequential momentum-SGD training with SET evolution and importance pruning."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .errors import DataError, StaleError
from .nn import SparseNetwork, backward, evaluate, forward, gradient_flow
from .sparse import GradientUpdate, align_values
from .topology import EvolutionConfig, ImportanceReport, importance_prune, set_evolve

log = logging.getLogger(__name__)

# spawn-key roots for independent random streams
_INIT, _EVOLVE, _WORKER = 0, 1, 2


def init_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_INIT,)))


@dataclass
class RngStreams:
    """Shuffle, dropout and evolution streams for one training context."""

    shuffle: np.random.Generator
    dropout: np.random.Generator
    evolve: np.random.Generator

    @classmethod
    def for_worker(cls, seed: int, worker: int = 0, local_evolve: bool = False) -> "RngStreams":
        def gen(*key):
            return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))

        evolve = gen(_WORKER, worker, 2) if local_evolve else gen(_EVOLVE)
        return cls(gen(_WORKER, worker, 0), gen(_WORKER, worker, 1), evolve)


@dataclass
class OptimizerState:
    eta: float = 0.01
    mu: float = 0.9
    weight_decay: float = 0.0002
    velocity: list = field(default_factory=list)
    bias_velocity: list = field(default_factory=list)
    topology_version: int = 0

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("learning rate must be > 0")
        if not 0 <= self.mu < 1:
            raise ValueError("momentum must be in [0, 1)")

    @classmethod
    def for_network(cls, network: SparseNetwork, eta=0.01, mu=0.9, weight_decay=0.0002) -> "OptimizerState":
        opt = cls(eta, mu, weight_decay)
        opt.velocity = [np.zeros(w.nnz, dtype=w.dtype) for w in network.layers]
        opt.bias_velocity = [np.zeros_like(b) for b in network.biases]
        opt.topology_version = network.topology_version
        return opt

    def clone(self) -> "OptimizerState":
        return OptimizerState(
            self.eta,
            self.mu,
            self.weight_decay,
            [v.copy() for v in self.velocity],
            [v.copy() for v in self.bias_velocity],
            self.topology_version,
        )


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float
    nnz: list
    gradient_flow: float
    seconds: float
    source: str = "sequential"
    importance: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    final_test_loss: float | None = None
    final_test_acc: float | None = None
    extras: dict = field(default_factory=dict)

    @property
    def best_test_acc(self) -> float:
        return max(r.test_acc for r in self.records)

    @property
    def last(self) -> EpochRecord:
        return self.records[-1]

    def series(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]


def sgd_momentum_step(network: SparseNetwork, opt: OptimizerState, grad: GradientUpdate, lr=None) -> None:
    """``v <- mu v - eta g``; ``w <- w + v``.

    Weight arrays are replaced rather than written in place so snapshots
    handed out earlier stay valid.
    """
    if grad.topology_version != network.topology_version or opt.topology_version != network.topology_version:
        raise StaleError(
            f"gradient topology {grad.topology_version}, optimizer {opt.topology_version}, "
            f"network {network.topology_version}"
        )
    eta = opt.eta if lr is None else lr
    layers = []
    for i, w in enumerate(network.layers):
        g = grad.layer_grads[i]
        if g.shape != (w.nnz,):
            raise StaleError(f"layer {i}: gradient has {g.shape[0]} entries, layer has {w.nnz}")
        v = opt.velocity[i]
        v *= opt.mu
        v -= w.dtype.type(eta) * g
        layers.append(w.with_values(w.values + v))
    for i, b in enumerate(network.biases):
        v = opt.bias_velocity[i]
        v *= opt.mu
        v -= b.dtype.type(eta) * grad.bias_grads[i]
        network.biases[i] = b + v
    network.layers = layers
    network.timestamp += 1


def realign_optimizer(opt: OptimizerState, old_layers, new_layers, topology_version=None) -> None:
    """Carry velocities of surviving connections; new connections start at 0."""
    for i, (old, new) in enumerate(zip(old_layers, new_layers)):
        if old.same_structure(new):
            continue
        opt.velocity[i], _ = align_values(old, opt.velocity[i], new)
    if topology_version is not None:
        opt.topology_version = topology_version


def epoch_boundary(network, opt, evo: EvolutionConfig, epoch: int, rng) -> ImportanceReport | None:
    """Importance pruning (when scheduled) then SET on every layer."""
    old = list(network.layers)
    report = None
    if evo.importance_due(epoch):
        report = importance_prune(network, evo.importance_percentile, evo.prune_outgoing, evo.exclude_isolated)
    scheme = network.config.init_scheme
    network.set_layers([set_evolve(w, evo.zeta, scheme, rng) for w in network.layers])
    realign_optimizer(opt, old, network.layers, network.topology_version)
    return report


@dataclass
class EpochStats:
    loss_sum: float = 0.0
    correct: int = 0
    samples: int = 0
    flow_sum: float = 0.0
    steps: int = 0

    def add(self, grad: GradientUpdate, flow: float) -> None:
        self.loss_sum += grad.loss_sum
        self.correct += grad.correct
        self.samples += grad.sample_count
        self.flow_sum += flow
        self.steps += 1

    @property
    def loss(self):
        return self.loss_sum / max(self.samples, 1)

    @property
    def acc(self):
        return self.correct / max(self.samples, 1)

    @property
    def flow(self):
        return self.flow_sum / max(self.steps, 1)


def batch_order(indices: np.ndarray, batch_size: int, rng) -> list:
    perm = indices[rng.permutation(indices.size)]
    return [perm[s : s + batch_size] for s in range(0, perm.size, batch_size)]


def compute_gradient(network, x, y, weight_decay, rng) -> GradientUpdate:
    trace = forward(network, x, mode="train", rng=rng)
    return backward(network, trace, y, weight_decay)


def train_epoch(network, opt, x, y, indices, batch_size, rngs: RngStreams, stats: EpochStats) -> None:
    for idx in batch_order(indices, batch_size, rngs.shuffle):
        grad = compute_gradient(network, x[idx], y[idx], opt.weight_decay, rngs.dropout)
        stats.add(grad, gradient_flow(grad))
        sgd_momentum_step(network, opt, grad)


def make_record(network, data, epoch, stats: EpochStats, started: float, source: str) -> EpochRecord:
    test_loss, test_acc = evaluate(network, data.x_test, data.y_test)
    return EpochRecord(
        epoch=epoch,
        train_loss=stats.loss,
        train_acc=stats.acc,
        test_loss=test_loss,
        test_acc=test_acc,
        nnz=network.nnz,
        gradient_flow=stats.flow,
        seconds=time.perf_counter() - started,
        source=source,
    )


def train_sequential(
    network: SparseNetwork,
    opt: OptimizerState,
    evo: EvolutionConfig,
    data,
    epochs: int,
    batch_size: int,
    rng=0,
    on_record: Callable | None = None,
    should_stop: Callable | None = None,
) -> TrainReport:
    """Minibatch momentum SGD with per-epoch SET and scheduled importance pruning.

    ``rng`` is a seed or an :class:`RngStreams`. Evaluation happens before
    the epoch-end topology update, and the last epoch skips the update so
    every shipped weight has been trained.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if data.x_train.shape[0] == 0:
        raise DataError("empty training set")
    rngs = rng if isinstance(rng, RngStreams) else RngStreams.for_worker(int(rng))
    x = np.ascontiguousarray(data.x_train, dtype=network.dtype)
    y = data.y_train
    indices = np.arange(x.shape[0])
    report = TrainReport()
    started = time.perf_counter()
    for epoch in range(1, epochs + 1):
        stats = EpochStats()
        train_epoch(network, opt, x, y, indices, batch_size, rngs, stats)
        record = make_record(network, data, epoch, stats, started, "sequential")
        stop = should_stop is not None and should_stop()
        if epoch < epochs and not stop:
            imp = epoch_boundary(network, opt, evo, epoch, rngs.evolve)
            if imp is not None:
                record.importance = imp.summary()
        report.records.append(record)
        if on_record is not None:
            on_record(record)
        if stop:
            log.info("stop requested; ending after epoch %d", epoch)
            break
    report.final_test_loss, report.final_test_acc = report.last.test_loss, report.last.test_acc
    return report

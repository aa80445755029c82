"""Two-phase parallel training.

Phase one is an asynchronous parameter server: workers compute gradients on
model snapshots and push them; the server filters each push against its
current topology, applies it, runs topology evolution every
``updates_per_epoch`` applied updates and replies with a fresh snapshot.
Phase two trains K replicas independently on their shards and finishes by
averaging them and magnitude re-sparsifying to the phase-one size.

WASSP replaces phase one with synchronous gradient averaging.
"""

from __future__ import annotations

import json
import logging
import math
import os
import queue
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ._kernels import serial_kernels
from .data import shard
from .errors import DataError, DeadlockError, ProtocolError
from .nn import SparseNetwork, evaluate, gradient_flow
from .sparse import GradientUpdate, align_values
from .topology import EvolutionConfig, average_models
from .train import (
    EpochRecord,
    EpochStats,
    OptimizerState,
    RngStreams,
    TrainReport,
    batch_order,
    compute_gradient,
    epoch_boundary,
    make_record,
    sgd_momentum_step,
)

log = logging.getLogger(__name__)

PHASE_ONE, PHASE_TWO, DONE = "one", "two", "done"


@dataclass
class GradPush:
    worker_id: int
    grad: GradientUpdate


@dataclass
class ModelReply:
    worker_id: int
    model: SparseNetwork | None
    t_prime: int
    stop: bool = False


@dataclass
class WorkerFailure:
    worker_id: int
    exc: BaseException


class AuditLog:
    """In-memory audit of protocol events, optionally mirrored to a JSONL file."""

    def __init__(self, path=None, check_safety=True):
        self.records = []
        self.check_safety = check_safety
        self._fh = open(path, "a", buffering=1) if path else None
        self.violations = 0

    def add(self, record: dict) -> None:
        if record.get("safe") is False:
            self.violations += 1
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record) + "\n")

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


@dataclass
class ServerState:
    model: SparseNetwork
    opt: OptimizerState
    evo: EvolutionConfig
    updates_per_epoch: int
    total_epochs: int
    phase_one_epochs: int
    rng: np.random.Generator
    data: object = None
    lr_schedule: Callable | None = None
    t_prime: int = 0
    epoch: int = 0
    phase: str = PHASE_ONE
    audit: AuditLog | None = None
    stats: EpochStats = field(default_factory=EpochStats)
    records: list = field(default_factory=list)
    on_record: Callable | None = None
    should_stop: Callable | None = None
    dropped_entries: int = 0
    discarded_pushes: int = 0
    staleness: list = field(default_factory=list)
    started: float = field(default_factory=time.perf_counter)
    source: str = "server"
    stopped_early: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.updates_per_epoch < 1:
            raise ValueError("updates_per_epoch must be >= 1")

    def lr(self) -> float:
        if self.lr_schedule is None:
            return self.opt.eta
        return self.lr_schedule(self)


def retain_valid_updates(grad: GradientUpdate, model: SparseNetwork):
    """Restrict ``grad`` to connections present in ``model``.

    Returns ``(update or None, dropped_entry_count)``. Entries of the model's
    support the gradient does not cover are zero. ``None`` means the push
    could not be re-indexed and is discarded.
    """
    if grad.topology_version == model.topology_version:
        return grad, 0
    if grad.supports is None or len(grad.supports) != len(model.layers):
        return None, sum(g.size for g in grad.layer_grads)
    grads, dropped = [], 0
    for g, src, dst in zip(grad.layer_grads, grad.supports, model.layers):
        if src.shape != dst.shape:
            return None, sum(x.size for x in grad.layer_grads)
        aligned, kept = align_values(src, g, dst)
        grads.append(aligned)
        dropped += g.size - kept
    out = GradientUpdate(
        grads,
        list(grad.bias_grads),
        timestamp=grad.timestamp,
        sample_count=grad.sample_count,
        topology_version=model.topology_version,
        supports=list(model.layers),
        loss_sum=grad.loss_sum,
        correct=grad.correct,
    )
    return out, dropped


def _applied_subset(grad: GradientUpdate, retained: GradientUpdate, model: SparseNetwork) -> bool:
    """Independent check that every applied entry addresses a model connection
    and carries the worker's value for that connection."""
    for i, w in enumerate(model.layers):
        g = retained.layer_grads[i]
        if g.shape != (w.nnz,) or not retained.supports[i].same_structure(w):
            return False
        if grad.supports is None or retained is grad:
            continue
        src = grad.supports[i].keys
        applied = w.keys[g != 0]
        pos = np.minimum(np.searchsorted(src, applied), max(src.size - 1, 0))
        if applied.size and (src.size == 0 or not np.array_equal(src[pos], applied)):
            return False
        if applied.size and not np.array_equal(grad.layer_grads[i][pos], g[g != 0]):
            return False
    return True


def _boundary(state: ServerState) -> None:
    """Epoch end: record, then evolve unless this is the last trained epoch."""
    state.epoch += 1
    record = _record(state)
    stop = state.should_stop is not None and state.should_stop()
    if state.epoch < state.total_epochs and not stop:
        before = state.model.topology_version
        imp = epoch_boundary(state.model, state.opt, state.evo, state.epoch, state.rng)
        if imp is not None:
            record.importance = imp.summary()
        if state.audit is not None:
            state.audit.add(
                {
                    "msg_type": "evolve",
                    "epoch": state.epoch,
                    "t_prime": state.t_prime,
                    "version_before": before,
                    "version_after": state.model.topology_version,
                    "nnz": state.model.nnz,
                }
            )
    _emit(state, record)
    if stop:
        state.stopped_early = True
        state.phase = DONE
    elif state.epoch >= state.phase_one_epochs:
        state.phase = PHASE_TWO if state.epoch < state.total_epochs else DONE


def _record(state: ServerState) -> EpochRecord:
    rec = make_record(state.model, state.data, state.epoch, state.stats, state.started, state.source)
    state.stats = EpochStats()
    return rec


def _emit(state: ServerState, record: EpochRecord) -> None:
    state.records.append(record)
    if state.on_record is not None:
        state.on_record(record)


def server_step(state: ServerState, msg: GradPush) -> ModelReply:
    """Filter, apply, maybe evolve, and reply with the new snapshot."""
    if state.phase != PHASE_ONE:
        raise ProtocolError(f"push from worker {msg.worker_id} in phase {state.phase}")
    grad = msg.grad
    model = state.model
    retained, dropped = retain_valid_updates(grad, model)
    entry = None
    if state.audit is not None:
        entry = {
            "msg_type": "push",
            "worker_id": msg.worker_id,
            "t": grad.timestamp,
            "t_prime": state.t_prime,
            "nnz": model.nnz,
            "dropped_entry_count": int(dropped),
        }
    if retained is None:
        state.discarded_pushes += 1
        state.dropped_entries += dropped
        if entry is not None:
            entry["applied"] = False
            state.audit.add(entry)
        return ModelReply(msg.worker_id, model.snapshot(), state.t_prime)
    if entry is not None and state.audit.check_safety:
        entry["safe"] = _applied_subset(grad, retained, model)
    version = model.topology_version
    state.staleness.append(state.t_prime - grad.timestamp)
    state.dropped_entries += dropped
    state.stats.add(retained, gradient_flow(retained))
    sgd_momentum_step(model, state.opt, retained, lr=state.lr())
    state.t_prime += 1
    if entry is not None:
        entry.update(applied=True, version_before=version, version_after=model.topology_version)
        state.audit.add(entry)
    if state.t_prime % state.updates_per_epoch == 0:
        _boundary(state)
    return ModelReply(msg.worker_id, model.snapshot(), state.t_prime, stop=state.phase != PHASE_ONE)


class Worker:
    """Holds a shard, a private RNG set and the latest model snapshot."""

    def __init__(self, worker_id, indices, x, y, batch_size, weight_decay, rngs: RngStreams):
        self.id = worker_id
        self.indices = indices
        self.x = x
        self.y = y
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.rngs = rngs
        self._batches = iter(())
        self.model = None

    def next_batch(self):
        for idx in self._batches:
            return idx
        self._batches = iter(batch_order(self.indices, self.batch_size, self.rngs.shuffle))
        return next(self._batches)

    def compute(self, model: SparseNetwork) -> GradPush:
        self.model = model
        idx = self.next_batch()
        grad = compute_gradient(model, self.x[idx], self.y[idx], self.weight_decay, self.rngs.dropout)
        return GradPush(self.id, grad)


class ScriptedScheduler:
    """Deterministic interleaving: every worker keeps one pending push and the
    script names which worker's push the server receives next.

    ``script`` is a sequence of worker ids (cycled when exhausted) or ``None``
    for round robin; ``seed`` draws a random interleaving instead.
    """

    def __init__(self, script=None, seed=None):
        self.script = list(script) if script is not None else None
        self.seed = seed

    def run(self, state: ServerState, workers: list) -> None:
        k = len(workers)
        rng = np.random.default_rng(self.seed) if self.seed is not None else None
        start = state.model.snapshot()
        pending = [w.compute(start) for w in workers]
        step = 0
        while state.phase == PHASE_ONE:
            if rng is not None:
                wid = int(rng.integers(k))
            elif self.script:
                wid = self.script[step % len(self.script)]
            else:
                wid = step % k
            if not 0 <= wid < k:
                raise ProtocolError(f"script names worker {wid}, only {k} exist")
            step += 1
            reply = server_step(state, pending[wid])
            if not reply.stop:
                pending[wid] = workers[wid].compute(reply.model)


class ThreadedScheduler:
    """Workers in threads, a shared push queue and one reply queue each.

    The server loop raises :class:`DeadlockError` when no message arrives
    within ``watchdog`` seconds.
    """

    def __init__(self, watchdog: float = 30.0):
        self.watchdog = watchdog

    def run(self, state: ServerState, workers: list) -> None:
        pushes: queue.Queue = queue.Queue()
        replies = [queue.Queue() for _ in workers]
        halt = threading.Event()

        def loop(worker: Worker):
            try:
                with serial_kernels():
                    reply = replies[worker.id].get(timeout=self.watchdog)
                    while not reply.stop and not halt.is_set():
                        pushes.put(worker.compute(reply.model))
                        reply = replies[worker.id].get(timeout=self.watchdog)
            except queue.Empty:
                pushes.put(WorkerFailure(worker.id, DeadlockError(f"worker {worker.id} got no reply")))
            except BaseException as exc:  # forwarded to the server thread
                pushes.put(WorkerFailure(worker.id, exc))

        threads = [threading.Thread(target=loop, args=(w,), daemon=True, name=f"wasap-worker-{w.id}") for w in workers]
        for t in threads:
            t.start()
        start = state.model.snapshot()
        for r in replies:
            r.put(ModelReply(-1, start, state.t_prime))
        active = len(workers)
        try:
            while active:
                try:
                    msg = pushes.get(timeout=self.watchdog)
                except queue.Empty:
                    raise DeadlockError(f"no push for {self.watchdog}s at t'={state.t_prime}") from None
                if isinstance(msg, WorkerFailure):
                    raise msg.exc
                if state.phase != PHASE_ONE:
                    replies[msg.worker_id].put(ModelReply(msg.worker_id, None, state.t_prime, stop=True))
                    active -= 1
                    continue
                reply = server_step(state, msg)
                replies[msg.worker_id].put(reply)
                if reply.stop:
                    active -= 1
        finally:
            halt.set()
            for r in replies:
                r.put(ModelReply(-1, None, state.t_prime, stop=True))
            for t in threads:
                t.join(timeout=self.watchdog)


def _make_scheduler(scheduler, watchdog):
    if scheduler is None or scheduler == "threaded":
        return ThreadedScheduler(watchdog)
    if scheduler == "scripted":
        return ScriptedScheduler()
    return scheduler


def _check_args(k, tau1, tau2, data):
    if k < 1:
        raise ValueError("K must be >= 1")
    if not 1 <= tau1 <= tau2:
        raise ValueError(f"need 1 <= tau1 <= tau2, got tau1={tau1}, tau2={tau2}")
    if data.x_train.shape[0] == 0:
        raise DataError("empty training set")
    if k > data.x_train.shape[0]:
        raise ValueError(f"K={k} exceeds the {data.x_train.shape[0]} training samples")
    cores = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count()
    if k > (cores or 1):
        log.info("K=%d workers on %d available cores", k, cores)


def _make_workers(network, opt, data, k, batch_size, seed):
    x = np.ascontiguousarray(data.x_train, dtype=network.dtype)
    y = data.y_train
    return [
        Worker(i, idx, x, y, batch_size, opt.weight_decay, RngStreams.for_worker(seed, i))
        for i, idx in enumerate(shard(x.shape[0], k))
    ]


def _phase_two(state: ServerState, workers, k, threaded: bool):
    """Local SET training of K replicas, then sparse averaging."""
    target = state.model.nnz
    start_epoch = state.epoch
    replicas = [(state.model.copy(), state.opt.clone()) for _ in range(k)]
    records = []

    def train_replica(i):
        net, opt = replicas[i]
        w = workers[i]
        # K=1 keeps the server's evolution stream so it matches sequential training
        rng = state.rng if k == 1 else RngStreams.for_worker(state.seed, i, local_evolve=True).evolve
        started = time.perf_counter()
        with serial_kernels():
            for epoch in range(start_epoch + 1, state.total_epochs + 1):
                stats = EpochStats()
                for idx in batch_order(w.indices, w.batch_size, w.rngs.shuffle):
                    grad = compute_gradient(net, w.x[idx], w.y[idx], opt.weight_decay, w.rngs.dropout)
                    stats.add(grad, gradient_flow(grad))
                    sgd_momentum_step(net, opt, grad)
                rec = None
                if i == 0:
                    rec = make_record(net, state.data, epoch, stats, started, "replica0")
                if epoch < state.total_epochs:
                    imp = epoch_boundary(net, opt, state.evo, epoch, rng)
                    if rec is not None and imp is not None:
                        rec.importance = imp.summary()
                if rec is not None:
                    records.append(rec)
                    if state.on_record is not None:
                        state.on_record(rec)

    if threaded and k > 1:
        with ThreadPoolExecutor(max_workers=k, thread_name_prefix="wasap-replica") as pool:
            list(pool.map(train_replica, range(k)))
    else:
        for i in range(k):
            train_replica(i)
    state.records.extend(records)
    models = [net for net, _ in replicas]
    return average_models(models, target), models, target


def run_wasap(
    network: SparseNetwork,
    opt: OptimizerState,
    evo: EvolutionConfig,
    data,
    k: int,
    tau1: int,
    tau2: int,
    batch_size: int,
    seed: int = 0,
    scheduler="threaded",
    audit: AuditLog | None = None,
    on_record: Callable | None = None,
    should_stop: Callable | None = None,
    watchdog: float = 30.0,
    lr_boost: float = 2.0,
    boost_epochs: int = 5,
):
    """Asynchronous phase until epoch ``tau1``, local phase until ``tau2``.

    ``network`` and ``opt`` become the server state and are mutated. Returns
    ``(averaged network, TrainReport)``. With K > 1 the first
    ``boost_epochs`` server epochs use ``lr_boost * eta``.
    """
    _check_args(k, tau1, tau2, data)
    n = data.x_train.shape[0]

    def schedule(st):
        if k > 1 and st.epoch < boost_epochs:
            return st.opt.eta * lr_boost
        return st.opt.eta

    state = ServerState(
        model=network,
        opt=opt,
        evo=evo,
        updates_per_epoch=math.ceil(n / batch_size),
        total_epochs=tau2,
        phase_one_epochs=tau1,
        rng=RngStreams.for_worker(seed).evolve,
        data=data,
        lr_schedule=schedule,
        audit=audit,
        on_record=on_record,
        should_stop=should_stop,
        seed=seed,
    )
    workers = _make_workers(network, opt, data, k, batch_size, seed)
    sched = _make_scheduler(scheduler, watchdog)
    t0 = time.perf_counter()
    sched.run(state, workers)
    phase1_seconds = time.perf_counter() - t0
    return _finish(state, workers, k, isinstance(sched, ThreadedScheduler), phase1_seconds, "wasap")


def _finish(state, workers, k, threaded, phase1_seconds, name):
    report = TrainReport(records=state.records)
    phase1_nnz = state.model.nnz
    t0 = time.perf_counter()
    if state.phase == PHASE_TWO:
        final, replicas, target = _phase_two(state, workers, k, threaded)
    else:
        final, replicas, target = average_models([state.model], phase1_nnz), [state.model], phase1_nnz
    state.phase = DONE
    phase2_seconds = time.perf_counter() - t0
    test_loss, test_acc = evaluate(final, state.data.x_test, state.data.y_test)
    last = report.records[-1]
    averaged = EpochRecord(
        epoch=last.epoch,
        train_loss=last.train_loss,
        train_acc=last.train_acc,
        test_loss=test_loss,
        test_acc=test_acc,
        nnz=final.nnz,
        gradient_flow=last.gradient_flow,
        seconds=time.perf_counter() - state.started,
        source="averaged",
    )
    report.records.append(averaged)
    if state.on_record is not None:
        state.on_record(averaged)
    report.final_test_loss, report.final_test_acc = test_loss, test_acc
    report.extras.update(
        trainer=name,
        workers=k,
        phase1_nnz=phase1_nnz,
        target_nnz=list(target),
        replica_nnz=[m.nnz for m in replicas],
        phase1_epochs=min(state.epoch, state.phase_one_epochs),
        updates=state.t_prime,
        dropped_entries=int(state.dropped_entries),
        discarded_pushes=int(state.discarded_pushes),
        mean_staleness=float(np.mean(state.staleness)) if state.staleness else 0.0,
        max_staleness=int(max(state.staleness)) if state.staleness else 0,
        phase1_seconds=phase1_seconds,
        phase2_seconds=phase2_seconds,
        stopped_early=state.stopped_early,
    )
    return final, report


def run_wassp(
    network: SparseNetwork,
    opt: OptimizerState,
    evo: EvolutionConfig,
    data,
    k: int,
    tau1: int,
    tau2: int,
    batch_size: int,
    seed: int = 0,
    warmup_epochs: int = 5,
    threaded: bool = True,
    audit: AuditLog | None = None,
    on_record: Callable | None = None,
    should_stop: Callable | None = None,
):
    """Synchronous phase one: each step averages K worker gradients computed
    on the same snapshot. The learning rate ramps linearly from ``eta`` to
    ``K * eta`` over ``warmup_epochs``. Phase two matches :func:`run_wasap`."""
    _check_args(k, tau1, tau2, data)
    if warmup_epochs < 0:
        raise ValueError("warmup_epochs must be >= 0")
    n = data.x_train.shape[0]
    upe = math.ceil(n / (k * batch_size))

    def schedule(st):
        ramp = 1.0 if warmup_epochs == 0 else min(1.0, st.t_prime / (warmup_epochs * upe))
        return st.opt.eta * (1.0 + (k - 1) * ramp)

    state = ServerState(
        model=network,
        opt=opt,
        evo=evo,
        updates_per_epoch=upe,
        total_epochs=tau2,
        phase_one_epochs=tau1,
        rng=RngStreams.for_worker(seed).evolve,
        data=data,
        lr_schedule=schedule,
        audit=audit,
        on_record=on_record,
        should_stop=should_stop,
        source="server",
        seed=seed,
    )
    workers = _make_workers(network, opt, data, k, batch_size, seed)
    t0 = time.perf_counter()
    pool = ThreadPoolExecutor(max_workers=k, thread_name_prefix="wassp") if threaded and k > 1 else None

    def compute(w, snap):
        with serial_kernels():
            return w.compute(snap)

    try:
        while state.phase == PHASE_ONE:
            snap = state.model.snapshot()
            if pool is not None:
                pushes = list(pool.map(lambda w: compute(w, snap), workers))
            else:
                pushes = [w.compute(snap) for w in workers]
            server_step(state, GradPush(-1, average_gradients([p.grad for p in pushes])))
    finally:
        if pool is not None:
            pool.shutdown()
    return _finish(state, workers, k, threaded, time.perf_counter() - t0, "wassp")


def average_gradients(grads) -> GradientUpdate:
    """Mean of same-topology gradients (sum, then divide by K)."""
    grads = list(grads)
    if not grads:
        raise ProtocolError("no gradients to average")
    ref = grads[0]
    for g in grads[1:]:
        if g.topology_version != ref.topology_version:
            raise ProtocolError("cannot average gradients from different topologies")
    k = len(grads)
    if k == 1:
        return ref

    def mean(arrays):
        total = arrays[0].astype(np.float64)
        for a in arrays[1:]:
            total = total + a
        return (total / k).astype(arrays[0].dtype)

    return GradientUpdate(
        [mean([g.layer_grads[i] for g in grads]) for i in range(len(ref.layer_grads))],
        [mean([g.bias_grads[i] for g in grads]) for i in range(len(ref.bias_grads))],
        timestamp=min(g.timestamp for g in grads),
        sample_count=sum(g.sample_count for g in grads),
        topology_version=ref.topology_version,
        supports=ref.supports,
        loss_sum=sum(g.loss_sum for g in grads),
        correct=sum(g.correct for g in grads),
    )

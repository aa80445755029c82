"""Sparse topology: Erdos-Renyi init, SET prune/regrow, neuron importance
pruning and sparse model averaging."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ProtocolError
from .nn import SparseNetwork, init_values
from .sparse import INDEX_DTYPE, SparseWeights, insert_entries, magnitude_prune_to_count, removal_order

log = logging.getLogger(__name__)

_DENSE_DRAW_LIMIT = 50_000_000


@dataclass
class EvolutionConfig:
    zeta: float = 0.3
    importance_enabled: bool = False
    importance_start_epoch: int = 200
    importance_period: int = 5
    importance_percentile: float = 5.0
    prune_outgoing: bool = True
    exclude_isolated: bool = True
    target_sparsity: float | None = None

    def __post_init__(self):
        if not 0 < self.zeta < 1:
            raise ValueError("zeta must be in (0, 1)")
        if self.importance_start_epoch < 0:
            raise ValueError("importance_start_epoch must be >= 0")
        if self.importance_period < 1:
            raise ValueError("importance_period must be >= 1")
        if not 0 <= self.importance_percentile < 100:
            raise ValueError("importance_percentile must be in [0, 100)")

    def importance_due(self, epoch: int) -> bool:
        return (
            self.importance_enabled
            and epoch >= self.importance_start_epoch
            and epoch % self.importance_period == 0
        )


@dataclass
class ImportanceReport:
    importances: list = field(default_factory=list)  # per hidden layer
    pruned: list = field(default_factory=list)  # neuron indices per hidden layer
    removed_connections: list = field(default_factory=list)  # per weight matrix
    thresholds: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    @property
    def total_removed(self) -> int:
        return int(sum(self.removed_connections))

    def summary(self) -> dict:
        return {
            "pruned_neurons": [len(p) for p in self.pruned],
            "thresholds": [float(t) for t in self.thresholds],
            "removed_connections": [int(r) for r in self.removed_connections],
            "skipped_layers": list(self.skipped),
        }


def er_probability(n_in: int, n_out: int, epsilon: float) -> float:
    return min(1.0, epsilon * (n_in + n_out) / (n_in * n_out))


def er_init(n_in, n_out, epsilon, init_scheme, rng, dtype=np.float32) -> SparseWeights:
    """Erdos-Renyi layer: each position present independently with probability
    ``min(1, epsilon * (n_in + n_out) / (n_in * n_out))``."""
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    p = er_probability(n_in, n_out, epsilon)
    total = n_in * n_out
    if p >= 1.0:
        keys = np.arange(total, dtype=INDEX_DTYPE)
    elif total <= _DENSE_DRAW_LIMIT:
        keys = np.flatnonzero(rng.random(total) < p).astype(INDEX_DTYPE)
    else:
        # same law, conditioned on the binomial count: uniform subset of that size
        keys = _sample_keys(rng, total, int(rng.binomial(total, p)), np.zeros(0, INDEX_DTYPE))
        keys.sort()
    vals = init_values(init_scheme, keys.size, n_in, n_out, rng, dtype=dtype)
    return SparseWeights.from_keys(n_in, n_out, keys, vals)


def _sample_keys(rng, total: int, count: int, exclude: np.ndarray) -> np.ndarray:
    """``count`` distinct positions in ``[0, total)`` avoiding sorted ``exclude``."""
    free = total - exclude.size
    if count > free:
        raise ValueError(f"cannot place {count} entries in {free} free positions")
    if count == 0:
        return np.zeros(0, dtype=INDEX_DTYPE)
    if free <= 4 * count or total <= 1 << 16:
        pool = np.setdiff1d(np.arange(total, dtype=INDEX_DTYPE), exclude, assume_unique=True)
        return rng.choice(pool, size=count, replace=False)
    picked = np.zeros(0, dtype=INDEX_DTYPE)
    while picked.size < count:
        need = count - picked.size
        cand = rng.integers(0, total, size=int(need * 1.1) + 16, dtype=INDEX_DTYPE)
        if exclude.size:
            pos = np.minimum(np.searchsorted(exclude, cand), exclude.size - 1)
            cand = cand[exclude[pos] != cand]
        cand = cand[~np.isin(cand, picked)]
        _, first = np.unique(cand, return_index=True)
        cand = cand[np.sort(first)]
        picked = np.concatenate([picked, cand[:need]])
    return picked


def set_evolve(w: SparseWeights, zeta: float, init_scheme: str, rng) -> SparseWeights:
    """One SET prune/regrow cycle.

    Removes ``floor(zeta * #positive)`` smallest positive weights and
    ``floor(zeta * #negative)`` negative weights closest to zero (plus any
    explicit zeros), then regrows the same number of connections at random
    positions that were empty before the call.
    """
    if not 0 < zeta < 1:
        raise ValueError("zeta must be in (0, 1)")
    v = w.values
    order = removal_order(w)
    sv = v[order]
    pos_rank = order[sv > 0]
    neg_rank = order[sv < 0]
    zeros = order[sv == 0]
    chosen = np.concatenate(
        [zeros, pos_rank[: int(np.floor(zeta * pos_rank.size))], neg_rank[: int(np.floor(zeta * neg_rank.size))]]
    )
    free = w.rows * w.cols - w.nnz
    if chosen.size > free:
        log.debug(
            "layer %dx%d has %d free positions for %d regrowths; pruning only the weakest %d",
            w.rows, w.cols, free, chosen.size, free,
        )
        keep_rank = np.zeros(w.nnz, dtype=bool)
        keep_rank[chosen] = True
        chosen = order[keep_rank[order]][:free]
    if chosen.size == 0:
        log.debug("set_evolve: nothing to remove on %dx%d layer", w.rows, w.cols)
        return w
    keep = np.ones(w.nnz, dtype=bool)
    keep[chosen] = False
    new_keys = _sample_keys(rng, w.rows * w.cols, chosen.size, w.keys)
    new_vals = init_values(init_scheme, new_keys.size, w.rows, w.cols, rng, dtype=w.dtype)
    # explicit zeros are already in ``chosen``; keep mask covers the rest
    return insert_entries(w, keep, new_keys, new_vals)


def neuron_importance(w: SparseWeights) -> np.ndarray:
    """Sum of absolute incoming weights per output neuron."""
    return np.bincount(w.col_idx, weights=np.abs(w.values).astype(np.float64), minlength=w.cols)


def percentile_threshold(values, percentile: float) -> float:
    return float(np.percentile(np.asarray(values, dtype=np.float64), percentile, method="linear"))


def _drop_columns(w: SparseWeights, cols: np.ndarray) -> SparseWeights:
    keep = ~np.isin(w.col_idx, cols)
    return SparseWeights.from_keys(w.rows, w.cols, w.keys[keep], w.values[keep])


def _drop_rows(w: SparseWeights, rows: np.ndarray) -> SparseWeights:
    keep = ~np.isin(w.row_of, rows)
    return SparseWeights.from_keys(w.rows, w.cols, w.keys[keep], w.values[keep])


def importance_prune(
    network: SparseNetwork, percentile: float, prune_outgoing: bool = True, exclude_isolated: bool = True
) -> ImportanceReport:
    """Remove connections of hidden neurons whose importance is below the
    layer's ``percentile``-th importance percentile. Mutates ``network``.

    With ``exclude_isolated`` the percentile is taken over neurons that still
    have incoming connections, so already-disconnected neurons do not pin
    the threshold at zero.
    """
    layers = list(network.layers)
    report = ImportanceReport(removed_connections=[0] * len(layers))
    for m in range(len(layers) - 1):  # matrix m feeds hidden layer m + 2
        imp = neuron_importance(layers[m])
        pool = imp
        if exclude_isolated:
            pool = imp[np.bincount(layers[m].col_idx, minlength=imp.size) > 0]
        thr = percentile_threshold(pool, percentile) if pool.size else 0.0
        low = np.flatnonzero(imp < thr)
        report.importances.append(imp)
        report.thresholds.append(thr)
        if low.size == imp.size:
            log.warning("importance pruning would remove every neuron of hidden layer %d; skipped", m + 2)
            report.skipped.append(m + 2)
            report.pruned.append(np.zeros(0, dtype=np.int64))
            continue
        report.pruned.append(low)
        if low.size == 0:
            continue
        before = layers[m].nnz
        layers[m] = _drop_columns(layers[m], low)
        report.removed_connections[m] += before - layers[m].nnz
        if prune_outgoing:
            before = layers[m + 1].nnz
            layers[m + 1] = _drop_rows(layers[m + 1], low)
            report.removed_connections[m + 1] += before - layers[m + 1].nnz
    if report.total_removed:
        network.set_layers(layers)
    return report


def target_counts(network: SparseNetwork, sparsity: float) -> list:
    return [int(round((1.0 - sparsity) * w.rows * w.cols)) for w in network.layers]


def average_models(models, target) -> SparseNetwork:
    """Average K sparse networks over the union of their supports, then
    magnitude-prune each layer back to ``target``.

    ``target`` is a per-layer list of entry counts or a sparsity level.
    """
    models = list(models)
    if not models:
        raise ProtocolError("need at least one model to average")
    sizes = models[0].config.layer_sizes
    for i, m in enumerate(models[1:], start=1):
        if m.config.layer_sizes != sizes:
            raise ProtocolError(f"model {i} has layer sizes {m.config.layer_sizes}, expected {sizes}")
    k = len(models)
    if isinstance(target, (int, float)) and not isinstance(target, bool):
        target = target_counts(models[0], float(target))
    layers, biases = [], []
    for li in range(len(models[0].layers)):
        mats = [m.layers[li] for m in models]
        rows, cols = mats[0].shape
        all_keys = np.concatenate([w.keys for w in mats])
        all_vals = np.concatenate([w.values.astype(np.float64) for w in mats])
        keys, inv = np.unique(all_keys, return_inverse=True)
        sums = np.bincount(inv, weights=all_vals, minlength=keys.size)
        avg = (sums / k).astype(mats[0].dtype)
        nz = avg != 0
        union = SparseWeights.from_keys(rows, cols, keys[nz], avg[nz])
        count = min(int(target[li]), union.nnz)
        layers.append(magnitude_prune_to_count(union, count))
        biases.append((np.sum([m.biases[li].astype(np.float64) for m in models], axis=0) / k).astype(mats[0].dtype))
    base = models[0]
    return SparseNetwork(
        layers,
        biases,
        base.config,
        topology_version=max(m.topology_version for m in models) + 1,
        timestamp=max(m.timestamp for m in models),
    )

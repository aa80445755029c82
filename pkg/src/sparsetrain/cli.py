"""Command-line interface: ``gen-data``, ``train``, ``eval`` and ``inspect``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import signal
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint
from ._kernels import BACKEND, get_threads
from .config import TRAINERS, RunConfig
from .data import Dataset, TrainTest, load_csv, read_sds, split, standardize, synth_classification, write_sds
from .errors import SparseTrainError
from .nn import SparseNetwork, evaluate
from .topology import importance_prune, neuron_importance
from .train import OptimizerState, init_rng, train_sequential
from .wasap import AuditLog, ScriptedScheduler, run_wasap, run_wassp

log = logging.getLogger("sparsetrain")

METRIC_FIELDS = (
    "epoch",
    "source",
    "train_loss",
    "train_acc",
    "test_loss",
    "test_acc",
    "nnz",
    "n_params",
    "gradient_flow",
    "seconds",
    "importance",
)


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# data


def _read_any(path, cfg: RunConfig, label_map=None) -> Dataset:
    path = Path(path)
    if path.suffix.lower() == ".sds":
        return read_sds(path)
    return load_csv(path, cfg.data.label_column, cfg.data.has_header, label_map=label_map)


def raw_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Unstandardized train/test partitions described by ``cfg.data``."""
    d = cfg.data
    rng = np.random.default_rng(d.data_seed)
    if d.source == "synth":
        full = synth_classification(
            n_samples=d.samples,
            n_features=d.features,
            n_informative=d.informative,
            n_redundant=d.redundant,
            n_classes=d.classes,
            class_sep=d.class_sep,
            flip_fraction=d.flip,
            rng=rng,
            n_clusters_per_class=d.clusters_per_class,
        )
    else:
        full = _read_any(d.train, cfg)
        if d.test:
            return full, _read_any(d.test, cfg, label_map=_label_map(full))
    fraction = d.test_samples / len(full) if d.source == "synth" and d.test_samples > 0 else d.test_fraction
    return split(full, fraction, rng)


def load_data(cfg: RunConfig, test_path=None) -> TrainTest:
    """Deterministic dataset construction shared by ``train``, ``eval`` and
    ``inspect``; features are standardized with training statistics."""
    train, test = raw_data(cfg)
    if test_path is not None:
        test = _read_any(test_path, cfg, label_map=_label_map(train))
    if test.n_features != train.n_features:
        raise SparseTrainError(f"test has {test.n_features} features, train has {train.n_features}")
    n_classes = max(train.n_classes, test.n_classes)
    train = Dataset(train.features, train.labels, n_classes, train.label_names)
    test = Dataset(test.features, test.labels, n_classes, test.label_names)
    train, test, _ = standardize(train, test)
    dtype = np.dtype(cfg.network.dtype)
    train.features = train.features.astype(dtype)
    test.features = test.features.astype(dtype)
    return TrainTest(train, test)


def _label_map(ds: Dataset):
    if ds.label_names is None:
        return None
    return {name: i for i, name in enumerate(ds.label_names)}


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    if args.informative + args.redundant > args.features:
        raise UsageError(
            f"--informative ({args.informative}) + --redundant ({args.redundant}) exceeds --features ({args.features})"
        )
    rng = np.random.default_rng(args.seed)
    ds = synth_classification(
        n_samples=args.samples,
        n_features=args.features,
        n_informative=args.informative,
        n_redundant=args.redundant,
        n_classes=args.classes,
        class_sep=args.class_sep,
        flip_fraction=args.flip,
        rng=rng,
        n_clusters_per_class=args.clusters_per_class,
    )
    fraction = args.test_samples / args.samples if args.test_samples else args.test_fraction
    train, test = split(ds, fraction, rng)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise SparseTrainError(f"cannot create {out}: {exc}") from exc
    write_sds(out / "train.sds", train)
    write_sds(out / "test.sds", test)
    info = {
        "generator": "synth_classification",
        "samples": args.samples,
        "train_samples": len(train),
        "test_samples": len(test),
        "features": args.features,
        "informative": args.informative,
        "redundant": args.redundant,
        "classes": args.classes,
        "class_sep": args.class_sep,
        "flip": args.flip,
        "clusters_per_class": args.clusters_per_class,
        "seed": args.seed,
        "files": {
            name: hashlib.sha256((out / name).read_bytes()).hexdigest() for name in ("train.sds", "test.sds")
        },
    }
    (out / "dataset.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    print(json.dumps({"out": str(out), "train": len(train), "test": len(test)}))
    return 0


def _metric_line(record, trainer: str) -> str:
    d = record.to_dict()
    d["n_params"] = int(sum(d["nnz"]))
    row = {k: d.get(k) for k in METRIC_FIELDS}
    row["trainer"] = trainer
    return json.dumps(row)


def build_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for key, value in args.overrides:
        cfg.set(key, value)
    named = {
        "trainer": args.trainer,
        "workers": args.workers,
        "seed": args.seed,
        "out": args.out,
        "epochs": args.epochs,
        "tau1": args.tau1,
        "tau2": args.tau2,
    }
    for key, value in named.items():
        if value is not None:
            cfg.set(key, value)
    if args.trainer == "sequential" and args.workers is None:
        cfg.trainer.workers = 1
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    cfg = build_config(args)
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    data = load_data(cfg)
    net_cfg = cfg.network_config(data.train.n_features, data.n_classes)
    network = SparseNetwork.create(net_cfg, rng=init_rng(cfg.run.seed))
    o = cfg.optimizer
    opt = OptimizerState.for_network(network, o.eta, o.momentum, o.weight_decay)
    evo = cfg.evolution_config()
    (out / "config.ini").write_text(cfg.to_ini())

    stop = {"flag": False}

    def request_stop(signum, _frame):
        log.warning("signal %d: stopping at the next epoch boundary", signum)
        stop["flag"] = True

    previous = {s: signal.signal(s, request_stop) for s in (signal.SIGINT, signal.SIGTERM)}
    trainer = cfg.trainer.trainer
    metrics = open(out / "metrics.jsonl", "w", buffering=1)
    audit = AuditLog(out / "audit.jsonl") if cfg.run.audit else None

    def on_record(rec):
        metrics.write(_metric_line(rec, trainer) + "\n")
        metrics.flush()

    started = time.perf_counter()
    try:
        t = cfg.trainer
        if trainer == "sequential":
            report = train_sequential(
                network, opt, evo, data, cfg.run.epochs, o.batch_size, rng=cfg.run.seed,
                on_record=on_record, should_stop=lambda: stop["flag"],
            )
            final = network
        else:
            tau1, tau2 = cfg.phase_epochs()
            common = dict(
                seed=cfg.run.seed, audit=audit, on_record=on_record, should_stop=lambda: stop["flag"]
            )
            if trainer == "wasap":
                sched = ScriptedScheduler() if t.scheduler == "scripted" else "threaded"
                final, report = run_wasap(
                    network, opt, evo, data, t.workers, tau1, tau2, o.batch_size, scheduler=sched,
                    watchdog=t.watchdog, lr_boost=t.lr_boost, boost_epochs=t.boost_epochs, **common,
                )
            else:
                final, report = run_wassp(
                    network, opt, evo, data, t.workers, tau1, tau2, o.batch_size,
                    warmup_epochs=t.warmup_epochs, threaded=t.scheduler == "threaded", **common,
                )
    finally:
        metrics.close()
        if audit is not None:
            audit.close()
        for s, h in previous.items():
            signal.signal(s, h)
    checkpoint.save(out / "model.snet", final, cfg)
    summary = {
        "trainer": trainer,
        "epochs_completed": max(r.epoch for r in report.records),
        "final_test_acc": report.final_test_acc,
        "final_test_loss": report.final_test_loss,
        "best_test_acc": report.best_test_acc,
        "nnz": final.nnz,
        "n_params": final.n_params,
        "seconds": time.perf_counter() - started,
        "backend": BACKEND,
        "threads": get_threads(),
        "stopped_early": stop["flag"],
        "extras": report.extras,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=float) + "\n")
    print(json.dumps({k: summary[k] for k in ("trainer", "final_test_acc", "best_test_acc", "n_params")}))
    return 0


def _eval_data(args, cfg: RunConfig):
    data = load_data(cfg, test_path=args.data)
    return data.x_test, data.y_test


def cmd_eval(args) -> int:
    network, cfg = checkpoint.load(args.checkpoint)
    x, y = _eval_data(args, cfg)
    loss, acc = evaluate(network, x, y)
    print(json.dumps({"checkpoint": str(args.checkpoint), "samples": int(len(y)), "test_loss": loss, "test_acc": acc}))
    return 0


def _histogram(values, bins=10):
    counts, edges = np.histogram(values, bins=bins)
    return {"counts": counts.tolist(), "edges": [float(e) for e in edges]}


def cmd_inspect(args) -> int:
    network, cfg = checkpoint.load(args.checkpoint)
    layers = []
    for i, w in enumerate(network.layers):
        entry = {"layer": i, "shape": list(w.shape), "nnz": w.nnz, "sparsity": w.sparsity}
        if i < len(network.layers) - 1:
            entry["importance_histogram"] = _histogram(neuron_importance(w), args.bins)
        layers.append(entry)
    report = {"checkpoint": str(args.checkpoint), "n_params": network.n_params, "layers": layers}
    if args.prune_percentile is not None:
        if not 0 <= args.prune_percentile < 100:
            raise UsageError("--prune-percentile must be in [0, 100)")
        before = network.n_params
        pruned = network.copy()
        imp = importance_prune(pruned, args.prune_percentile, cfg.evolution.prune_outgoing, cfg.evolution.exclude_isolated)
        target = Path(args.prune_out) if args.prune_out else Path(args.checkpoint).with_suffix(f".p{args.prune_percentile:g}.snet")
        checkpoint.save(target, pruned, cfg)
        prune = {
            "percentile": args.prune_percentile,
            "params_before": before,
            "params_after": pruned.n_params,
            "nnz_after": pruned.nnz,
            "summary": imp.summary(),
            "out": str(target),
        }
        if not args.no_eval:
            x, y = _eval_data(args, cfg)
            prune["acc_before"] = evaluate(network, x, y)[1]
            prune["acc_after"] = evaluate(pruned, x, y)[1]
        report["prune"] = prune
    print(json.dumps(report, indent=None if args.compact else 2))
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _int_at_least(lo):
    def parse(text):
        v = int(text)
        if v < lo:
            raise argparse.ArgumentTypeError(f"must be >= {lo}")
        return v

    return parse


def _parse_overrides(extra):
    """``--key value`` / ``--key=value`` pairs naming any config key."""
    keys = RunConfig.keys()
    out, i = [], 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        name, sep, value = tok[2:].partition("=")
        key = name.replace("-", "_")
        if key not in keys:
            raise UsageError(f"unknown option {tok!r}")
        if not sep:
            if i + 1 >= len(extra):
                raise UsageError(f"{tok} needs a value")
            value = extra[i + 1]
            i += 1
        out.append((key, value))
        i += 1
    return out


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sparsetrain", description=__doc__, allow_abbrev=False)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", allow_abbrev=False, help="generate a synthetic classification dataset")
    g.add_argument("--samples", type=_int_at_least(2), default=2600, help="total samples (train + test)")
    g.add_argument("--features", type=_int_at_least(1), default=500)
    g.add_argument("--informative", type=_int_at_least(1), default=5)
    g.add_argument("--redundant", type=_int_at_least(0), default=15)
    g.add_argument("--classes", type=_int_at_least(2), default=2)
    g.add_argument("--class-sep", type=float, default=2.0)
    g.add_argument("--flip", type=float, default=0.01)
    g.add_argument("--clusters-per-class", type=_int_at_least(1), default=16)
    g.add_argument("--test-fraction", type=float, default=0.3)
    g.add_argument("--test-samples", type=_int_at_least(0), default=0, help="overrides --test-fraction")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="data")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", allow_abbrev=False, help="train a sparse MLP; extra --key value pairs override config keys")
    t.add_argument("--config", help="INI run configuration")
    t.add_argument("--trainer", choices=TRAINERS)
    t.add_argument("--workers", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--epochs", type=_int_at_least(1))
    t.add_argument("--tau1", type=int)
    t.add_argument("--tau2", type=int)
    t.set_defaults(func=cmd_train, accepts_overrides=True)

    e = sub.add_parser("eval", allow_abbrev=False, help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--data", help="test file (.sds or .csv); default: the checkpoint's own test split")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", allow_abbrev=False, help="per-layer statistics and optional one-shot importance pruning")
    i.add_argument("checkpoint")
    i.add_argument("--prune-percentile", type=float)
    i.add_argument("--prune-out")
    i.add_argument("--data")
    i.add_argument("--bins", type=_int_at_least(1), default=10)
    i.add_argument("--no-eval", action="store_true")
    i.add_argument("--compact", action="store_true")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = make_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if extra and not getattr(args, "accepts_overrides", False):
            raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
        args.overrides = _parse_overrides(extra) if extra else []
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"sparsetrain: error: {exc}", file=sys.stderr)
        return 2
    except (SparseTrainError, ValueError, OSError) as exc:
        print(f"sparsetrain: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

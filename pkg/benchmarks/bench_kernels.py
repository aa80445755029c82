"""Compare the numba kernels with the numpy fallback.

Each backend runs in its own interpreter because the choice is made at import
time from ``SPARSETRAIN_NUMBA``.

    python benchmarks/bench_kernels.py [--repeat 20] [--batch 32]
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def _best(fn, repeat):
    fn()  # warm-up, includes jit compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def measure(repeat, batch):
    from sparsetrain import _kernels
    from sparsetrain.data import madelon
    from sparsetrain.nn import NetworkConfig, SparseNetwork
    from sparsetrain.topology import EvolutionConfig, er_init
    from sparsetrain.train import OptimizerState, train_sequential

    rng = np.random.default_rng(0)
    w = er_init(784, 1000, 20, "normal", rng)
    other = er_init(784, 1000, 20, "normal", rng)
    x = rng.standard_normal((batch, 784)).astype(np.float32)
    up = rng.standard_normal((batch, 1000)).astype(np.float32)
    bias = np.zeros(1000, dtype=np.float32)
    result = {
        "backend": _kernels.BACKEND,
        "nnz": w.nnz,
        "forward_ms": 1e3 * _best(lambda: _kernels.forward(x, w, bias), repeat),
        "backward_ms": 1e3 * _best(lambda: _kernels.backward(x, up, w), repeat),
        "align_ms": 1e3 * _best(lambda: _kernels.align(w, w.values, other), repeat),
    }
    data = madelon(seed=0)

    def epoch():
        net = SparseNetwork.create(NetworkConfig([500, 400, 100, 400, 2], epsilon=10, seed=0))
        train_sequential(net, OptimizerState.for_network(net), EvolutionConfig(), data, 1, 32)

    result["madelon_epoch_s"] = _best(epoch, max(1, repeat // 10))
    return result


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--batch", type=int, default=32)
    parser.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = parser.parse_args(argv)
    if args.child:
        print(json.dumps(measure(args.repeat, args.batch)))
        return 0
    rows = []
    for flag in ("1", "0"):
        env = dict(os.environ, SPARSETRAIN_NUMBA=flag)
        cmd = [sys.executable, __file__, "--child", "--repeat", str(args.repeat), "--batch", str(args.batch)]
        out = subprocess.run(cmd, env=env, capture_output=True, text=True, check=True)
        rows.append(json.loads(out.stdout.strip().splitlines()[-1]))
    keys = ["forward_ms", "backward_ms", "align_ms", "madelon_epoch_s"]
    print(f"784x1000 layer, eps=20, nnz={rows[0]['nnz']}, batch={args.batch}")
    print(f"{'':18}" + "".join(f"{r['backend']:>12}" for r in rows) + f"{'speedup':>12}")
    for k in keys:
        print(f"{k:18}" + "".join(f"{r[k]:12.3f}" for r in rows) + f"{rows[1][k] / rows[0][k]:12.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())

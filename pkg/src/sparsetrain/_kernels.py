"""Hot CSR kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports and ``SPARSETRAIN_NUMBA`` is not
set to ``0``. Both paths accumulate every output element in CSR entry
order with the bias added last, so their forward outputs agree bit for bit.

``SPARSETRAIN_THREADS`` (default 1) enables parallel variants of the
forward (over batch blocks) and backward (over input rows) kernels. Results do not depend on the thread count because
every output element is reduced by exactly one thread in a fixed order.
"""

from __future__ import annotations

import contextlib
import os
import threading

import numpy as np

_local = threading.local()


def _env_flag(name: str, default: str) -> str:
    return os.environ.get(name, default).strip().lower()


USE_NUMBA = _env_flag("SPARSETRAIN_NUMBA", "1") not in ("0", "false", "no", "off")

if USE_NUMBA:
    try:
        import numba
        from numba import njit, prange
    except ImportError:  # pragma: no cover - numba is a declared dependency
        USE_NUMBA = False

BACKEND = "numba" if USE_NUMBA else "numpy"

_threads = 1


def set_threads(n: int) -> int:
    """Cap kernel-internal parallelism; returns the effective thread count."""
    global _threads
    n = max(1, int(n))
    if USE_NUMBA:
        n = min(n, numba.config.NUMBA_NUM_THREADS)
        numba.set_num_threads(n)
    else:
        n = 1
    _threads = n
    return n


def get_threads() -> int:
    return _threads


@contextlib.contextmanager
def serial_kernels():
    """Force single-threaded kernels in the current thread.

    Worker threads use this so that numba's thread pool is never entered
    from several Python threads at once.
    """
    prev = getattr(_local, "serial", False)
    _local.serial = True
    try:
        yield
    finally:
        _local.serial = prev


def _parallel() -> bool:
    return _threads > 1 and not getattr(_local, "serial", False)


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def np_forward(x, row_ptr, col_idx, vals, bias, row_of):
    out = np.zeros((x.shape[0], bias.shape[0]), dtype=vals.dtype)
    if col_idx.size:
        contrib = x[:, row_of] * vals
        np.add.at(out.T, col_idx, contrib.T)
    out += bias
    return out


def np_backward(x, up, row_ptr, col_idx, vals, row_of, need_input):
    batch = x.shape[0]
    gvals = np.einsum("bk,bk->k", x[:, row_of], up[:, col_idx]) / batch
    gbias = up.sum(axis=0) / batch
    gin = None
    if need_input:
        gin = np.zeros(x.shape, dtype=vals.dtype)
        if col_idx.size:
            contrib = up[:, col_idx] * vals
            np.add.at(gin.T, row_of, contrib.T)
    return gvals.astype(vals.dtype, copy=False), gbias.astype(vals.dtype, copy=False), gin


def np_align(src_keys, src_vals, dst_keys):
    out = np.zeros(dst_keys.shape[0], dtype=src_vals.dtype)
    if src_keys.size == 0 or dst_keys.size == 0:
        return out, 0
    pos = np.searchsorted(src_keys, dst_keys)
    pos[pos == src_keys.size] = 0
    hit = src_keys[pos] == dst_keys
    out[hit] = src_vals[pos[hit]]
    return out, int(hit.sum())


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if USE_NUMBA:

    # Kernels work on transposed activations (feature-major, batch inner) so
    # the innermost loop is a contiguous axpy over the batch.

    @njit(nogil=True, cache=True)
    def _forward_block(xt, row_ptr, col_idx, vals, ot, b0, b1):
        for i in range(row_ptr.shape[0] - 1):
            for k in range(row_ptr[i], row_ptr[i + 1]):
                j = col_idx[k]
                v = vals[k]
                for b in range(b0, b1):
                    ot[j, b] += xt[i, b] * v

    @njit(nogil=True, cache=True)
    def _finish_forward(ot, bias):
        n_out, batch = ot.shape
        out = np.empty((batch, n_out), dtype=ot.dtype)
        for b in range(batch):
            for j in range(n_out):
                out[b, j] = ot[j, b] + bias[j]
        return out

    @njit(nogil=True, cache=True)
    def nb_forward(x, row_ptr, col_idx, vals, bias):
        batch = x.shape[0]
        xt = np.ascontiguousarray(x.T)
        ot = np.zeros((bias.shape[0], batch), dtype=vals.dtype)
        _forward_block(xt, row_ptr, col_idx, vals, ot, 0, batch)
        return _finish_forward(ot, bias)

    @njit(nogil=True, parallel=True, cache=True)
    def nb_forward_par(x, row_ptr, col_idx, vals, bias):
        batch = x.shape[0]
        xt = np.ascontiguousarray(x.T)
        ot = np.zeros((bias.shape[0], batch), dtype=vals.dtype)
        width = 8
        n_blocks = (batch + width - 1) // width
        for blk in prange(n_blocks):
            b0 = blk * width
            _forward_block(xt, row_ptr, col_idx, vals, ot, b0, min(batch, b0 + width))
        return _finish_forward(ot, bias)

    # Reassociation lets LLVM vectorize the reduction. The result is still a
    # fixed function of the inputs, so runs stay reproducible.
    @njit(nogil=True, cache=True, fastmath={"reassoc", "nsz"})
    def _dot(xt, ut, i, j):
        s = 0.0
        for b in range(xt.shape[1]):
            s += np.float64(xt[i, b]) * np.float64(ut[j, b])
        return s

    @njit(nogil=True, cache=True)
    def _grad_row(xt, ut, row_ptr, col_idx, vals, gvals, gint, i, need_input):
        batch = xt.shape[1]
        for k in range(row_ptr[i], row_ptr[i + 1]):
            j = col_idx[k]
            gvals[k] = _dot(xt, ut, i, j) / batch
            if need_input:
                v = vals[k]
                for b in range(batch):
                    gint[i, b] += ut[j, b] * v

    @njit(nogil=True, cache=True)
    def _bias_grad(up, gbias):
        batch, n_out = up.shape
        for b in range(batch):
            for j in range(n_out):
                gbias[j] += up[b, j]
        for j in range(n_out):
            gbias[j] /= batch

    @njit(nogil=True, cache=True)
    def _setup_backward(x, up, vals, need_input):
        batch, n_in = x.shape
        xt = np.ascontiguousarray(x.T)
        ut = np.ascontiguousarray(up.T)
        gvals = np.empty(vals.shape[0], dtype=vals.dtype)
        gint = np.zeros((n_in if need_input else 0, batch), dtype=vals.dtype)
        gbias = np.zeros(up.shape[1], dtype=vals.dtype)
        _bias_grad(up, gbias)
        return xt, ut, gvals, gint, gbias

    @njit(nogil=True, cache=True)
    def nb_backward(x, up, row_ptr, col_idx, vals, need_input):
        xt, ut, gvals, gint, gbias = _setup_backward(x, up, vals, need_input)
        for i in range(x.shape[1]):
            _grad_row(xt, ut, row_ptr, col_idx, vals, gvals, gint, i, need_input)
        return gvals, gbias, np.ascontiguousarray(gint.T)

    @njit(nogil=True, parallel=True, cache=True)
    def nb_backward_par(x, up, row_ptr, col_idx, vals, need_input):
        xt, ut, gvals, gint, gbias = _setup_backward(x, up, vals, need_input)
        for i in prange(x.shape[1]):
            _grad_row(xt, ut, row_ptr, col_idx, vals, gvals, gint, i, need_input)
        return gvals, gbias, np.ascontiguousarray(gint.T)

    @njit(nogil=True, cache=True)
    def nb_align(src_ptr, src_col, src_vals, dst_ptr, dst_col):
        out = np.zeros(dst_col.shape[0], dtype=src_vals.dtype)
        kept = 0
        for i in range(dst_ptr.shape[0] - 1):
            a = src_ptr[i]
            a_end = src_ptr[i + 1]
            b = dst_ptr[i]
            b_end = dst_ptr[i + 1]
            while a < a_end and b < b_end:
                ca = src_col[a]
                cb = dst_col[b]
                if ca == cb:
                    out[b] = src_vals[a]
                    kept += 1
                    a += 1
                    b += 1
                elif ca < cb:
                    a += 1
                else:
                    b += 1
        return out, kept


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def forward(x, w, bias):
    """Dense ``x`` times CSR ``w`` plus ``bias``."""
    if USE_NUMBA:
        fn = nb_forward_par if _parallel() else nb_forward
        return fn(x, w.row_ptr, w.col_idx, w.values, bias)
    return np_forward(x, w.row_ptr, w.col_idx, w.values, bias, w.row_of)


def backward(x, up, w, need_input=True):
    """Support-restricted gradients; returns ``(gvals, gbias, gin or None)``."""
    if USE_NUMBA:
        fn = nb_backward_par if _parallel() else nb_backward
        gvals, gbias, gin = fn(x, up, w.row_ptr, w.col_idx, w.values, need_input)
        return gvals, gbias, (gin if need_input else None)
    return np_backward(x, up, w.row_ptr, w.col_idx, w.values, w.row_of, need_input)


def align(src, src_vals, dst):
    """Carry ``src_vals`` (aligned to ``src``'s support) onto ``dst``'s support.

    Positions of ``dst`` absent from ``src`` get zero. Returns the aligned
    array and the number of carried entries.
    """
    if USE_NUMBA:
        out, kept = nb_align(src.row_ptr, src.col_idx, src_vals, dst.row_ptr, dst.col_idx)
        return out, int(kept)
    return np_align(src.keys, src_vals, dst.keys)


if "SPARSETRAIN_THREADS" in os.environ:
    set_threads(int(os.environ["SPARSETRAIN_THREADS"]))

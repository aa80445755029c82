"""Single-file model checkpoints.

Layout (little endian): ``b"SNET"``, u32 format version, u64 config length,
config INI text, u32 layer count, then one SPW1 block per layer followed by
that layer's f32 bias vector.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import CheckpointError
from .nn import NetworkConfig, SparseNetwork
from .sparse import SparseWeights, _read_exact

MAGIC = b"SNET"
FORMAT_VERSION = 1
_HEAD = struct.Struct("<4sIQ")
_U32 = struct.Struct("<I")

# resolved architecture, appended to the run config so a checkpoint is self-describing
_ARCH_SECTION = "architecture"


def _config_blob(config: RunConfig, network: SparseNetwork) -> bytes:
    sizes = ",".join(str(s) for s in network.config.layer_sizes)
    text = config.to_ini() + f"[{_ARCH_SECTION}]\nlayer_sizes = {sizes}\n"
    return text.encode("utf-8")


def _split_blob(blob: bytes) -> tuple[RunConfig, list]:
    text = blob.decode("utf-8")
    marker = f"[{_ARCH_SECTION}]"
    if marker not in text:
        raise CheckpointError("checkpoint config has no architecture section")
    run_text, arch = text.split(marker, 1)
    sizes = None
    for line in arch.splitlines():
        if line.strip().startswith("layer_sizes"):
            sizes = [int(v) for v in line.split("=", 1)[1].split(",")]
    if not sizes:
        raise CheckpointError("checkpoint config lacks layer_sizes")
    return RunConfig.from_ini(run_text), sizes


def dumps(network: SparseNetwork, config: RunConfig) -> bytes:
    buf = io.BytesIO()
    blob = _config_blob(config, network)
    buf.write(_HEAD.pack(MAGIC, FORMAT_VERSION, len(blob)))
    buf.write(blob)
    buf.write(_U32.pack(len(network.layers)))
    for w, b in zip(network.layers, network.biases):
        w.write(buf)
        buf.write(np.ascontiguousarray(b, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(data: bytes) -> tuple[SparseNetwork, RunConfig]:
    fh = io.BytesIO(data)
    magic, version, n = _HEAD.unpack(_read_exact(fh, _HEAD.size))
    if magic != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        config, sizes = _split_blob(_read_exact(fh, n))
    except (UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"unreadable checkpoint config: {exc}") from exc
    (n_layers,) = _U32.unpack(_read_exact(fh, _U32.size))
    if n_layers != len(sizes) - 1:
        raise CheckpointError(f"{n_layers} layers stored for architecture {sizes}")
    dtype = np.dtype(config.network.dtype)
    layers, biases = [], []
    for i in range(n_layers):
        w = SparseWeights.read(fh, dtype=dtype)
        if w.shape != (sizes[i], sizes[i + 1]):
            raise CheckpointError(f"layer {i} has shape {w.shape}, expected {(sizes[i], sizes[i + 1])}")
        raw = _read_exact(fh, 4 * w.cols)
        layers.append(w)
        biases.append(np.frombuffer(raw, dtype="<f4").astype(dtype))
    if fh.read(1):
        raise CheckpointError("trailing bytes after the last layer")
    net_cfg = config.network_config(sizes[0], sizes[-1])
    net_cfg = NetworkConfig(**{**net_cfg.__dict__, "layer_sizes": sizes})
    return SparseNetwork(layers, biases, net_cfg), config


def save(path, network: SparseNetwork, config: RunConfig) -> None:
    path = Path(path)
    data = dumps(network, config)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(data)
        tmp.replace(path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def load(path) -> tuple[SparseNetwork, RunConfig]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(data)

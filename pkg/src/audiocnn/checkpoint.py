"""Binary checkpoints: parameters, batchnorm statistics and optimizer state.

Layout (little-endian)::

    b"WCK1" | u32 version | 32-byte architecture digest | u32 record count
    record: u16 name length | name | u8 ndim | u32 dims... | f32 values
    u8 has_optimizer
      [u64 step_count | f64 lr, beta1, beta2, epsilon | u32 count | records]
    u32 extra length | extra JSON (sorted keys)

Moving batchnorm statistics are stored as records named
``<layer>/moving_mean`` and ``<layer>/moving_variance``; Adam moments as
``adam/m/<param>`` and ``adam/v/<param>``.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from audiocnn.engine.optim import AdamState

MAGIC = b"WCK1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_record(fh: BinaryIO, name: str, array: np.ndarray) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<B", array.ndim))
    fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
    fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise CheckpointError("truncated checkpoint")
    return b


def _read_record(fh: BinaryIO) -> tuple[str, np.ndarray]:
    (n,) = struct.unpack("<H", _read_exact(fh, 2))
    name = _read_exact(fh, n).decode("utf-8")
    (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
    shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
    count = int(np.prod(shape, dtype=np.int64))
    values = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").reshape(shape)
    return name, values.astype(np.float32)


def _network_arrays(network) -> dict[str, np.ndarray]:
    arrays = {p.name: p.data for p in network.parameters()}
    for bn in network.batchnorms():
        arrays[f"{bn.name}/moving_mean"] = bn.moving_mean
        arrays[f"{bn.name}/moving_variance"] = bn.moving_variance
    return arrays


def save_checkpoint(
    target: str | Path | BinaryIO, network, optimizer: AdamState | None = None, extra: dict | None = None
) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(network.spec.digest())
    arrays = _network_arrays(network)
    buf.write(struct.pack("<I", len(arrays)))
    for name, a in arrays.items():
        _write_record(buf, name, a)
    if optimizer is None:
        buf.write(struct.pack("<B", 0))
    else:
        buf.write(struct.pack("<B", 1))
        buf.write(struct.pack("<Q", optimizer.step_count))
        buf.write(struct.pack("<4d", optimizer.learning_rate, optimizer.beta1, optimizer.beta2, optimizer.epsilon))
        names = sorted(optimizer.first_moment)
        buf.write(struct.pack("<I", 2 * len(names)))
        for name in names:
            _write_record(buf, f"adam/m/{name}", optimizer.first_moment[name])
            _write_record(buf, f"adam/v/{name}", optimizer.second_moment[name])
    blob = json.dumps(extra or {}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    data = buf.getvalue()
    if isinstance(target, (str, Path)):
        Path(target).write_bytes(data)
    else:
        target.write(data)


def load_checkpoint(source: str | Path | BinaryIO, network, optimizer: AdamState | None = None) -> dict:
    """Restore ``network`` (and ``optimizer`` when given) in place.

    Returns the extra JSON dictionary stored with the checkpoint.
    """
    fh = open(source, "rb") if isinstance(source, (str, Path)) else source
    try:
        if _read_exact(fh, 4) != MAGIC:
            raise CheckpointError("bad magic")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise CheckpointError(f"unsupported version {version}")
        if _read_exact(fh, 32) != network.spec.digest():
            raise CheckpointError("architecture mismatch")
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        records = dict(_read_record(fh) for _ in range(count))
        targets = _network_arrays(network)
        if set(records) != set(targets):
            raise CheckpointError("parameter names differ from the architecture")
        for name, arr in targets.items():
            if records[name].shape != arr.shape:
                raise CheckpointError(f"shape mismatch for {name}")
        for name, arr in targets.items():
            arr[...] = records[name]
        (has_opt,) = struct.unpack("<B", _read_exact(fh, 1))
        if has_opt:
            (step,) = struct.unpack("<Q", _read_exact(fh, 8))
            lr, b1, b2, eps = struct.unpack("<4d", _read_exact(fh, 32))
            (n,) = struct.unpack("<I", _read_exact(fh, 4))
            moments = dict(_read_record(fh) for _ in range(n))
            if optimizer is not None:
                optimizer.step_count = step
                optimizer.learning_rate, optimizer.beta1, optimizer.beta2, optimizer.epsilon = lr, b1, b2, eps
                optimizer.first_moment = {k[len("adam/m/"):]: v for k, v in moments.items() if k.startswith("adam/m/")}
                optimizer.second_moment = {k[len("adam/v/"):]: v for k, v in moments.items() if k.startswith("adam/v/")}
        elif optimizer is not None:
            raise CheckpointError("checkpoint has no optimizer state")
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        return json.loads(_read_exact(fh, n).decode("utf-8"))
    finally:
        if fh is not source:
            fh.close()

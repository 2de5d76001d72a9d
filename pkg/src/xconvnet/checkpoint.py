"""Binary checkpoint format for parameters and optimizer state.

Layout (little-endian throughout):

    magic "XCKP" | format version u32 | record count u32
    per record:
        name length u32 | UTF-8 name bytes
        rank u32 | one u32 per dim
        values   float64[prod(dims)]
        moment1  float64[prod(dims)]
        moment2  float64[prod(dims)]

Learnable parameters store their ADAM moments in the two moment slots.
Batch-norm running statistics are written as additional named records
(with zero moments), as is a scalar ``adam.step`` record holding the
shared optimizer step count so training can resume bit-exactly.
"""

from __future__ import annotations

import struct
from typing import Iterable

import numpy as np

from .engine import Parameter

MAGIC = b"XCKP"
VERSION = 1
STEP_RECORD = "adam.step"


class CheckpointError(ValueError):
    """Malformed checkpoint file or parameter-set mismatch."""


def _write_record(fh, name: str, values: np.ndarray,
                  m: np.ndarray, v: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<I", values.ndim))
    for dim in values.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())
    fh.write(np.ascontiguousarray(m, dtype="<f8").tobytes())
    fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def save_checkpoint(path, params: Iterable[Parameter],
                    buffers: Iterable[tuple[str, np.ndarray]] = (),
                    step: int = 0) -> None:
    """Write parameters, named stat buffers, and the optimizer step count."""
    params = list(params)
    buffers = list(buffers)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(params) + len(buffers) + 1))
        for p in params:
            _write_record(fh, p.name, p.value, p.m, p.v)
        for name, values in buffers:
            zeros = np.zeros_like(values)
            _write_record(fh, name, np.asarray(values, dtype=np.float64), zeros, zeros)
        scalar = np.array(float(step))
        _write_record(fh, STEP_RECORD, scalar, np.zeros(()), np.zeros(()))


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(
            f"truncated checkpoint while reading {what} at byte {fh.tell() - len(data)}")
    return data


def load_checkpoint(path) -> dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Read all records as ``name -> (values, moment1, moment2)``."""
    records: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r} at byte 0, expected {MAGIC!r}")
        version, = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        count, = struct.unpack("<I", _read_exact(fh, 4, "record count"))
        for _ in range(count):
            name_len, = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            rank, = struct.unpack("<I", _read_exact(fh, 4, "rank"))
            dims = tuple(struct.unpack("<I", _read_exact(fh, 4, "dim"))[0]
                         for _ in range(rank))
            n = int(np.prod(dims)) if dims else 1
            arrays = []
            for part in ("values", "moment1", "moment2"):
                raw = _read_exact(fh, 8 * n, f"{name} {part}")
                arrays.append(np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims))
            records[name] = tuple(arrays)
    return records


def restore_parameters(params: Iterable[Parameter],
                       buffers: Iterable[tuple[str, np.ndarray]],
                       records: dict) -> int:
    """Load record values into live parameters and buffers; return the step.

    Raises :class:`CheckpointError` naming every parameter present on only
    one side or stored with a different shape.
    """
    params = list(params)
    buffers = list(buffers)
    expected = {p.name for p in params} | {name for name, _ in buffers} | {STEP_RECORD}
    stored = set(records)
    problems = []
    for name in sorted(expected - stored):
        problems.append(f"missing from checkpoint: {name}")
    for name in sorted(stored - expected):
        problems.append(f"unexpected in checkpoint: {name}")
    for p in params:
        if p.name in records and records[p.name][0].shape != p.value.shape:
            problems.append(
                f"shape mismatch for {p.name}: model {p.value.shape} "
                f"vs stored {records[p.name][0].shape}")
    if problems:
        raise CheckpointError("checkpoint does not match model: " + "; ".join(problems))

    step = int(records[STEP_RECORD][0].reshape(()))
    for p in params:
        values, m, v = records[p.name]
        p.value[...] = values
        p.m = m.copy()
        p.v = v.copy()
        p.t = step
    for name, buf in buffers:
        buf[...] = records[name][0]
    return step

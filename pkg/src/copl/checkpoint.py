"""COPL1 parameter checkpoints.

Layout: ``b"COPL1"``, four little-endian uint32 dims (M, d, d_img, h_m), then
little-endian float64 arrays V, U1, c1, U2, c2, W_a.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .conditioners import AlignmentParams, MetaNet, Parameters, PromptSet
from .errors import BadMagic, DimensionMismatch, RecordLengthMismatch

MAGIC = b"COPL1"
_DIMS = struct.Struct("<4I")
_LE = np.dtype("<f8")


def _shapes(M: int, d: int, d_img: int, h_m: int):
    return [("V", (M, d)), ("U1", (h_m, d_img)), ("c1", (h_m,)), ("U2", (d, h_m)),
            ("c2", (d,)), ("W_a", (2 * d,))]


def dumps(params: Parameters) -> bytes:
    M, d, d_img, h_m = params.dims()
    groups = params.groups()
    parts = [MAGIC, _DIMS.pack(M, d, d_img, h_m)]
    for name, shape in _shapes(M, d, d_img, h_m):
        arr = groups[name]
        if arr.shape != shape:
            raise DimensionMismatch(f"{name} has shape {arr.shape}, expected {shape}")
        parts.append(np.ascontiguousarray(arr, dtype=_LE).tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> Parameters:
    if blob[: len(MAGIC)] != MAGIC:
        raise BadMagic("bad magic")
    off = len(MAGIC)
    if len(blob) < off + _DIMS.size:
        raise RecordLengthMismatch("record length mismatch: truncated header")
    M, d, d_img, h_m = _DIMS.unpack_from(blob, off)
    if min(M, d, d_img, h_m) < 1:
        raise DimensionMismatch("all checkpoint dims must be positive")
    off += _DIMS.size
    shapes = _shapes(M, d, d_img, h_m)
    need = 8 * sum(int(np.prod(s)) for _, s in shapes)
    if len(blob) - off != need:
        raise RecordLengthMismatch(
            f"record length mismatch: expected {need} payload bytes, found {len(blob) - off}")
    g = {}
    for name, shape in shapes:
        n = int(np.prod(shape))
        g[name] = np.frombuffer(blob, dtype=_LE, count=n, offset=off).astype(np.float64).reshape(shape)
        off += 8 * n
    return Parameters(PromptSet(g["V"]), MetaNet(g["U1"], g["c1"], g["U2"], g["c2"]),
                      AlignmentParams(g["W_a"]))


def save(params: Parameters, path) -> None:
    Path(path).write_bytes(dumps(params))


def load(path) -> Parameters:
    return loads(Path(path).read_bytes())

"""VXDC grid container.

Layout (little-endian): magic ``b"VXDC"``, u16 version (1), u16 K,
u16 channels (3), u32 grid count, then per grid K^3 bytes of part ids
followed by K^3 * 3 float32 features, both in [z, y, x] order.
"""
from __future__ import annotations

import os
import struct
from typing import BinaryIO, Iterable

import numpy as np

from .voxel import AttributedVoxelGrid

MAGIC = b"VXDC"
VERSION = 1
_HEADER = struct.Struct("<4sHHHI")


class FormatError(IOError):
    pass


def write_grids(fh: BinaryIO, grids: list[AttributedVoxelGrid]) -> None:
    if not grids:
        raise ValueError("refusing to write an empty grid file")
    K = grids[0].K
    fh.write(_HEADER.pack(MAGIC, VERSION, K, 3, len(grids)))
    for g in grids:
        if g.K != K:
            raise ValueError("all grids in a file must share K")
        fh.write(np.ascontiguousarray(g.part_ids, dtype="u1").tobytes())
        fh.write(np.ascontiguousarray(g.features, dtype="<f4").tobytes())


def read_grids(fh: BinaryIO) -> list[AttributedVoxelGrid]:
    head = fh.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise FormatError("truncated VXDC header")
    magic, version, K, channels, count = _HEADER.unpack(head)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION or channels != 3:
        raise FormatError(f"unsupported VXDC version={version} channels={channels}")
    n = K ** 3
    grids = []
    for _ in range(count):
        ids = fh.read(n)
        feats = fh.read(n * 12)
        if len(ids) != n or len(feats) != n * 12:
            raise FormatError("truncated VXDC payload")
        grids.append(AttributedVoxelGrid(
            np.frombuffer(ids, "u1").reshape(K, K, K),
            np.frombuffer(feats, "<f4").reshape(K, K, K, 3),
        ))
    return grids


def save_vxdc(path: str | os.PathLike, grids: Iterable[AttributedVoxelGrid]) -> None:
    with open(path, "wb") as fh:
        write_grids(fh, list(grids))


def load_vxdc(path: str | os.PathLike) -> list[AttributedVoxelGrid]:
    with open(path, "rb") as fh:
        return read_grids(fh)

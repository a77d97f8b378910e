"""Binary model persistence.

Layout (all integers little-endian uint32, all floats little-endian
IEEE-754 float64):

    magic       5 bytes, b"MDMA1"
    version     u32 (currently 1)
    d, m, l, r, pool_size   u32 each
    leaf_order  d x u32
    parameters  float64 arrays, C order, concatenated in the declared
                parameter order: network weights per layer, network
                gates per layer, network biases per layer, mixing
                matrices level by level, top mixing vector.

The tree shape is implied by (d, pool_size), so loading rebuilds the
model skeleton and overwrites every raw parameter bitwise; a save/load
round trip reproduces parameters exactly.
"""

from __future__ import annotations

import struct

import numpy as np

from .ht import MdmaModel
from .training import init_model, pack_params, param_count, set_params

MAGIC = b"MDMA1"
VERSION = 1
_HEADER = struct.Struct("<6I")


def save_model(model: MdmaModel, path) -> None:
    bank = model.phi_bank
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(VERSION, model.d, model.m, bank.depth_l,
                              bank.width_r, model.ht.pool_size))
        fh.write(np.asarray(model.ht.leaf_order, dtype="<u4").tobytes())
        fh.write(pack_params(model).astype("<f8").tobytes())


def load_model(path) -> MdmaModel:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError("not a model archive: bad magic %r" % magic)
        header = fh.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise ValueError("truncated archive header")
        version, d, m, l, r, pool = _HEADER.unpack(header)
        if version != VERSION:
            raise ValueError("unsupported archive version %d" % version)
        order_bytes = fh.read(4 * d)
        if len(order_bytes) != 4 * d:
            raise ValueError("truncated leaf order")
        leaf_order = np.frombuffer(order_bytes, dtype="<u4").astype(np.int64)

        model = init_model(d, m, l, r, pool, seed=0, leaf_order=leaf_order)
        n_params = param_count(model)
        payload = fh.read(8 * n_params)
        if len(payload) != 8 * n_params:
            raise ValueError("truncated parameter payload")
        if fh.read(1):
            raise ValueError("trailing data in archive")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    set_params(model, flat)
    return model

"""Binary checkpoint: versioned magic, JSON header, float32 parameters and Adam moments.

Layout (little-endian)::

    8 bytes   magic  b"CRCKPT" + version (uint16)
    4 bytes   header length H (uint32)
    H bytes   UTF-8 JSON: net spec, layout map, parameter count, Adam step, metadata
    4*P bytes parameters (float32)
    4*P bytes first moments (float32), present when the header says so
    4*P bytes second moments (float32), likewise
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .mlp import NetSpec, ParameterSet
from .optim import AdamState

VERSION = 1
_MAGIC = b"CRCKPT" + struct.pack("<H", VERSION)


def save_checkpoint(path, spec: NetSpec, params: ParameterSet, state: AdamState | None = None,
                    meta: dict | None = None):
    header = {
        "version": VERSION,
        "spec": spec.to_dict(),
        # a list keeps layout order under sort_keys; zero-size entries share offsets
        "layout": [[k, off, list(shape)] for k, (off, shape) in params.layout.items()],
        "num_params": int(params.values.size),
        "has_optimizer": state is not None,
        "adam_step": int(state.step) if state is not None else 0,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    parts = [_MAGIC, struct.pack("<I", len(blob)), blob, params.values.astype("<f4").tobytes()]
    if state is not None:
        parts += [state.m.astype("<f4").tobytes(), state.v.astype("<f4").tobytes()]
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    """Returns ``(spec, params, adam_state_or_None, meta)``."""
    data = Path(path).read_bytes()
    if data[:6] != _MAGIC[:6]:
        raise ValueError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<H", data[6:8])
    if version != VERSION:
        raise ValueError(f"{path}: checkpoint version {version}, expected {VERSION}")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + hlen])
    n = header["num_params"]
    body = data[12 + hlen:]
    arrays = len(body) // (4 * n) if n else 0
    expected = 3 if header["has_optimizer"] else 1
    if arrays != expected or len(body) != 4 * n * expected:
        raise ValueError(f"{path}: truncated or oversized payload")
    flat = np.frombuffer(body, dtype="<f4").astype(np.float64)
    layout = {k: (off, tuple(shape)) for k, off, shape in header["layout"]}
    params = ParameterSet(flat[:n].copy(), layout)
    state = None
    if header["has_optimizer"]:
        state = AdamState(flat[n:2 * n].copy(), flat[2 * n:].copy(), header["adam_step"])
    return NetSpec.from_dict(header["spec"]), params, state, header["meta"]

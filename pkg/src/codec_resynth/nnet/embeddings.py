"""Fixed sinusoidal time embedding and the learnable stage-embedding table."""

from __future__ import annotations

import numpy as np

# t in [0, 1] is stretched onto this many positions before the sinusoids
TIME_SCALE = 1000.0


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoids at geometrically spaced frequencies; returns (len(t), dim) in [-1, 1]."""
    if dim < 2 or dim % 2:
        raise ValueError(f"time embedding dim must be even and >= 2, got {dim}")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    angles = TIME_SCALE * t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def stage_table_shape(num_layers: int, dim: int) -> tuple[int, int]:
    """One row per predicted stage i = 2..N."""
    if num_layers < 2:
        raise ValueError("stage embeddings need at least two RVQ layers")
    return (num_layers - 1, dim)

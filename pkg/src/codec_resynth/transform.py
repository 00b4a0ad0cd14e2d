"""Orthonormal non-overlapping DCT-II frame transform.

Stands in for a codec encoder/decoder pair. Because the transform is exactly
invertible, decoding the unquantized embedding reproduces the input, which
makes it the quality ceiling every resynthesis method is measured against.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .corpus import Waveform

# geometry of the 6 kbps reference codec, kept for bitrate comparisons
REFERENCE_FRAME_RATE_HZ = 75.0
REFERENCE_DIM = 128

_EMB_MAGIC = b"CREMB\x00\x01\x00"


@dataclass(frozen=True)
class FrameConfig:
    frame_size: int = 64
    hop: int = 64
    dim: int = 64
    sample_rate_hz: int = 8000

    def __post_init__(self):
        for name in ("frame_size", "hop", "dim", "sample_rate_hz"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (self.frame_size == self.hop == self.dim):
            raise ValueError(
                "only the non-overlapping orthonormal geometry is supported "
                f"(frame_size == hop == dim), got F={self.frame_size}, H={self.hop}, d={self.dim}"
            )

    @property
    def frame_rate_hz(self) -> float:
        return self.sample_rate_hz / self.hop

    def num_frames(self, num_samples: int) -> int:
        if num_samples < self.frame_size:
            return 0
        return (num_samples - self.frame_size) // self.hop + 1


@dataclass(frozen=True)
class EmbeddingSequence:
    values: np.ndarray
    frame_config: FrameConfig

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1:
            raise ValueError(f"embedding sequence must be L x d with L >= 1, got shape {v.shape}")
        if v.shape[1] != self.frame_config.dim:
            raise ValueError(f"embedding width {v.shape[1]} != frame config dim {self.frame_config.dim}")
        if not np.all(np.isfinite(v)):
            raise ValueError("embedding sequence contains non-finite values")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.shape[0]


@lru_cache(maxsize=8)
def dct_basis(size: int) -> np.ndarray:
    """Rows are the orthonormal DCT-II basis vectors of length ``size``."""
    n = np.arange(size)
    k = np.arange(size)[:, None]
    basis = np.cos(np.pi * (n + 0.5) * k / size) * np.sqrt(2.0 / size)
    basis[0] /= np.sqrt(2.0)
    basis.setflags(write=False)
    return basis


def encode_frames(waveform: Waveform, cfg: FrameConfig) -> EmbeddingSequence:
    if waveform.sample_rate_hz != cfg.sample_rate_hz:
        raise ValueError(
            f"sample rate mismatch: waveform {waveform.sample_rate_hz} Hz, config {cfg.sample_rate_hz} Hz"
        )
    n_frames = cfg.num_frames(len(waveform))
    if n_frames < 1:
        raise ValueError(f"waveform of {len(waveform)} samples is shorter than one frame ({cfg.frame_size})")
    frames = waveform.samples[: n_frames * cfg.hop].reshape(n_frames, cfg.frame_size)
    return EmbeddingSequence(frames @ dct_basis(cfg.frame_size).T, cfg)


def decode_frames(embeddings: EmbeddingSequence | np.ndarray, cfg: FrameConfig) -> Waveform:
    values = embeddings.values if isinstance(embeddings, EmbeddingSequence) else np.asarray(embeddings, float)
    if values.ndim != 2 or values.shape[1] != cfg.dim:
        raise ValueError(f"embedding shape {values.shape} does not match dim {cfg.dim}")
    frames = values @ dct_basis(cfg.frame_size)
    return Waveform(frames.reshape(-1), cfg.sample_rate_hz)


def save_embeddings(seq: EmbeddingSequence, path):
    """Little-endian: magic, (L, d, F, H, sample_rate) as uint32, then L*d float32 row-major."""
    cfg = seq.frame_config
    header = _EMB_MAGIC + struct.pack("<5I", len(seq), cfg.dim, cfg.frame_size, cfg.hop, cfg.sample_rate_hz)
    Path(path).write_bytes(header + seq.values.astype("<f4").tobytes())


def load_embeddings(path) -> EmbeddingSequence:
    data = Path(path).read_bytes()
    if data[:8] != _EMB_MAGIC:
        raise ValueError(f"{path}: not an embedding file")
    L, d, F, H, sr = struct.unpack("<5I", data[8:28])
    body = data[28:]
    if len(body) != 4 * L * d:
        raise ValueError(f"{path}: expected {4 * L * d} payload bytes, found {len(body)}")
    values = np.frombuffer(body, dtype="<f4").reshape(L, d).astype(np.float64)
    return EmbeddingSequence(values, FrameConfig(F, H, d, sr))

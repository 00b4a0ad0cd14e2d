"""Residual vector quantization.

Each layer quantizes whatever the previous layers left over: layer ``i`` picks
the code nearest to ``z - sum(x_1..x_{i-1})``. Codebooks are trained layer by
layer with k-means on the running residuals.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .transform import EmbeddingSequence

logger = logging.getLogger(__name__)

_MODEL_MAGIC = b"CRRVQ\x00\x01\x00"
_CODES_MAGIC = b"CRCOD\x00\x01\x00"


@dataclass(frozen=True)
class Codebook:
    codes: np.ndarray
    layer_index: int

    def __post_init__(self):
        codes = np.ascontiguousarray(self.codes, dtype=np.float64)
        if codes.ndim != 2 or codes.shape[0] < 2:
            raise ValueError(f"codebook must be V x d with V >= 2, got shape {codes.shape}")
        if not np.all(np.isfinite(codes)):
            raise ValueError("codebook contains non-finite values")
        object.__setattr__(self, "codes", codes)


@dataclass(frozen=True)
class RVQModel:
    codebooks: tuple[Codebook, ...]

    def __post_init__(self):
        books = tuple(self.codebooks)
        if not books:
            raise ValueError("RVQ model needs at least one codebook")
        shape = books[0].codes.shape
        for i, book in enumerate(books, start=1):
            if book.layer_index != i:
                raise ValueError(f"codebook {i} has layer_index {book.layer_index}")
            if book.codes.shape != shape:
                raise ValueError("all codebooks must share V and d")
        object.__setattr__(self, "codebooks", books)

    @property
    def num_layers(self) -> int:
        return len(self.codebooks)

    @property
    def codebook_size(self) -> int:
        return self.codebooks[0].codes.shape[0]

    @property
    def dim(self) -> int:
        return self.codebooks[0].codes.shape[1]

    @classmethod
    def from_arrays(cls, arrays) -> "RVQModel":
        return cls(tuple(Codebook(a, i) for i, a in enumerate(arrays, start=1)))


@dataclass(frozen=True)
class CodeSequence:
    indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices)
        if idx.ndim != 2:
            raise ValueError(f"code sequence must be L x N, got shape {idx.shape}")
        if idx.size and not np.issubdtype(idx.dtype, np.integer):
            raise TypeError("code indices must be integers")
        object.__setattr__(self, "indices", idx.astype(np.int64))

    def __len__(self):
        return self.indices.shape[0]

    @property
    def num_layers(self) -> int:
        return self.indices.shape[1]

    def check(self, model: RVQModel):
        if self.num_layers != model.num_layers:
            raise ValueError(f"code sequence has {self.num_layers} layers, model has {model.num_layers}")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= model.codebook_size):
            raise IndexError(f"code index outside codebook of size {model.codebook_size}")


def _as_matrix(embeddings) -> np.ndarray:
    if isinstance(embeddings, EmbeddingSequence):
        return embeddings.values
    return np.asarray(embeddings, dtype=np.float64)


def _kmeans_pp(x, k, rng):
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    first = int(rng.integers(n))
    centers[0] = x[first]
    _, d2 = kernels.nearest_code(x, centers[:1])
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            pick = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            pick = min(pick, n - 1)
        else:
            # all points already coincide with a center
            pick = int(rng.integers(n))
        centers[j] = x[pick]
        _, d_new = kernels.nearest_code(x, centers[j:j + 1])
        d2 = np.minimum(d2, d_new)
    return centers


def _reseed_empty(assign, dist, counts):
    """Move the farthest member of the largest cluster into each empty cluster (in index order)."""
    for j in np.flatnonzero(counts == 0):
        big = int(np.argmax(counts))
        members = np.flatnonzero(assign == big)
        far = members[int(np.argmax(dist[members]))]
        assign[far] = j
        dist[far] = 0.0
        counts[big] -= 1
        counts[j] = 1


def kmeans(x, k: int, iters: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ initialisation followed by exactly ``iters`` Lloyd iterations."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.shape[0] < k:
        raise ValueError(f"need at least {k} points for {k} clusters, got {x.shape[0]}")
    centers = _kmeans_pp(x, k, rng)
    for _ in range(iters):
        assign, dist = kernels.nearest_code(x, centers)
        counts = np.bincount(assign, minlength=k)
        if np.any(counts == 0):
            _reseed_empty(assign, dist, counts)
        sums, counts = kernels.cluster_sums(x, assign, k)
        centers = sums / counts[:, None]
    return centers


def train_rvq(embeddings, num_layers: int, codebook_size: int, iters: int = 25, seed: int = 0) -> RVQModel:
    """Train ``num_layers`` codebooks of ``codebook_size`` codes on pooled frames.

    ``embeddings`` is a collection of L x d sequences. Frames are pooled and put
    in lexicographic order first, so the result does not depend on the order of
    the input collection. Codebooks are rounded to float32 (the on-disk
    precision) before the next layer's residuals are formed.
    """
    if num_layers < 1 or codebook_size < 2 or iters < 1:
        raise ValueError("need num_layers >= 1, codebook_size >= 2 and iters >= 1")
    mats = [_as_matrix(e) for e in embeddings]
    if not mats:
        raise ValueError("no training data")
    x = np.concatenate(mats, axis=0)
    if not np.all(np.isfinite(x)):
        raise ValueError("training data contains non-finite values")
    if x.shape[0] < codebook_size:
        raise ValueError(f"{x.shape[0]} frames is fewer than codebook size {codebook_size}")
    x = x[np.lexsort(x.T[::-1])]

    rng = np.random.default_rng(seed)
    residual = x.copy()
    books = []
    for layer in range(1, num_layers + 1):
        codes = kmeans(residual, codebook_size, iters, rng)
        codes = codes.astype(np.float32).astype(np.float64)
        books.append(Codebook(codes, layer))
        idx, _ = kernels.nearest_code(residual, codes)
        residual = residual - codes[idx]
        logger.info("rvq layer %d: mean residual norm %.5f", layer, np.linalg.norm(residual, axis=1).mean())
    return RVQModel(tuple(books))


def quantize(model: RVQModel, embeddings) -> tuple[CodeSequence, list[float]]:
    """Greedy layerwise nearest-code search.

    Returns the L x N codes and, per layer ``i``, the mean over frames of
    ``||z - sum(x_1..x_i)||``.
    """
    z = _as_matrix(embeddings)
    if z.ndim != 2 or z.shape[1] != model.dim:
        raise ValueError(f"embedding shape {z.shape} does not match model dim {model.dim}")
    residual = z.copy()
    cols, norms = [], []
    for book in model.codebooks:
        idx, _ = kernels.nearest_code(residual, book.codes)
        residual = residual - book.codes[idx]
        cols.append(idx)
        norms.append(float(np.linalg.norm(residual, axis=1).mean()))
    return CodeSequence(np.stack(cols, axis=1)), norms


def dequantize(model: RVQModel, codes: CodeSequence, upto_layer: int | None = None) -> np.ndarray:
    """Sum of the code vectors of layers ``1..upto_layer`` for every frame (L x d)."""
    if upto_layer is None:
        upto_layer = model.num_layers
    if not 1 <= upto_layer <= model.num_layers:
        raise ValueError(f"upto_layer must be in [1, {model.num_layers}], got {upto_layer}")
    idx = codes.indices
    if idx.shape[1] < upto_layer:
        raise ValueError(f"code sequence only has {idx.shape[1]} layers")
    if idx.size and (idx[:, :upto_layer].min() < 0 or idx[:, :upto_layer].max() >= model.codebook_size):
        raise IndexError(f"code index outside codebook of size {model.codebook_size}")
    out = model.codebooks[0].codes[idx[:, 0]].copy()
    for i in range(1, upto_layer):
        out += model.codebooks[i].codes[idx[:, i]]
    return out


def bits_per_frame(num_layers: int, codebook_size: int) -> int:
    return num_layers * (codebook_size - 1).bit_length()


def bitrate_for(frame_rate_hz: float, num_layers: int, codebook_size: int) -> float:
    """Bits per second; non-power-of-two codebooks are charged ceil(log2 V) bits."""
    return frame_rate_hz * bits_per_frame(num_layers, codebook_size)


def bitrate(model: RVQModel, frame_rate_hz: float) -> float:
    return bitrate_for(frame_rate_hz, model.num_layers, model.codebook_size)


def save_model(model: RVQModel, path):
    """Little-endian: magic, (N, V, d) uint32, then N*V*d float32."""
    header = _MODEL_MAGIC + struct.pack("<3I", model.num_layers, model.codebook_size, model.dim)
    body = np.stack([b.codes for b in model.codebooks]).astype("<f4").tobytes()
    Path(path).write_bytes(header + body)


def load_model(path) -> RVQModel:
    data = Path(path).read_bytes()
    if data[:8] != _MODEL_MAGIC:
        raise ValueError(f"{path}: not an RVQ model file")
    n, v, d = struct.unpack("<3I", data[8:20])
    body = data[20:]
    if len(body) != 4 * n * v * d:
        raise ValueError(f"{path}: truncated codebook payload")
    arr = np.frombuffer(body, dtype="<f4").reshape(n, v, d).astype(np.float64)
    return RVQModel.from_arrays(list(arr))


def save_codes(codes: CodeSequence, path):
    """Little-endian: magic, (L, N) uint32, then L*N uint16 indices."""
    if codes.indices.size and (codes.indices.min() < 0 or codes.indices.max() > 0xFFFF):
        raise ValueError("indices do not fit in 16 bits")
    header = _CODES_MAGIC + struct.pack("<2I", *codes.indices.shape)
    Path(path).write_bytes(header + codes.indices.astype("<u2").tobytes())


def load_codes(path) -> CodeSequence:
    data = Path(path).read_bytes()
    if data[:8] != _CODES_MAGIC:
        raise ValueError(f"{path}: not a code sequence file")
    L, n = struct.unpack("<2I", data[8:16])
    body = data[16:]
    if len(body) != 2 * L * n:
        raise ValueError(f"{path}: truncated index payload")
    return CodeSequence(np.frombuffer(body, dtype="<u2").reshape(L, n).astype(np.int64))

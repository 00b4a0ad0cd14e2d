"""Backend selection for the hot k-means / quantization kernels.

The compiled extension is used when it imports; otherwise the numpy fallback
is. Set ``CODEC_RESYNTH_PURE=1`` to force the fallback.
"""

import logging
import os

import numpy as np

from . import _kernels_py

logger = logging.getLogger(__name__)

BACKEND = "python"

if os.environ.get("CODEC_RESYNTH_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py
        logger.debug("compiled kernels unavailable, using numpy fallback")
else:
    _impl = _kernels_py


def nearest_code(x, codes):
    """Nearest row of ``codes`` for every row of ``x`` (squared Euclidean, lowest index wins ties).

    Returns ``(indices, squared_distances)``.
    """
    return _impl.nearest_code(
        np.ascontiguousarray(x, dtype=np.float64),
        np.ascontiguousarray(codes, dtype=np.float64),
    )


def cluster_sums(x, assign, num_clusters):
    """Per-cluster sums of rows of ``x`` and member counts."""
    return _impl.cluster_sums(
        np.ascontiguousarray(x, dtype=np.float64),
        np.ascontiguousarray(assign, dtype=np.int64),
        int(num_clusters),
    )

"""Deterministic counter-based Gaussian and uniform streams.

Every random number in this package is a pure function of
(seed, lane, path index, step index, component), so ensembles can be
chunked, threaded or reordered without changing a single bit of output.
Lanes keep independent noise sources (the two driving Brownian motions,
assumption sampling, per-cell sub-seeds) on disjoint streams.

The hash stage has two interchangeable backends: a pure-numpy kernel and
an optional Cython one selected at import (override with the environment
variable ``FASTSLOW_RNG`` set to ``py`` or ``cy``).  Both produce identical
words; the uint64 -> normal transform is shared numpy code, so results are
bit-identical across backends.
"""

from __future__ import annotations

import os

import numpy as np

from . import _rng_py
from ._rng_py import absorb_int, mix_int, SEED0

__all__ = [
    "LANE_FAST", "LANE_SLOW", "LANE_VALIDATE", "LANE_CELL", "LANE_AUX",
    "normals", "uniforms", "derive_key", "backend_name",
]

LANE_FAST = 0x01      # increments of the first driving Brownian motion
LANE_SLOW = 0x02      # increments of the second driving Brownian motion
LANE_VALIDATE = 0x03  # assumption-checking sample draws
LANE_CELL = 0x04      # per-cell sub-seed derivation
LANE_AUX = 0x05


def _select_backend():
    choice = os.environ.get("FASTSLOW_RNG", "auto").lower()
    if choice in ("py", "python", "numpy"):
        return _rng_py, "python"
    try:
        from . import _rng_cy  # noqa: PLC0415
    except ImportError:
        if choice in ("cy", "compiled", "cython"):
            raise RuntimeError(
                "FASTSLOW_RNG requested the compiled backend but "
                "fastslow._rng_cy is not built")
        return _rng_py, "python"
    return _rng_cy, "compiled"


_backend, _backend_name = _select_backend()


def backend_name() -> str:
    return _backend_name


def derive_key(*words: int) -> int:
    """Collapse integer words into a 64-bit sub-seed (order sensitive)."""
    h = mix_int(SEED0)
    for w in words:
        h = absorb_int(h, int(w))
    return h


def _lattice(seed, lane, path, step, nwords):
    path_a, step_a = np.broadcast_arrays(
        np.asarray(path, dtype=np.uint64), np.asarray(step, dtype=np.uint64))
    shape = path_a.shape
    p = np.ascontiguousarray(path_a).ravel()
    s = np.ascontiguousarray(step_a).ravel()
    words = _backend.u64_lattice(int(seed), int(lane), p, s, int(nwords))
    return words, shape


def normals(seed: int, lane: int, path, step, ncomp: int) -> np.ndarray:
    """Standard normal block keyed by (seed, lane, path, step, component).

    ``path`` and ``step`` broadcast against each other; the result has their
    broadcast shape plus a trailing ``(ncomp,)`` axis.  Uses the Box-Muller
    cosine branch on two hash words per normal.
    """
    words, shape = _lattice(seed, lane, path, step, 2 * ncomp)
    u1 = ((words[:, 0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0 ** -53
    u2 = (words[:, 1::2] >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
    z = np.sqrt(-2.0 * np.log(u1)) * np.cos((2.0 * np.pi) * u2)
    return z.reshape(shape + (ncomp,))


def uniforms(seed: int, lane: int, path, step, ncomp: int) -> np.ndarray:
    """Uniform [0, 1) block with the same keying contract as ``normals``."""
    words, shape = _lattice(seed, lane, path, step, ncomp)
    u = (words >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
    return u.reshape(shape + (ncomp,))

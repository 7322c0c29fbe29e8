"""Pure-numpy hash kernel for the counter-based random streams.

The lattice function maps (seed, lane, path, step, word) to 64-bit hash
words through a splitmix-style avalanche chain.  Integer arithmetic wraps
mod 2**64, so the compiled kernel in ``_rng_cy`` reproduces these words
bit for bit.
"""

import numpy as np

_MASK = (1 << 64) - 1
GOLD = 0x9E3779B97F4A7C15
SEED0 = 0x6A09E667F3BCC909

_GOLD_U = np.uint64(GOLD)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)


def mix_int(z: int) -> int:
    """Splitmix64 finalizer on python ints (exact mod 2**64)."""
    z &= _MASK
    z ^= z >> 30
    z = (z * 0xBF58476D1CE4E5B9) & _MASK
    z ^= z >> 27
    z = (z * 0x94D049BB133111EB) & _MASK
    z ^= z >> 31
    return z


def absorb_int(h: int, w: int) -> int:
    return mix_int(((h + GOLD) & _MASK) ^ (w & _MASK))


def _mix(h: np.ndarray) -> np.ndarray:
    # h is a private uint64 array; mutated in place.
    h ^= h >> _S30
    h *= _M1
    h ^= h >> _S27
    h *= _M2
    h ^= h >> _S31
    return h


def u64_lattice(seed: int, lane: int, path: np.ndarray, step: np.ndarray,
                nwords: int) -> np.ndarray:
    """Hash words for equal-length uint64 ``path``/``step`` arrays.

    Returns a (len(path), nwords) uint64 array; word j at row i is a pure
    function of (seed, lane, path[i], step[i], j).
    """
    base = absorb_int(absorb_int(mix_int(SEED0), seed), lane)
    c0 = np.uint64((base + GOLD) & _MASK)
    h = _mix(np.bitwise_xor(c0, path))
    h += _GOLD_U
    h = _mix(np.bitwise_xor(h, step))
    n = h.shape[0]
    out = np.empty((n, nwords), dtype=np.uint64)
    hg = h + _GOLD_U
    for j in range(nwords):
        out[:, j] = _mix(np.bitwise_xor(hg, np.uint64(j)))
    return out

# cython: boundscheck=False, wraparound=False, language_level=3
"""Compiled hash kernel; mirrors fastslow._rng_py.u64_lattice bit for bit."""

import numpy as np

cimport numpy as cnp
from libc.stdint cimport uint64_t

cnp.import_array()

cdef uint64_t GOLD = 0x9E3779B97F4A7C15UL
cdef uint64_t SEED0 = 0x6A09E667F3BCC909UL
cdef uint64_t M1 = 0xBF58476D1CE4E5B9UL
cdef uint64_t M2 = 0x94D049BB133111EBUL


cdef inline uint64_t _mix(uint64_t h) nogil:
    h ^= h >> 30
    h = h * M1
    h ^= h >> 27
    h = h * M2
    h ^= h >> 31
    return h


cdef inline uint64_t _absorb(uint64_t h, uint64_t w) nogil:
    return _mix((h + GOLD) ^ w)


def u64_lattice(seed, lane, cnp.ndarray[cnp.uint64_t, ndim=1] path,
                cnp.ndarray[cnp.uint64_t, ndim=1] step, int nwords):
    cdef uint64_t useed = <uint64_t> (seed & 0xFFFFFFFFFFFFFFFF)
    cdef uint64_t ulane = <uint64_t> (lane & 0xFFFFFFFFFFFFFFFF)
    cdef uint64_t c0 = _absorb(_absorb(_mix(SEED0), useed), ulane) + GOLD
    cdef Py_ssize_t n = path.shape[0]
    cdef cnp.ndarray[cnp.uint64_t, ndim=2] out = np.empty((n, nwords), dtype=np.uint64)
    cdef uint64_t h
    cdef Py_ssize_t i
    cdef int j
    with nogil:
        for i in range(n):
            h = _mix(c0 ^ path[i])
            h = _mix((h + GOLD) ^ step[i])
            h = h + GOLD
            for j in range(nwords):
                out[i, j] = _mix(h ^ (<uint64_t> j))
    return out

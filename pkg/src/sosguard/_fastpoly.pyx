# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernel for sparse polynomial products over packed exponent keys.

A monomial over at most 8 variables with per-variable exponents below 256
packs into one uint64 (8 bits per variable).  Because the packing is
positional base-256, multiplying monomials is integer addition of keys as
long as no byte overflows; callers guarantee that.  The product of two
term lists is then a multiset sum of key pairs, merged here with an
open-addressing hash table.
"""

from libc.stdlib cimport calloc, free, malloc

import numpy as np

ctypedef unsigned long long u64

cdef extern from *:
    """
    static inline unsigned long long sg_mix(unsigned long long k) {
        k ^= k >> 33;
        k *= 0xff51afd7ed558ccdULL;
        k ^= k >> 33;
        return k;
    }
    """
    u64 sg_mix(u64 k) nogil


def mul_packed(object keys_p, object coefs_p, object keys_q, object coefs_q):
    """Merge all pairwise term products; returns (keys, coefs) arrays.

    Zero coefficients are kept; the caller applies its own drop tolerance.
    """
    cdef u64[::1] kp = np.ascontiguousarray(keys_p, dtype=np.uint64)
    cdef double[::1] cp = np.ascontiguousarray(coefs_p, dtype=np.float64)
    cdef u64[::1] kq = np.ascontiguousarray(keys_q, dtype=np.uint64)
    cdef double[::1] cq = np.ascontiguousarray(coefs_q, dtype=np.float64)

    cdef Py_ssize_t np_ = kp.shape[0]
    cdef Py_ssize_t nq = kq.shape[0]
    if np_ == 0 or nq == 0:
        return (np.empty(0, dtype=np.uint64), np.empty(0, dtype=np.float64))

    # Table sized to keep load factor below 0.5.
    cdef Py_ssize_t cap = 16
    while cap < 2 * np_ * nq:
        cap <<= 1
    cdef u64 mask = <u64> (cap - 1)

    cdef u64* tkeys = <u64*> malloc(cap * sizeof(u64))
    cdef double* tvals = <double*> calloc(cap, sizeof(double))
    cdef char* used = <char*> calloc(cap, sizeof(char))
    if tkeys == NULL or tvals == NULL or used == NULL:
        free(tkeys)
        free(tvals)
        free(used)
        raise MemoryError()

    cdef Py_ssize_t i, j, slot, count = 0
    cdef u64 key
    cdef double ci, v
    with nogil:
        for i in range(np_):
            key = kp[i]
            ci = cp[i]
            for j in range(nq):
                v = ci * cq[j]
                slot = <Py_ssize_t> (sg_mix(key + kq[j]) & mask)
                while True:
                    if not used[slot]:
                        used[slot] = 1
                        tkeys[slot] = key + kq[j]
                        tvals[slot] = v
                        count += 1
                        break
                    if tkeys[slot] == key + kq[j]:
                        tvals[slot] += v
                        break
                    slot = (slot + 1) & mask

    out_keys = np.empty(count, dtype=np.uint64)
    out_vals = np.empty(count, dtype=np.float64)
    cdef u64[::1] ok = out_keys
    cdef double[::1] ov = out_vals
    cdef Py_ssize_t w = 0
    for slot in range(cap):
        if used[slot]:
            ok[w] = tkeys[slot]
            ov[w] = tvals[slot]
            w += 1
    free(tkeys)
    free(tvals)
    free(used)

    order = np.argsort(out_keys, kind="stable")
    return (out_keys[order], out_vals[order])

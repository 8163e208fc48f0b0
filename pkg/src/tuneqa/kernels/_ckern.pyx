# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled sequence kernels.

Same contracts as ``_pykern``. All outputs are integers computed by exact
counting, so results are identical to the pure backend on any input.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

ctypedef cnp.int64_t I64


def lcs_length(a, b):
    """Length of the longest common subsequence of two int sequences."""
    cdef cnp.ndarray[I64, ndim=1] av = np.ascontiguousarray(a, dtype=np.int64)
    cdef cnp.ndarray[I64, ndim=1] bv = np.ascontiguousarray(b, dtype=np.int64)
    cdef Py_ssize_t n = av.shape[0]
    cdef Py_ssize_t m = bv.shape[0]
    if n == 0 or m == 0:
        return 0
    cdef cnp.ndarray[I64, ndim=1] prev = np.zeros(m + 1, dtype=np.int64)
    cdef cnp.ndarray[I64, ndim=1] cur = np.zeros(m + 1, dtype=np.int64)
    cdef Py_ssize_t i, j
    cdef I64 ai, left, up
    for i in range(1, n + 1):
        ai = av[i - 1]
        cur[0] = 0
        for j in range(1, m + 1):
            if ai == bv[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                left = cur[j - 1]
                up = prev[j]
                cur[j] = left if left >= up else up
        prev, cur = cur, prev
    return int(prev[m])


def clipped_ngram_matches(cand, refs, int n):
    """Clipped n-gram matches of a candidate against one or more references.

    Returns ``(matches, total)``; see the pure backend for the definition.
    Uses position scans instead of hash counting to stay allocation-free.
    """
    if n <= 0:
        raise ValueError("n-gram order must be positive")
    cdef cnp.ndarray[I64, ndim=1] cv = np.ascontiguousarray(cand, dtype=np.int64)
    cdef Py_ssize_t total = cv.shape[0] - n + 1
    if total <= 0:
        return 0, 0
    ref_arrays = [np.ascontiguousarray(r, dtype=np.int64) for r in refs]
    cdef cnp.ndarray[I64, ndim=1] rv
    cdef Py_ssize_t i, j, k, ridx, span
    cdef I64 matches = 0, cand_count, best, ref_count
    cdef bint dup, eq
    for i in range(total):
        # count each distinct candidate n-gram once, at its first position
        dup = False
        for j in range(i):
            eq = True
            for k in range(n):
                if cv[i + k] != cv[j + k]:
                    eq = False
                    break
            if eq:
                dup = True
                break
        if dup:
            continue
        cand_count = 0
        for j in range(total):
            eq = True
            for k in range(n):
                if cv[i + k] != cv[j + k]:
                    eq = False
                    break
            if eq:
                cand_count += 1
        best = 0
        for ridx in range(len(ref_arrays)):
            rv = ref_arrays[ridx]
            span = rv.shape[0] - n + 1
            ref_count = 0
            for j in range(span):
                eq = True
                for k in range(n):
                    if cv[i + k] != rv[j + k]:
                        eq = False
                        break
                if eq:
                    ref_count += 1
            if ref_count > best:
                best = ref_count
        matches += cand_count if cand_count < best else best
    return int(matches), int(total)


def greedy_align(cand, ref):
    """Greedy exact-token alignment; returns ``(matches, chunks)``."""
    cdef cnp.ndarray[I64, ndim=1] cv = np.ascontiguousarray(cand, dtype=np.int64)
    cdef cnp.ndarray[I64, ndim=1] rv = np.ascontiguousarray(ref, dtype=np.int64)
    cdef Py_ssize_t nc = cv.shape[0]
    cdef Py_ssize_t nr = rv.shape[0]
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] taken = np.zeros(nr, dtype=np.uint8)
    cdef Py_ssize_t i, j
    cdef I64 matches = 0, chunks = 0
    cdef Py_ssize_t prev_c = -2, prev_r = -2
    for i in range(nc):
        for j in range(nr):
            if taken[j] == 0 and rv[j] == cv[i]:
                taken[j] = 1
                matches += 1
                if i != prev_c + 1 or j != prev_r + 1:
                    chunks += 1
                prev_c = i
                prev_r = j
                break
    return int(matches), int(chunks)

# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled string-distance kernels; mirrors ``_kernels_py`` exactly."""

from libc.stdlib cimport malloc, free


cdef Py_ssize_t _lev(unicode a, unicode b) except -1:
    cdef Py_ssize_t n = len(a), m = len(b), i, j, cost, best
    cdef Py_ssize_t *row
    cdef Py_ssize_t diag, tmp
    cdef Py_UCS4 ca
    if n < m:
        a, b = b, a
        n, m = m, n
    if m == 0:
        return n
    row = <Py_ssize_t *> malloc((m + 1) * sizeof(Py_ssize_t))
    if row == NULL:
        raise MemoryError()
    try:
        for j in range(m + 1):
            row[j] = j
        for i in range(1, n + 1):
            ca = a[i - 1]
            diag = row[0]
            row[0] = i
            for j in range(1, m + 1):
                cost = 0 if ca == b[j - 1] else 1
                best = row[j] + 1
                if row[j - 1] + 1 < best:
                    best = row[j - 1] + 1
                if diag + cost < best:
                    best = diag + cost
                diag = row[j]
                row[j] = best
        return row[m]
    finally:
        free(row)


def levenshtein(unicode a, unicode b):
    if a == b:
        return 0
    return _lev(a, b)


cdef int _ratio(unicode a, unicode b) except -1:
    cdef Py_ssize_t longest = max(len(a), len(b)), dist, score
    if longest == 0:
        return 100
    if a == b:
        return 100
    dist = _lev(a, b)
    if dist == 0:
        return 100
    score = (200 * (longest - dist) + longest) // (2 * longest)
    return 99 if score > 99 else <int> score


def ratio(unicode a, unicode b):
    return _ratio(a, b)


def max_ratio(unicode term, list candidates, int floor=0):
    cdef int best = 0, score
    cdef Py_ssize_t n = len(term), m, longest, upper
    cdef unicode cand
    for cand in candidates:
        m = len(cand)
        longest = n if n > m else m
        if longest == 0:
            return 100
        upper = (200 * (longest - (n - m if n > m else m - n)) + longest) // (2 * longest)
        if upper <= best or upper < floor:
            continue
        score = _ratio(term, cand)
        if score > best:
            best = score
            if best == 100:
                break
    return best

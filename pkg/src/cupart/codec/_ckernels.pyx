# cython: language_level=3
"""Compiled per-CTU RDO kernels; see ``_pykernels.py`` for the reference twin."""

import numpy as np
cimport numpy as cnp
from libc.math cimport log2
from libc.stdint cimport int64_t

cnp.import_array()

BACKEND = "cython"



cdef inline void _stats(const int[:, ::1] b, int x, int y, int size,
                        double *sse, double *sad) noexcept nogil:
    cdef int64_t n = size * size
    cdef int64_t s = 0, q = 0, v, nsad = 0, d
    cdef int i, j
    for i in range(y, y + size):
        for j in range(x, x + size):
            v = b[i, j]
            s += v
            q += v * v
    for i in range(y, y + size):
        for j in range(x, x + size):
            d = n * b[i, j] - s
            nsad += d if d >= 0 else -d
    sse[0] = <double>(n * q - s * s) / <double>n
    sad[0] = <double>nsad / <double>n


cdef inline double _leaf(const int[:, ::1] b, int x, int y, int size,
                         double lam, double header, double coef) noexcept nogil:
    cdef double sse, sad
    _stats(b, x, y, size, &sse, &sad)
    return sse + lam * (header + coef * log2(1.0 + sad))


cdef inline int _child_cell(int cell, int q) noexcept nogil:
    return 1 + q if cell == 0 else 5 + 4 * (cell - 1) + q


def cu_stats(const int[:, ::1] block, int x, int y, int size):
    cdef double sse, sad
    _stats(block, x, y, size, &sse, &sad)
    return sse, sad


def leaf_cost(const int[:, ::1] block, int x, int y, int size,
              double lam, double header, double coef):
    return _leaf(block, x, y, size, lam, header, coef)


cdef class _Ctx:
    cdef const int[:, ::1] b
    cdef const signed char[::1] dec
    cdef unsigned char best[21]
    cdef int count
    cdef double lam, header, flag, coef


cdef double _oracle_visit(_Ctx c, int cell, int x, int y, int size):
    cdef double jp = _leaf(c.b, x, y, size, c.lam, c.header, c.coef)
    cdef double js = 0.0, jc
    cdef int h = size // 2, q, cx, cy
    c.count += 1
    for q in range(4):
        cx = x + h * (q % 2)
        cy = y + h * (q // 2)
        if h == 8:
            jc = _leaf(c.b, cx, cy, h, c.lam, c.header, c.coef)
            c.count += 1
        else:
            jc = _oracle_visit(c, _child_cell(cell, q), cx, cy, h)
        js = jc if q == 0 else js + jc
    js = js + c.lam * c.flag
    if js < jp:
        c.best[cell] = 1
        return js
    return jp


cdef double _guided_children(_Ctx c, int cell, int x, int y, int size) except? -1.0:
    cdef double js = 0.0, jc
    cdef int h = size // 2, q, cx, cy
    for q in range(4):
        cx = x + h * (q % 2)
        cy = y + h * (q // 2)
        if h == 8:
            jc = _leaf(c.b, cx, cy, h, c.lam, c.header, c.coef)
            c.count += 1
        else:
            jc = _guided_visit(c, _child_cell(cell, q), cx, cy, h)
        js = jc if q == 0 else js + jc
    return js + c.lam * c.flag


cdef double _guided_visit(_Ctx c, int cell, int x, int y, int size) except? -1.0:
    cdef int d = c.dec[cell]
    cdef double jp, js
    if d < 0 or d > 2:
        raise ValueError(f"no usable decision for cell {cell}")
    if d == 0:
        c.count += 1
        return _leaf(c.b, x, y, size, c.lam, c.header, c.coef)
    if d == 1:
        c.best[cell] = 1
        return _guided_children(c, cell, x, y, size)
    jp = _leaf(c.b, x, y, size, c.lam, c.header, c.coef)
    c.count += 1
    js = _guided_children(c, cell, x, y, size)
    if js < jp:
        c.best[cell] = 1
        return js
    return jp


cdef object _canonical(_Ctx c):
    lab = np.full(21, 255, dtype=np.uint8)
    cdef unsigned char[::1] out = lab
    cdef int i, j
    out[0] = c.best[0]
    if out[0]:
        for i in range(4):
            out[1 + i] = c.best[1 + i]
            if out[1 + i]:
                for j in range(4):
                    out[5 + 4 * i + j] = c.best[5 + 4 * i + j]
    return lab


cdef _Ctx _make(block, double lam, double header, double flag, double coef):
    cdef _Ctx c = _Ctx()
    cdef int i
    c.b = block
    c.lam = lam
    c.header = header
    c.flag = flag
    c.coef = coef
    c.count = 0
    for i in range(21):
        c.best[i] = 0
    return c


def oracle_ctu(const int[:, ::1] block, double lam, double header, double flag, double coef):
    cdef _Ctx c = _make(block, lam, header, flag, coef)
    cdef double j = _oracle_visit(c, 0, 0, 0, 64)
    return j, _canonical(c), c.count


def guided_ctu(const int[:, ::1] block, decisions, double lam, double header,
               double flag, double coef):
    cdef _Ctx c = _make(block, lam, header, flag, coef)
    c.dec = np.ascontiguousarray(decisions, dtype=np.int8)
    cdef double j = _guided_visit(c, 0, 0, 0, 64)
    return j, _canonical(c), c.count

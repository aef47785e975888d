# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Semantics mirror ``_kernels_py`` exactly."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def scatter_add_rows(values, index, Py_ssize_t n_out):
    cdef Py_ssize_t n_rows, n_cols, r, c, dst
    cdef const double[:, ::1] fv
    cdef double[:, ::1] ov
    cdef const long long[::1] iv

    values = np.ascontiguousarray(values, dtype=np.float64)
    n_rows = values.shape[0]
    trailing = values.shape[1:]
    flat = np.ascontiguousarray(values.reshape(n_rows, int(np.prod(trailing))))
    idx = np.ascontiguousarray(index, dtype=np.int64)
    n_cols = flat.shape[1]
    out = np.zeros((n_out, n_cols), dtype=np.float64)
    fv = flat
    ov = out
    iv = idx
    for r in range(n_rows):
        dst = iv[r]
        if dst < 0 or dst >= n_out:
            raise IndexError("scatter index out of range")
        for c in range(n_cols):
            ov[dst, c] += fv[r, c]
    return out.reshape((n_out,) + tuple(trailing))


def radius_pairs(a, b, double eps):
    cdef const double[:, ::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef const double[:, ::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t n = av.shape[0], m = bv.shape[0], i, j
    cdef double dx, dy, dz, eps2 = eps * eps
    cdef list ii = [], jj = []
    for i in range(n):
        for j in range(m):
            dx = av[i, 0] - bv[j, 0]
            dy = av[i, 1] - bv[j, 1]
            dz = av[i, 2] - bv[j, 2]
            if dx * dx + dy * dy + dz * dz <= eps2:
                ii.append(i)
                jj.append(j)
    return np.stack([np.array(ii, dtype=np.int64), np.array(jj, dtype=np.int64)], axis=1)


def kendall_counts(x, y):
    cdef const double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], i, j
    cdef long long conc = 0, disc = 0, tx = 0, ty = 0, txy = 0
    cdef double dx, dy
    for i in range(n):
        for j in range(i + 1, n):
            dx = xv[j] - xv[i]
            dy = yv[j] - yv[i]
            if dx == 0:
                tx += 1
            if dy == 0:
                ty += 1
            if dx == 0 and dy == 0:
                txy += 1
            elif dx * dy > 0:
                conc += 1
            elif dx * dy < 0:
                disc += 1
    return int(conc), int(disc), int(tx), int(ty), int(txy)

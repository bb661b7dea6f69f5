# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled implementations of the hot evaluation kernels.

Mirrors ``py_kernels`` function for function; see that module for the
contracts. Kept in lockstep: the test suite asserts agreement of the two
lanes on random inputs.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, fabs, log1p

cnp.import_array()

BACKEND = "compiled"

cdef double LN10 = 2.302585092994045684
cdef double MAG_PER_LOG = 2.5 / 2.302585092994045684   # 2.5 / ln(10)
cdef double LOG_PER_MAG = 2.302585092994045684 / 2.5   # ln(10) / 2.5


cdef inline Py_ssize_t _bsearch(const double[::1] a, Py_ssize_t lo, Py_ssize_t hi, double v) noexcept nogil:
    # first index i in [lo, hi) with a[i] >= v (numpy searchsorted, side='left')
    cdef Py_ssize_t mid
    while lo < hi:
        mid = (lo + hi) // 2
        if a[mid] < v:
            lo = mid + 1
        else:
            hi = mid
    return lo


cdef int _bracket(const double[::1] grid, double v,
                  Py_ssize_t* lo, Py_ssize_t* hi, double* w) except -1:
    cdef Py_ssize_t n = grid.shape[0]
    cdef Py_ssize_t i
    if n == 1:
        if v != grid[0]:
            raise ValueError(f"value {v} outside single-point grid [{grid[0]}]")
        lo[0] = 0
        hi[0] = 0
        w[0] = 0.0
        return 0
    if v < grid[0] or v > grid[n - 1]:
        raise ValueError(f"value {v} outside grid [{grid[0]}, {grid[n - 1]}]")
    i = _bsearch(grid, 0, n, v)
    if i == 0:
        lo[0] = 0
        hi[0] = 1
        w[0] = 0.0
        return 0
    lo[0] = i - 1
    hi[0] = i
    w[0] = (v - grid[i - 1]) / (grid[i] - grid[i - 1])
    return 0


def predict_absolute(const double[::1] feh_grid, const double[::1] age_grid,
                     const cnp.int64_t[::1] cell_offset, const cnp.int64_t[::1] cell_len,
                     const double[::1] node_mass, const double[:, ::1] node_mag,
                     double feh, double age,
                     const double[::1] m1, const double[::1] r):
    cdef Py_ssize_t n = m1.shape[0]
    cdef Py_ssize_t nf = node_mag.shape[1]
    cdef Py_ssize_t n_age = age_grid.shape[0]

    cdef Py_ssize_t f0, f1, a0, a1
    cdef double wf = 0.0, wa = 0.0
    _bracket(feh_grid, feh, &f0, &f1, &wf)
    _bracket(age_grid, age, &a0, &a1, &wa)

    # Collapse the (<=4)-cell stencil to the cells with nonzero weight.
    cdef Py_ssize_t cells[4]
    cdef double weights[4]
    cdef int ncells = 0
    cdef Py_ssize_t fi, aj
    cdef double wff, waa, w
    for k in range(2):
        fi = f0 if k == 0 else f1
        wff = (1.0 - wf) if k == 0 else wf
        for l in range(2):
            aj = a0 if l == 0 else a1
            waa = (1.0 - wa) if l == 0 else wa
            w = wff * waa
            if w == 0.0:
                continue
            cells[ncells] = fi * n_age + aj
            weights[ncells] = w
            ncells += 1

    out_arr = np.empty((n, nf), dtype=np.float64)
    ok_arr = np.ones(n, dtype=np.uint8)
    cdef double[:, ::1] out = out_arr
    cdef cnp.uint8_t[::1] okv = ok_arr
    scratch_arr = np.zeros(2 * nf, dtype=np.float64)
    cdef double[::1] scratch = scratch_arr

    cdef Py_ssize_t i, j, c, off, length, pos, pos2
    cdef double mi, m2i, t, t2, a_, b_, mn, d
    cdef bint has2

    for i in range(n):
        mi = m1[i]
        has2 = r[i] > 0.0
        m2i = r[i] * mi
        for j in range(2 * nf):
            scratch[j] = 0.0
        for c in range(ncells):
            off = cell_offset[cells[c]]
            length = cell_len[cells[c]]
            w = weights[c]
            if mi > node_mass[off + length - 1]:
                okv[i] = 0
            pos = _bsearch(node_mass, off, off + length, mi)
            if pos <= off:
                pos = off + 1
            elif pos >= off + length:
                pos = off + length - 1
            t = (mi - node_mass[pos - 1]) / (node_mass[pos] - node_mass[pos - 1])
            for j in range(nf):
                scratch[j] = scratch[j] + w * (node_mag[pos - 1, j] + t * (node_mag[pos, j] - node_mag[pos - 1, j]))
            if has2:
                pos2 = _bsearch(node_mass, off, off + length, m2i)
                if pos2 <= off:
                    pos2 = off + 1
                elif pos2 >= off + length:
                    pos2 = off + length - 1
                t2 = (m2i - node_mass[pos2 - 1]) / (node_mass[pos2] - node_mass[pos2 - 1])
                for j in range(nf):
                    scratch[nf + j] = scratch[nf + j] + w * (node_mag[pos2 - 1, j] + t2 * (node_mag[pos2, j] - node_mag[pos2 - 1, j]))
        if has2:
            for j in range(nf):
                a_ = scratch[j]
                b_ = scratch[nf + j]
                mn = a_ if a_ < b_ else b_
                d = fabs(a_ - b_)
                out[i, j] = mn - MAG_PER_LOG * log1p(exp(-d * LOG_PER_MAG))
        else:
            for j in range(nf):
                out[i, j] = scratch[j]

    return out_arr, ok_arr.view(np.bool_)


def gauss_rows(const double[:, ::1] xfill, const double[:, ::1] inv2var,
               const double[::1] const_terms, const double[:, ::1] gabs,
               double dm, double av, const double[::1] kappa):
    cdef Py_ssize_t n = gabs.shape[0]
    cdef Py_ssize_t nf = gabs.shape[1]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double s, resid
    for i in range(n):
        s = 0.0
        for j in range(nf):
            resid = xfill[i, j] - (gabs[i, j] + dm + kappa[j] * av)
            s += inv2var[i, j] * resid * resid
        out[i] = const_terms[i] - s
    return out_arr

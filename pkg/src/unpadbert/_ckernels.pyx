# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Semantics must match ``_pykernels`` exactly."""
import numpy as np

cimport numpy as cnp

cnp.import_array()


def chunk_sumsq(const double[::1] buf, const cnp.int64_t[::1] starts, const cnp.int64_t[::1] stops):
    cdef Py_ssize_t n = starts.shape[0]
    out = np.zeros(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t c, i
    cdef double acc
    with nogil:
        for c in range(n):
            acc = 0.0
            for i in range(starts[c], stops[c]):
                acc = acc + buf[i] * buf[i]
            o[c] = acc
    return out


def scatter_accumulate(
    const double[:, ::1] grad,
    const cnp.int64_t[::1] indices,
    const cnp.int64_t[::1] order,
    int lane_width,
    double[:, ::1] out,
):
    cdef Py_ssize_t dim = grad.shape[1]
    cdef Py_ssize_t k, j, lane, p, row
    with nogil:
        for k in range(order.shape[0]):
            p = order[k]
            row = indices[p]
            j = 0
            while j < dim:
                for lane in range(lane_width):
                    out[row, j + lane] = out[row, j + lane] + grad[p, j + lane]
                j = j + lane_width


def segment_sum_sorted(
    const double[:, ::1] grad,
    const cnp.int64_t[::1] sorted_pos,
    const cnp.int64_t[::1] sorted_ids,
    double[:, ::1] out,
):
    cdef Py_ssize_t dim = grad.shape[1]
    cdef Py_ssize_t n = sorted_pos.shape[0]
    cdef Py_ssize_t seg_start = 0, seg_end, k, j, row, p
    with nogil:
        while seg_start < n:
            row = sorted_ids[seg_start]
            seg_end = seg_start
            while seg_end < n and sorted_ids[seg_end] == row:
                seg_end = seg_end + 1
            for k in range(seg_start, seg_end):
                p = sorted_pos[k]
                for j in range(dim):
                    out[row, j] = out[row, j] + grad[p, j]
            seg_start = seg_end

"""numpy implementations of the compiled kernels, used when the extension is absent."""
import numpy as np


def chunk_sumsq(buf, starts, stops):
    out = np.zeros(len(starts), dtype=np.float64)
    for c, (lo, hi) in enumerate(zip(starts, stops)):
        piece = buf[lo:hi]
        out[c] = np.dot(piece, piece)
    return out


def scatter_accumulate(grad, indices, order, lane_width, out):
    # np.add.at applies updates in the given order, element by element, so
    # per-row accumulation order matches the compiled loop; lane grouping does
    # not change which scalar additions happen.
    if len(order):
        np.add.at(out, indices[order], grad[order])


def segment_sum_sorted(grad, sorted_pos, sorted_ids, out):
    # sorted_ids is grouped, so in-order accumulation is a per-segment running sum
    if len(sorted_pos):
        np.add.at(out, sorted_ids, grad[sorted_pos])

"""NumPy implementations of the compiled kernels (same outputs, same order)."""

import numpy as np


def dropout_forward(h, sigma, eps):
    return h * (1.0 + np.sqrt(sigma) * eps)


def dropout_backward(g, h, sigma, eps):
    sd = np.sqrt(sigma)
    dh = g * (1.0 + sd * eps)
    with np.errstate(divide="ignore", invalid="ignore"):
        ds = np.where(sd > 0.0, g * h * eps * (0.5 / sd), 0.0)
    return dh, ds


def enumerate_paths(n_inputs, total, indptr, indptr_off, dst, weight, gate):
    n_stages = len(indptr_off) - 1
    src = np.arange(n_inputs, dtype=np.int64)
    unit = src.copy()
    w = np.ones(n_inputs)
    g = np.ones(n_inputs, dtype=np.uint8)
    for s in range(n_stages):
        ptr = indptr[indptr_off[s] : indptr_off[s + 1]]
        first = ptr[unit]
        counts = ptr[unit + 1] - first
        parent = np.repeat(np.arange(unit.size), counts)
        # offset of each expanded row within its parent's edge block
        starts = np.cumsum(counts) - counts
        edge = first[parent] + (np.arange(parent.size) - starts[parent])
        src = src[parent]
        w = w[parent] * weight[edge]
        g = g[parent] & gate[edge]
        unit = dst[edge]
    assert src.size == total
    return src, unit.astype(np.int64), w, g.astype(np.uint8)

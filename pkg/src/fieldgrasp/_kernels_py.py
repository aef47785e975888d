"""Pure numpy/scipy versions of the hot kernels.

These are the reference fallback for :mod:`fieldgrasp._kernels`; both must
produce bit-identical results (summation in ascending source-row order).
"""
import numpy as np
import scipy.sparse as sp


def scatter_add_rows(values, index, n_out):
    """Sum rows of ``values`` into ``n_out`` buckets given by ``index``.

    Rows are accumulated in ascending row order for every bucket.
    """
    values = np.ascontiguousarray(values, dtype=np.float64)
    index = np.ascontiguousarray(index, dtype=np.int64)
    n_rows = values.shape[0]
    if n_rows == 0:
        return np.zeros((n_out,) + values.shape[1:], dtype=np.float64)
    flat = values.reshape(n_rows, -1)
    # csr rows come out with column (= source row) indices sorted ascending
    op = sp.csr_matrix(
        (np.ones(n_rows), (index, np.arange(n_rows))), shape=(n_out, n_rows)
    )
    op.sum_duplicates()
    out = np.asarray(op @ flat)
    return out.reshape((n_out,) + values.shape[1:])


def radius_pairs(a, b, eps):
    """All index pairs (i, j) with ``|a[i] - b[j]| <= eps``, row-major order."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = a[:, None, :] - b[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    i, j = np.nonzero(d2 <= eps * eps)
    return np.stack([i, j], axis=1).astype(np.int64)


def kendall_counts(x, y):
    """Pair counts for Kendall's tau.

    Returns ``(concordant, discordant, ties_x, ties_y, ties_both)`` where the
    tie counts include pairs tied in both lists.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    sx = np.sign(x[ju] - x[iu])
    sy = np.sign(y[ju] - y[iu])
    prod = sx * sy
    conc = int(np.count_nonzero(prod > 0))
    disc = int(np.count_nonzero(prod < 0))
    tx = int(np.count_nonzero(sx == 0))
    ty = int(np.count_nonzero(sy == 0))
    txy = int(np.count_nonzero((sx == 0) & (sy == 0)))
    return conc, disc, tx, ty, txy

"""Pure numpy Max-Min kernels (fallback when the compiled extension is absent)."""

import numpy as np


def maxmin_select(values, s):
    """Per-column top-``s`` (descending) and bottom-``s`` (ascending) of ``values``.

    ``values`` is ``(batch, n, c)``.  Returns ``(selected, index)``, both
    ``(batch, 2s, c)``; ``index`` holds the source row of every selected entry.
    Ties go to the lowest row index.
    """
    values = np.ascontiguousarray(values, dtype=np.float64)
    top = np.argsort(-values, axis=1, kind="stable")[:, :s, :]
    bottom = np.argsort(values, axis=1, kind="stable")[:, :s, :]
    index = np.concatenate([top, bottom], axis=1).astype(np.int64)
    return np.take_along_axis(values, index, axis=1), index


def maxmin_scatter(grad_selected, index, n):
    """Adjoint of :func:`maxmin_select`: route gradients back to source rows."""
    batch, _, c = grad_selected.shape
    out = np.zeros((batch, n, c))
    b = np.arange(batch)[:, None, None]
    j = np.arange(c)[None, None, :]
    np.add.at(out, (b, index, j), grad_selected)
    return out

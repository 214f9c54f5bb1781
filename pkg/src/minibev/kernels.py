"""Scatter-add kernels with compiled/pure-python backend selection.

The compiled Cython extension (minibev._ckern) is preferred; if it is not
importable (no compiler at install time) or MINIBEV_PURE=1 is set, the
numpy fallback below is used. Both backends accumulate in input order, so
their outputs are bit-identical; `minibev.bench` measures the speed gap.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "BACKEND",
    "scatter_rows",
    "scatter_rows_weighted",
    "numpy_scatter_rows",
    "numpy_scatter_rows_weighted",
]


def numpy_scatter_rows(idx: np.ndarray, vals: np.ndarray, n_rows: int) -> np.ndarray:
    """out[idx[i], :] += vals[i, :] for every i; rows with idx < 0 are dropped.

    np.bincount accumulates weights in input order per bin, matching the
    compiled kernel exactly. One bincount pass per channel.
    """
    if idx.shape[0] != vals.shape[0]:
        raise ValueError(f"scatter_rows: idx has {idx.shape[0]} rows, vals has {vals.shape[0]}")
    keep = idx >= 0
    if not keep.all():
        idx = idx[keep]
        vals = vals[keep]
    if idx.size and int(idx.max()) >= n_rows:
        raise IndexError(f"scatter_rows: index {int(idx.max())} out of range for {n_rows} rows")
    out = np.empty((n_rows, vals.shape[1]), dtype=np.float64)
    for c in range(vals.shape[1]):
        out[:, c] = np.bincount(idx, weights=vals[:, c], minlength=n_rows)
    return out


def numpy_scatter_rows_weighted(
    idx: np.ndarray, vals: np.ndarray, w: np.ndarray, n_rows: int
) -> np.ndarray:
    """out[idx[i], :] += w[i] * vals[i, :]; rows with idx < 0 are dropped."""
    if idx.shape[0] != vals.shape[0] or w.shape[0] != idx.shape[0]:
        raise ValueError("scatter_rows_weighted: idx/vals/w length mismatch")
    return numpy_scatter_rows(idx, vals * w[:, None], n_rows)


if os.environ.get("MINIBEV_PURE", "") == "1":
    _ckern = None
else:
    try:
        from minibev import _ckern  # type: ignore[attr-defined]
    except ImportError:
        _ckern = None

if _ckern is not None:
    BACKEND = "cython"

    def scatter_rows(idx: np.ndarray, vals: np.ndarray, n_rows: int) -> np.ndarray:
        return _ckern.scatter_rows(
            np.ascontiguousarray(idx, dtype=np.int64),
            np.ascontiguousarray(vals, dtype=np.float64),
            n_rows,
        )

    def scatter_rows_weighted(
        idx: np.ndarray, vals: np.ndarray, w: np.ndarray, n_rows: int
    ) -> np.ndarray:
        return _ckern.scatter_rows_weighted(
            np.ascontiguousarray(idx, dtype=np.int64),
            np.ascontiguousarray(vals, dtype=np.float64),
            np.ascontiguousarray(w, dtype=np.float64),
            n_rows,
        )

else:
    BACKEND = "numpy"
    scatter_rows = numpy_scatter_rows
    scatter_rows_weighted = numpy_scatter_rows_weighted

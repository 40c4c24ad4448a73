"""Hot inner loops with a compiled core and a numpy fallback.

The compiled extension ``physio_recon._fastkern`` is selected at import time
when available; setting the environment variable ``PHYSIO_RECON_PURE=1``
forces the numpy implementations. Gather/scatter accumulate in the same order
on both backends (ascending window index, ascending in-window position), so
those results are bitwise identical; windowed_std agrees to rounding error.
"""

from __future__ import annotations

import os

import numpy as np

try:
    if os.environ.get("PHYSIO_RECON_PURE", "") not in ("", "0"):
        raise ImportError("pure-python backend forced by PHYSIO_RECON_PURE")
    from physio_recon import _fastkern

    BACKEND = "compiled"
except ImportError:
    _fastkern = None
    BACKEND = "numpy"


def gather_windows(x: np.ndarray, starts: np.ndarray, window: int) -> np.ndarray:
    """Stack slices x[s:s+window] for each start into an (n_windows, window, d) array."""
    starts = np.ascontiguousarray(starts, dtype=np.int64)
    out = np.empty((len(starts), window, x.shape[1]), dtype=x.dtype)
    if _fastkern is not None and x.dtype in (np.float32, np.float64):
        _fastkern.gather_windows(np.ascontiguousarray(x), starts, window, out)
    else:
        for w, s in enumerate(starts):
            out[w] = x[s : s + window]
    return out


def scatter_add_windows(feats: np.ndarray, starts: np.ndarray, length: int) -> np.ndarray:
    """Add each (window, d) block of feats into a (length, d) array at its start offset."""
    starts = np.ascontiguousarray(starts, dtype=np.int64)
    out = np.zeros((length, feats.shape[2]), dtype=feats.dtype)
    if _fastkern is not None and feats.dtype in (np.float32, np.float64):
        _fastkern.scatter_add_windows(np.ascontiguousarray(feats), starts, out)
    else:
        window = feats.shape[1]
        for w, s in enumerate(starts):
            out[s : s + window] += feats[w]
    return out


def window_counts(starts: np.ndarray, window: int, length: int) -> np.ndarray:
    """Number of windows covering each of the `length` positions."""
    counts = np.zeros(length, dtype=np.int64)
    for s in starts:
        counts[s : s + window] += 1
    return counts


def windowed_std(values: np.ndarray, starts: np.ndarray, stops: np.ndarray) -> np.ndarray:
    """Population std of values[starts[k]:stops[k]] for each window k."""
    values = np.ascontiguousarray(values, dtype=np.float64)
    starts = np.ascontiguousarray(starts, dtype=np.int64)
    stops = np.ascontiguousarray(stops, dtype=np.int64)
    out = np.empty(len(starts), dtype=np.float64)
    if _fastkern is not None:
        _fastkern.windowed_std(values, starts, stops, out)
    else:
        for k in range(len(starts)):
            seg = values[starts[k] : stops[k]]
            mean = seg.sum() / len(seg)
            dev = seg - mean
            out[k] = np.sqrt((dev * dev).sum() / len(seg))
    return out

"""Small dense-array primitives shared by the model and loss code.

Arrays are plain ``numpy.ndarray`` objects of dtype float64; these helpers add
the argument checking and numerical guards the rest of the package relies on.
"""

from __future__ import annotations

import numpy as np

NORM_EPS = 1e-12


class NumericError(ValueError):
    """Raised when an array is empty, mis-shaped or non-finite."""


def as_array(x, ndim: int | None = None) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.size == 0:
        raise NumericError("empty tensor")
    if ndim is not None and a.ndim != ndim:
        raise NumericError(f"expected {ndim}-d array, got shape {a.shape}")
    return a


def check_finite(a: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite values in {what}")
    return a


def softmax_rows(logits) -> np.ndarray:
    """Row-wise softmax of an ``R x C`` array, stabilised by max-subtraction."""
    z = as_array(logits, ndim=2)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def l2_normalize(v, axis: int = -1) -> np.ndarray:
    """``v / max(||v||, eps)`` along ``axis``; the zero vector maps to itself."""
    a = as_array(v)
    n = np.sqrt(np.sum(a * a, axis=axis, keepdims=True))
    return a / np.maximum(n, NORM_EPS)


def argmax_with_conf(probs) -> tuple[np.ndarray, np.ndarray]:
    """Per-row argmax (lowest index on ties) and the attained maximum."""
    p = as_array(probs, ndim=2)
    labels = np.argmax(p, axis=1)  # numpy returns the first maximal index
    conf = p[np.arange(p.shape[0]), labels]
    return labels.astype(np.int64), conf

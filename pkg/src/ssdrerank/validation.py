"""Input validation helpers.

Thin wrappers over :func:`sklearn.utils.check_array` that coerce to the
package's storage dtype (C-contiguous float32) and translate sklearn's
``ValueError`` into :class:`~ssdrerank.exceptions.InvalidInputError`.
"""

from __future__ import annotations

import math
import numbers

import numpy as np
from sklearn.utils import check_array

from .exceptions import InvalidInputError


def check_matrix(X, name="X", n_cols=None, min_rows=1):
    """Return ``X`` as a finite, C-contiguous float32 matrix.

    Parameters
    ----------
    X : array-like of shape (n_rows, n_cols)
    name : str
        Used in error messages.
    n_cols : int, optional
        Required column count.
    min_rows : int, default=1
        Minimum accepted row count; 0 admits empty matrices.
    """
    try:
        arr = check_array(
            X,
            dtype=np.float32,
            order="C",
            ensure_all_finite=True,
            ensure_min_samples=min_rows,
            ensure_min_features=1,
            input_name=name,
        )
    except ValueError as exc:
        raise InvalidInputError(f"{name}: {exc}") from exc
    if n_cols is not None and arr.shape[1] != n_cols:
        raise InvalidInputError(
            f"{name}: expected {n_cols} columns, got {arr.shape[1]}"
        )
    return arr


def check_vector(x, name="x", size=None):
    """Return ``x`` as a finite, contiguous 1-D float32 array."""
    try:
        arr = check_array(
            x,
            dtype=np.float32,
            order="C",
            ensure_2d=False,
            ensure_all_finite=True,
            ensure_min_samples=1,
            input_name=name,
        )
    except ValueError as exc:
        raise InvalidInputError(f"{name}: {exc}") from exc
    if arr.ndim != 1:
        raise InvalidInputError(f"{name}: expected a 1-D vector, got shape {arr.shape}")
    if size is not None and arr.shape[0] != size:
        raise InvalidInputError(f"{name}: expected length {size}, got {arr.shape[0]}")
    return arr


def check_int(value, name, minimum=None, maximum=None):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise InvalidInputError(f"{name} must be an integer, got {value!r}")
    value = int(value)
    if minimum is not None and value < minimum:
        raise InvalidInputError(f"{name} must be >= {minimum}, got {value}")
    if maximum is not None and value > maximum:
        raise InvalidInputError(f"{name} must be <= {maximum}, got {value}")
    return value


def check_finite(value, name):
    if isinstance(value, bool) or not isinstance(value, numbers.Real):
        raise InvalidInputError(f"{name} must be a real number, got {value!r}")
    if not math.isfinite(value):
        raise InvalidInputError(f"{name} must be finite, got {value!r}")
    return value


def check_doc_ids(ids, name="doc_ids"):
    """Return ``ids`` as a 1-D uint64 array; rejects negatives and non-integers."""
    arr = np.asarray(ids)
    if arr.ndim != 1:
        raise InvalidInputError(f"{name}: expected 1-D, got shape {arr.shape}")
    if arr.size == 0:
        return arr.astype(np.uint64)
    if not np.issubdtype(arr.dtype, np.integer):
        raise InvalidInputError(f"{name}: expected integer ids, got dtype {arr.dtype}")
    if np.issubdtype(arr.dtype, np.signedinteger) and (arr < 0).any():
        raise InvalidInputError(f"{name}: ids must be non-negative")
    return arr.astype(np.uint64)

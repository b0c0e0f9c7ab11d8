"""Dense numeric kernels shared by every other module.

The matrix product has a compiled (Cython) implementation and a pure-numpy
one. Both accumulate in the same fixed order, so results are bitwise
identical regardless of which is active. The compiled backend is preferred
when it imported cleanly; set XBT_KERNELS=py or XBT_KERNELS=c to force one.
"""

import os
from contextlib import contextmanager

import numpy as np

from . import _py

try:
    from . import _matmul_c
except ImportError:
    _matmul_c = None

_FORCED = os.environ.get("XBT_KERNELS", "auto")
if _FORCED not in ("auto", "c", "py"):
    raise RuntimeError(f"XBT_KERNELS must be auto, c or py, got {_FORCED!r}")
if _FORCED == "c" and _matmul_c is None:
    raise RuntimeError("XBT_KERNELS=c but the compiled kernel is not built")

_ACTIVE = "py" if (_FORCED == "py" or _matmul_c is None) else "c"

SUPPORTED_DTYPES = (np.float32, np.float64)


def active_backend() -> str:
    """Name of the matmul backend in use: 'c' or 'py'."""
    return _ACTIVE


@contextmanager
def use_backend(name: str):
    """Temporarily switch the active backend; for benchmarks and tests."""
    global _ACTIVE
    if name not in ("c", "py"):
        raise ValueError(f"backend must be c or py, got {name!r}")
    if name == "c" and _matmul_c is None:
        raise RuntimeError("compiled kernel is not built")
    prev = _ACTIVE
    _ACTIVE = name
    try:
        yield
    finally:
        _ACTIVE = prev


def _check_matrix(m: np.ndarray, name: str) -> None:
    if not isinstance(m, np.ndarray) or m.ndim != 2:
        raise ValueError(f"{name} must be a 2-d ndarray")
    if m.dtype.type not in SUPPORTED_DTYPES:
        raise ValueError(f"{name} must be float32 or float64, got {m.dtype}")


def matmul(a: np.ndarray, b: np.ndarray, backend: str | None = None) -> np.ndarray:
    """Matrix product with a fixed (ascending-k) accumulation order."""
    _check_matrix(a, "a")
    _check_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise ValueError(f"matmul dtype mismatch: {a.dtype} vs {b.dtype}")
    out = np.empty((a.shape[0], b.shape[1]), dtype=a.dtype)
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b)
    which = backend or _ACTIVE
    if which == "c":
        _matmul_c.matmul_into(a, b, out)
    else:
        _py.matmul_into(a, b, out)
    return out


def l2_normalize_rows(m: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Divide each row by max(norm, eps); an all-zero row stays all-zero."""
    _check_matrix(m, "m")
    if eps <= 0:
        raise ValueError("eps must be positive")
    norms = np.sqrt(np.sum(m * m, axis=1, keepdims=True))
    return m / np.maximum(norms, m.dtype.type(eps))


def cosine_similarity(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    """All-pairs dot products q @ g.T; inputs are assumed row-normalized."""
    _check_matrix(q, "q")
    _check_matrix(g, "g")
    if q.shape[1] != g.shape[1]:
        raise ValueError(f"cosine dim mismatch: {q.shape[1]} vs {g.shape[1]}")
    return matmul(q, np.ascontiguousarray(g.T))


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Per row, indices of the k largest scores, descending.

    Ties break toward the lower index (stable), which keeps retrieval
    results reproducible across runs and backends.
    """
    _check_matrix(scores, "scores")
    if not 1 <= k <= scores.shape[1]:
        raise ValueError(f"k={k} out of range for {scores.shape[1]} columns")
    order = np.argsort(-scores, axis=1, kind="stable")
    return order[:, :k]

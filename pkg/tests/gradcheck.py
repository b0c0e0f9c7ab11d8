"""Shared finite-difference machinery for gradient tests.

Central differences in float64 with h=1e-5; relative error is measured
against the largest finite-difference entry so near-zero coordinates do
not blow it up.
"""

import numpy as np

H = 1e-5
TOL = 1e-4


def finite_diff(f, x: np.ndarray, h: float = H) -> np.ndarray:
    """Central-difference gradient of scalar f() w.r.t. array x, mutated in
    place coordinate by coordinate."""
    assert x.dtype == np.float64
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_err(analytic: np.ndarray, fd: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(fd))), 1e-10)
    return float(np.max(np.abs(analytic - fd))) / scale


def normalized_rows(rng: np.random.Generator, n: int, d: int, dtype=np.float64) -> np.ndarray:
    m = rng.standard_normal((n, d)).astype(dtype)
    return m / np.linalg.norm(m, axis=1, keepdims=True)

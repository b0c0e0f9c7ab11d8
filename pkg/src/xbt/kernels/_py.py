"""Pure-numpy matmul backend.

Accumulates over the shared dimension in ascending order, one rank-1 update
per step, so each output element sees the exact same sequence of rounded
multiply-then-add operations as the compiled kernel and a naive triple loop.
"""

import numpy as np


def matmul_into(a: np.ndarray, b: np.ndarray, out: np.ndarray) -> None:
    out[...] = 0
    tmp = np.empty_like(out)
    for k in range(a.shape[1]):
        np.multiply(a[:, k, None], b[k, None, :], out=tmp)
        out += tmp

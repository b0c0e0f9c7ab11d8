# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled matrix-product kernel.

Accumulation over the shared dimension runs in ascending k order for every
output element, starting from zero, in the storage dtype. Together with the
-ffp-contract=off build flag this makes the result bitwise identical to the
pure-python backend and to a naive triple loop.
"""

ctypedef fused real:
    float
    double


def matmul_into(real[:, ::1] a, real[:, ::1] b, real[:, ::1] out):
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t kdim = a.shape[1]
    cdef Py_ssize_t m = b.shape[1]
    cdef Py_ssize_t i, j, k
    cdef real aik
    for i in range(n):
        for j in range(m):
            out[i, j] = 0
        for k in range(kdim):
            aik = a[i, k]
            for j in range(m):
                out[i, j] = out[i, j] + aik * b[k, j]

"""Differentiable building blocks and the projection module.

Forward passes return an output plus a tape (whatever the backward pass
needs); backward passes consume the upstream gradient and the tape and
return analytic gradients. Everything is plain numpy, dtype-preserving,
and deterministic, so float64 inputs give gradients tight enough for
finite-difference verification.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from . import kernels

SQRT2 = math.sqrt(2.0)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

HIDDEN_MULTIPLE = 4  # hidden width of the projection, times its output dim
DEFAULT_LN_EPS = 1e-5


@dataclass
class LinearParams:
    weight: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)


@dataclass
class LayerNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = DEFAULT_LN_EPS


@dataclass
class ProjectionParams:
    """Three linear layers interleaved with layer norm and GELU."""

    lin1: LinearParams
    ln1: LayerNormParams
    lin2: LinearParams
    ln2: LayerNormParams
    lin3: LinearParams

    @property
    def d_new(self) -> int:
        return self.lin1.weight.shape[1]

    @property
    def d_old(self) -> int:
        return self.lin3.weight.shape[0]

    @property
    def hidden(self) -> int:
        return self.lin1.weight.shape[0]

    def flat(self) -> dict[str, np.ndarray]:
        """Live views of all parameters, keyed by dotted names."""
        return {
            "lin1.weight": self.lin1.weight,
            "lin1.bias": self.lin1.bias,
            "ln1.gamma": self.ln1.gamma,
            "ln1.beta": self.ln1.beta,
            "lin2.weight": self.lin2.weight,
            "lin2.bias": self.lin2.bias,
            "ln2.gamma": self.ln2.gamma,
            "ln2.beta": self.ln2.beta,
            "lin3.weight": self.lin3.weight,
            "lin3.bias": self.lin3.bias,
        }

    def copy(self) -> "ProjectionParams":
        return ProjectionParams(
            lin1=LinearParams(self.lin1.weight.copy(), self.lin1.bias.copy()),
            ln1=LayerNormParams(self.ln1.gamma.copy(), self.ln1.beta.copy(), self.ln1.eps),
            lin2=LinearParams(self.lin2.weight.copy(), self.lin2.bias.copy()),
            ln2=LayerNormParams(self.ln2.gamma.copy(), self.ln2.beta.copy(), self.ln2.eps),
            lin3=LinearParams(self.lin3.weight.copy(), self.lin3.bias.copy()),
        )


def gelu(x: np.ndarray) -> np.ndarray:
    """x * Phi(x) with the exact (erf-based) standard-normal CDF."""
    return x * (0.5 * (1.0 + erf(x / SQRT2)))


def gelu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / SQRT2))
    pdf = INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return upstream * (cdf + x * pdf)


def linear_forward(x: np.ndarray, p: LinearParams):
    if x.shape[1] != p.weight.shape[1]:
        raise ValueError(f"linear expects {p.weight.shape[1]} columns, got {x.shape[1]}")
    y = kernels.matmul(x, np.ascontiguousarray(p.weight.T)) + p.bias
    return y, (x, p.weight)


def linear_backward(dy: np.ndarray, cache):
    x, weight = cache
    dx = kernels.matmul(dy, weight)
    dw = kernels.matmul(np.ascontiguousarray(dy.T), x)
    db = dy.sum(axis=0)
    return dx, dw, db


def layer_norm_forward(x: np.ndarray, p: LayerNormParams):
    if x.shape[1] != p.gamma.shape[0]:
        raise ValueError(f"layer norm expects {p.gamma.shape[0]} columns, got {x.shape[1]}")
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)  # biased
    inv = 1.0 / np.sqrt(var + p.eps)
    xhat = xc * inv
    y = p.gamma * xhat + p.beta
    return y, (xhat, inv, p.gamma)


def layer_norm_backward(dy: np.ndarray, cache):
    xhat, inv, gamma = cache
    dbeta = dy.sum(axis=0)
    dgamma = (dy * xhat).sum(axis=0)
    dxhat = dy * gamma
    dx = inv * (
        dxhat
        - dxhat.mean(axis=1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
    )
    return dx, dgamma, dbeta


def normalize_rows_forward(x: np.ndarray, eps: float = 1e-12):
    norms = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
    denom = np.maximum(norms, x.dtype.type(eps))
    y = x / denom
    return y, (y, denom, norms > eps)


def normalize_rows_backward(dy: np.ndarray, cache) -> np.ndarray:
    y, denom, live = cache
    # rows at the eps floor have a constant denominator, so no projection term
    proj = np.sum(dy * y, axis=1, keepdims=True)
    return (dy - y * proj * live) / denom


def phi_init(d_new: int, d_old: int, seed: int, dtype=np.float32) -> ProjectionParams:
    """Fresh projection parameters: uniform +-1/sqrt(fan_in) weights, zero
    biases, unit gains. Deterministic per seed."""
    if d_new < 1 or d_old < 1:
        raise ValueError("embedding dims must be >= 1")
    rng = np.random.default_rng(seed)
    h = HIDDEN_MULTIPLE * d_old

    def lin(out_dim, in_dim):
        bound = 1.0 / math.sqrt(in_dim)
        w = rng.uniform(-bound, bound, size=(out_dim, in_dim)).astype(dtype)
        return LinearParams(weight=w, bias=np.zeros(out_dim, dtype=dtype))

    def ln(dim):
        return LayerNormParams(gamma=np.ones(dim, dtype=dtype), beta=np.zeros(dim, dtype=dtype))

    return ProjectionParams(
        lin1=lin(h, d_new), ln1=ln(h), lin2=lin(h, h), ln2=ln(h), lin3=lin(d_old, h)
    )


def phi_forward(params: ProjectionParams, x: np.ndarray, normalize_output: bool = True):
    """Project new-model embeddings into the old model's space.

    Rows of the output are unit-normalized unless normalize_output is off
    (losses and retrieval assume unit vectors throughout).
    """
    h1, c_lin1 = linear_forward(x, params.lin1)
    n1, c_ln1 = layer_norm_forward(h1, params.ln1)
    g1 = gelu(n1)
    h2, c_lin2 = linear_forward(g1, params.lin2)
    n2, c_ln2 = layer_norm_forward(h2, params.ln2)
    g2 = gelu(n2)
    out, c_lin3 = linear_forward(g2, params.lin3)
    c_norm = None
    if normalize_output:
        out, c_norm = normalize_rows_forward(out)
    return out, (c_lin1, c_ln1, n1, c_lin2, c_ln2, n2, c_lin3, c_norm)


def phi_backward(dy: np.ndarray, cache):
    """Gradients of a projection forward pass.

    Returns (d_input, grads) where grads is keyed like ProjectionParams.flat().
    """
    c_lin1, c_ln1, n1, c_lin2, c_ln2, n2, c_lin3, c_norm = cache
    if c_norm is not None:
        dy = normalize_rows_backward(dy, c_norm)
    dg2, dw3, db3 = linear_backward(dy, c_lin3)
    dn2 = gelu_backward(n2, dg2)
    dh2, dgamma2, dbeta2 = layer_norm_backward(dn2, c_ln2)
    dg1, dw2, db2 = linear_backward(dh2, c_lin2)
    dn1 = gelu_backward(n1, dg1)
    dh1, dgamma1, dbeta1 = layer_norm_backward(dn1, c_ln1)
    dx, dw1, db1 = linear_backward(dh1, c_lin1)
    grads = {
        "lin1.weight": dw1,
        "lin1.bias": db1,
        "ln1.gamma": dgamma1,
        "ln1.beta": dbeta1,
        "lin2.weight": dw2,
        "lin2.bias": db2,
        "ln2.gamma": dgamma2,
        "ln2.beta": dbeta2,
        "lin3.weight": dw3,
        "lin3.bias": db3,
    }
    return dx, grads

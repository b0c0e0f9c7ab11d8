"""Low-rank residual adapters on embeddings.

The adapter adds (alpha/rank) * (e @ a.T) @ b.T to an embedding batch and
renormalizes. b starts at zero, so a fresh adapter is exactly the identity
and removing it restores the unmodified model's behavior.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .layers import normalize_rows_backward, normalize_rows_forward


@dataclass
class LoraAdapter:
    a: np.ndarray  # (rank, dim)
    b: np.ndarray  # (dim, rank)
    alpha: float
    rank: int
    dropout_p: float = 0.0
    seed: int = 0

    @property
    def dim(self) -> int:
        return self.a.shape[1]

    def flat(self) -> dict[str, np.ndarray]:
        return {"a": self.a, "b": self.b}

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(
            a=self.a.copy(), b=self.b.copy(), alpha=self.alpha,
            rank=self.rank, dropout_p=self.dropout_p, seed=self.seed,
        )


def lora_init(
    d: int, r: int, alpha: float, seed: int, dropout_p: float = 0.0, dtype=np.float32
) -> LoraAdapter:
    """a ~ N(0, 1/r), b = 0; identity behavior until b moves."""
    if not 1 <= r <= d:
        raise ValueError(f"rank must be in [1, {d}], got {r}")
    if not 0 <= dropout_p < 1:
        raise ValueError("dropout_p must be in [0, 1)")
    rng = np.random.default_rng(seed)
    a = (rng.standard_normal((r, d)) / np.sqrt(r)).astype(dtype)
    b = np.zeros((d, r), dtype=dtype)
    return LoraAdapter(a=a, b=b, alpha=alpha, rank=r, dropout_p=dropout_p, seed=seed)


def lora_apply(
    ad: LoraAdapter,
    e: np.ndarray,
    training: bool,
    rng: np.random.Generator | None = None,
):
    """Apply the adapter to a row-normalized batch; returns (output, tape).

    Inference on an untouched adapter (b still zero) short-circuits to the
    input itself, which keeps adapter-off retrieval bitwise identical to
    the raw model. Training always takes the full differentiable path.
    """
    if e.shape[1] != ad.dim:
        raise ValueError(f"adapter expects {ad.dim} columns, got {e.shape[1]}")
    if not training and not ad.b.any():
        return e, ("identity",)
    u = kernels.matmul(e, np.ascontiguousarray(ad.a.T))  # (n, r)
    scale = ad.alpha / ad.rank
    delta = scale * kernels.matmul(u, np.ascontiguousarray(ad.b.T))
    mask = None
    if training and ad.dropout_p > 0:
        if rng is None:
            rng = np.random.default_rng(ad.seed)
        keep = (rng.random(delta.shape) >= ad.dropout_p).astype(e.dtype)
        mask = keep / (1.0 - ad.dropout_p)
        delta = delta * mask
    out, norm_cache = normalize_rows_forward(e + delta)
    return out, (ad, e, u, mask, norm_cache)


def lora_backward(dout: np.ndarray, cache):
    """Gradients (da, db, de) of a training-mode lora_apply."""
    if cache[0] == "identity":
        raise RuntimeError("cannot backprop through an inference-mode identity apply")
    ad, e, u, mask, norm_cache = cache
    dx = normalize_rows_backward(dout, norm_cache)
    ddelta = dx if mask is None else dx * mask
    scale = ad.alpha / ad.rank
    dv = scale * ddelta
    db = kernels.matmul(np.ascontiguousarray(dv.T), u)  # (d, r)
    du = kernels.matmul(dv, ad.b)  # (n, r)
    da = kernels.matmul(np.ascontiguousarray(du.T), e)  # (r, d)
    de = dx + kernels.matmul(du, ad.a)
    return da, db, de

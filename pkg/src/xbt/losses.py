"""Contrastive objectives with analytic gradients.

All three training losses share one symmetric batch-contrastive primitive:
similarities are scaled by exp(log_scale) and cross-entropied against the
diagonal in both directions. Inputs are expected row-normalized.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .layers import ProjectionParams, phi_backward, phi_forward

DEFAULT_LOG_SCALE = 2.6592  # ln(1/0.07): similarities are multiplied by exp(.)


@dataclass
class ContrastiveOutput:
    loss: float
    grad_a: np.ndarray
    grad_b: np.ndarray


@dataclass
class NoiseSpec:
    sigma: float
    seed: int

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


@dataclass
class ProjectedLoss:
    """Loss value plus gradients for the projection and its inputs."""

    loss: float
    phi_grads: dict[str, np.ndarray]
    d_image: np.ndarray | None = None
    d_text: np.ndarray | None = None


def _log_softmax_rows(logits: np.ndarray):
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    return z - np.log(denom), ez / denom


def contrastive_loss(za: np.ndarray, zb: np.ndarray, log_scale: float) -> ContrastiveOutput:
    """Symmetric batch contrastive loss over aligned embedding batches.

    Logits are exp(log_scale) * za @ zb.T; targets are the diagonal. The
    loss averages the row-wise and column-wise cross entropies.
    """
    if za.shape != zb.shape:
        raise ValueError(f"batch shape mismatch: {za.shape} vs {zb.shape}")
    n = za.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    scale = float(np.exp(log_scale))
    logits = scale * kernels.matmul(za, np.ascontiguousarray(zb.T))
    logits_t = np.ascontiguousarray(logits.T)

    logp_r, p_r = _log_softmax_rows(logits)
    logp_c, p_c = _log_softmax_rows(logits_t)
    loss = 0.5 * (-np.diagonal(logp_r).mean() - np.diagonal(logp_c).mean())

    eye = np.eye(n, dtype=za.dtype)
    dlogits = (0.5 / n) * (p_r - eye) + (0.5 / n) * np.ascontiguousarray((p_c - eye).T)
    grad_a = scale * kernels.matmul(dlogits, zb)
    grad_b = scale * kernels.matmul(np.ascontiguousarray(dlogits.T), za)
    return ContrastiveOutput(loss=float(loss), grad_a=grad_a, grad_b=grad_b)


def pretrain_loss(
    phi: ProjectionParams,
    w_new: np.ndarray,
    w_old: np.ndarray,
    noise: NoiseSpec,
    log_scale: float,
) -> tuple[float, dict[str, np.ndarray]]:
    """Text-only pretraining objective: contrast projected (noised) new text
    embeddings against the old model's embeddings of the same texts.

    Noise is treated as a constant (no gradient through the sampling); with
    sigma = 0 the input is used as-is, so the loss coincides exactly with
    the noiseless contrastive value.
    """
    if w_new.shape[0] != w_old.shape[0]:
        raise ValueError(f"row-count mismatch: {w_new.shape[0]} vs {w_old.shape[0]}")
    if noise.sigma > 0:
        rng = np.random.default_rng(noise.seed)
        eps = rng.standard_normal(w_new.shape, dtype=w_new.dtype) * noise.sigma
        x = kernels.l2_normalize_rows(w_new + eps)
    else:
        x = w_new
    projected, cache = phi_forward(phi, x, normalize_output=True)
    out = contrastive_loss(projected, w_old, log_scale)
    _, grads = phi_backward(out.grad_a, cache)
    return out.loss, grads


def xbt_loss(
    phi: ProjectionParams, v_new: np.ndarray, w_new: np.ndarray, log_scale: float
) -> ProjectedLoss:
    """Cross-modal fine-tuning objective: both modalities are pushed through
    the same projection and contrasted against each other. Input gradients
    are returned for the adapters sitting upstream."""
    if v_new.shape != w_new.shape:
        raise ValueError(f"pair shape mismatch: {v_new.shape} vs {w_new.shape}")
    v_bar, cache_v = phi_forward(phi, v_new, normalize_output=True)
    w_bar, cache_w = phi_forward(phi, w_new, normalize_output=True)
    out = contrastive_loss(v_bar, w_bar, log_scale)
    dv, grads_v = phi_backward(out.grad_a, cache_v)
    dw, grads_w = phi_backward(out.grad_b, cache_w)
    grads = {k: grads_v[k] + grads_w[k] for k in grads_v}
    return ProjectedLoss(loss=out.loss, phi_grads=grads, d_image=dv, d_text=dw)


def direct_loss(
    phi: ProjectionParams,
    v_new: np.ndarray,
    w_new: np.ndarray,
    v_old: np.ndarray,
    w_old: np.ndarray,
    log_scale: float,
) -> ProjectedLoss:
    """Direct-backward baseline: projected new embeddings are contrasted
    against the frozen old embeddings of the opposite modality. No gradient
    flows into the old batches."""
    if v_new.shape != w_new.shape:
        raise ValueError(f"pair shape mismatch: {v_new.shape} vs {w_new.shape}")
    if v_old.shape[0] != v_new.shape[0] or w_old.shape[0] != w_new.shape[0]:
        raise ValueError("old/new row-count mismatch")
    v_bar, cache_v = phi_forward(phi, v_new, normalize_output=True)
    w_bar, cache_w = phi_forward(phi, w_new, normalize_output=True)
    out_v = contrastive_loss(v_bar, w_old, log_scale)
    out_w = contrastive_loss(w_bar, v_old, log_scale)
    dv, grads_v = phi_backward(out_v.grad_a, cache_v)
    dw, grads_w = phi_backward(out_w.grad_a, cache_w)
    grads = {k: grads_v[k] + grads_w[k] for k in grads_v}
    return ProjectedLoss(
        loss=out_v.loss + out_w.loss, phi_grads=grads, d_image=dv, d_text=dw
    )

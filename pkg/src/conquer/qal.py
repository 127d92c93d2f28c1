"""Query-aware feature learning: memory-less bidirectional clip/token attention."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .nn import Linear, Module
from .tensor import MASK_VALUE, Tensor


class TrilinearWeights(Module):
    def __init__(self, dim: int, rng: np.random.Generator):
        std = 1.0 / math.sqrt(dim)
        self.w1 = T.parameter(rng.normal(0, std, size=dim))
        self.w2 = T.parameter(rng.normal(0, std, size=dim))
        self.w3 = T.parameter(rng.normal(0, std, size=dim))


def similarity_matrix(gamma: Tensor, phi: Tensor, w: TrilinearWeights) -> Tensor:
    """a_ij = w1.gamma_i + w2.phi_j + w3.(gamma_i * phi_j); (B, L_v, H) x (1, L_q, H) -> (B, L_v, L_q)."""
    H = gamma.shape[-1]
    clip_term = T.matmul(gamma, T.reshape(w.w1, (H, 1)))  # B, Lv, 1
    token_term = T.swapaxes(T.matmul(phi, T.reshape(w.w2, (H, 1))), -1, -2)  # 1, 1, Lq
    cross = T.matmul(gamma * w.w3, T.swapaxes(phi, -1, -2))  # B, Lv, Lq
    return cross + clip_term + token_term


def mask_similarity(a: Tensor, clip_mask: np.ndarray, token_mask: np.ndarray) -> Tensor:
    invalid = ~clip_mask[:, :, None] | ~token_mask[:, None, :]
    return T.masked_fill(a, np.broadcast_to(invalid, a.shape), MASK_VALUE)


def v2q_attend(a: Tensor, phi: Tensor) -> Tensor:
    """eta_i = sum_j softmax_j(a_ij) phi_j.  ``a`` must already be masked."""
    return T.matmul(T.softmax(a, axis=-1), phi)


def q2v_attend(a: Tensor, gamma: Tensor) -> Tensor:
    """q_v = sum_i softmax_i(max_j a_ij) gamma_i, returned as (B, 1, H)."""
    b = T.max(a, axis=-1)  # B, Lv
    p = T.softmax(b, axis=-1)
    return T.matmul(T.reshape(p, (p.shape[0], 1, p.shape[1])), gamma)


def assemble_qal(gamma: Tensor, eta: Tensor, q_v: Tensor, clip_mask: np.ndarray | None = None) -> Tensor:
    """Per clip [gamma; eta; gamma*eta; gamma*q_v], width 4H; masked clips zeroed."""
    out = T.concat([gamma, eta, gamma * eta, gamma * q_v], axis=-1)
    if clip_mask is not None:
        out = out * clip_mask[..., None].astype(out.dtype)
    return out


class QueryAwareLearning(Module):
    def __init__(self, dim: int, rng: np.random.Generator):
        self.trilinear = TrilinearWeights(dim, rng)

    def __call__(self, gamma: Tensor, phi: Tensor, clip_mask: np.ndarray, token_mask: np.ndarray) -> Tensor:
        if not clip_mask.any(axis=-1).all():
            raise ValueError("fully masked video")
        if not token_mask.any():
            raise ValueError("fully masked query")
        a = mask_similarity(similarity_matrix(gamma, phi, self.trilinear), clip_mask, token_mask)
        eta = v2q_attend(a, phi)
        q_v = q2v_attend(a, gamma)
        return assemble_qal(gamma, eta, q_v, clip_mask)


class SelfAttentionPool(Module):
    """Collapse query tokens into one vector with learned token weights."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.score = Linear(dim, 1, rng)

    def __call__(self, phi: Tensor, token_mask: np.ndarray) -> Tensor:
        s = T.reshape(self.score(phi), token_mask.shape)
        p = T.softmax(T.masked_fill(s, ~token_mask, MASK_VALUE), axis=-1)
        return T.matmul(T.reshape(p, (p.shape[0], 1, p.shape[1])), phi)  # (1, 1, H)


class PooledQueryFeature(Module):
    """Ablation stand-in for QAL: clip features scaled by a self-attention-pooled query vector."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.pool = SelfAttentionPool(dim, rng)

    def __call__(self, gamma: Tensor, phi: Tensor, clip_mask: np.ndarray, token_mask: np.ndarray) -> Tensor:
        q = self.pool(phi, token_mask)
        return (gamma * q) * clip_mask[..., None].astype(gamma.dtype)

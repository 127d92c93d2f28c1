"""Query-dependent fusion of the visual and textual clip streams."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoders import ContextualizedQuery, ContextualizedVideo
from .nn import Linear, Module
from .tensor import Tensor


class NetVLAD(Module):
    """Trainable VLAD pooling of token features with soft cluster assignment."""

    def __init__(self, dim: int, n_clusters: int, rng: np.random.Generator):
        self.dim = dim
        self.n_clusters = n_clusters
        self.centers = T.parameter(rng.normal(0, 0.1, size=(n_clusters, dim)))
        self.assign = Linear(dim, n_clusters, rng)

    def assignments(self, tokens: Tensor, mask: np.ndarray) -> Tensor:
        """(1, L_q, K) soft assignments; rows of masked tokens are zero."""
        a = T.softmax(self.assign(tokens), axis=-1)
        return a * mask[..., None].astype(a.dtype)

    def aggregate(self, tokens: Tensor, assign: Tensor, normalize: bool = True) -> Tensor:
        # residual sum_j a_jk (x_j - c_k) = (A^T X)_k - (sum_j a_jk) c_k
        weighted = T.matmul(T.swapaxes(assign, -1, -2), tokens)  # (1, K, H)
        mass = T.swapaxes(T.sum(assign, axis=-2, keepdims=True), -1, -2)  # (1, K, 1)
        vlad = weighted - mass * self.centers
        if normalize:
            vlad = T.l2_normalize(vlad, axis=-1)
        flat = T.reshape(vlad, (vlad.shape[0], self.n_clusters * self.dim))
        return T.l2_normalize(flat, axis=-1) if normalize else flat

    def __call__(self, query: ContextualizedQuery) -> Tensor:
        if not query.mask.any():
            raise ValueError("NetVLAD needs at least one unmasked token")
        return self.aggregate(query.tokens, self.assignments(query.tokens, query.mask))


def netvlad_aggregate(query: ContextualizedQuery, codebook: NetVLAD) -> Tensor:
    return codebook(query)


class FusionHead(Module):
    """One linear layer + softmax giving the (visual, textual) weights."""

    def __init__(self, in_dim: int, rng: np.random.Generator):
        self.fc = Linear(in_dim, 2, rng)

    def __call__(self, descriptor: Tensor) -> Tensor:
        return T.softmax(self.fc(descriptor), axis=-1)


@dataclass
class FusionWeights:
    weights: Tensor  # (1, 2): visual, textual

    @property
    def visual(self) -> float:
        return float(self.weights.data[0, 0])

    @property
    def textual(self) -> float:
        return float(self.weights.data[0, 1])


def fusion_weights(descriptor: Tensor, head: FusionHead) -> FusionWeights:
    return FusionWeights(head(descriptor))


def average_weights(dtype=None) -> FusionWeights:
    return FusionWeights(T.tensor(np.full((1, 2), 0.5), dtype=dtype))


def fuse(video: ContextualizedVideo, w: FusionWeights | Tensor) -> Tensor:
    """gamma_i = mu_v * visual_i + mu_t * textual_i."""
    weights = w.weights if isinstance(w, FusionWeights) else w
    mu_v = T.reshape(weights[:, 0], (-1, 1, 1))
    mu_t = T.reshape(weights[:, 1], (-1, 1, 1))
    return video.visual * mu_v + video.textual * mu_t


class QueryDependentFusion(Module):
    def __init__(self, dim: int, n_clusters: int, rng: np.random.Generator, mode: str = "learned"):
        if mode not in ("learned", "average"):
            raise ValueError(f"unknown fusion mode {mode!r}")
        self.mode = mode
        # the average baseline has no trainable fusion parameters
        self.netvlad = NetVLAD(dim, n_clusters, rng) if mode == "learned" else None
        self.head = FusionHead(dim * n_clusters, rng) if mode == "learned" else None

    def weights(self, query: ContextualizedQuery) -> FusionWeights:
        if self.mode == "average":
            return average_weights(query.tokens.dtype)
        return fusion_weights(self.netvlad(query), self.head)

    def __call__(self, video: ContextualizedVideo, query: ContextualizedQuery) -> tuple[Tensor, FusionWeights]:
        w = self.weights(query)
        return fuse(video, w), w

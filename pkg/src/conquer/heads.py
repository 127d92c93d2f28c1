"""Moment localization (begin/end ConvSE) and video scoring heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv1d, Linear, Module, Transformer
from .tensor import MASK_VALUE, Tensor


@dataclass
class MomentScores:
    begin: Tensor  # (B, L_v) raw scores, sentinel at masked clips
    end: Tensor
    mask: np.ndarray  # (B, L_v)


class MomentHead(Module):
    """Three stacked transformers feeding begin/end 1-D convolution detectors.

    The input (width ``in_dim``) is projected to 2H and contextualized; the
    contextualized features are concatenated with the projection (width 4H)
    before the begin branch.  The end branch contextualizes the begin
    branch's features once more.
    """

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator, n_layers: int = 1,
                 n_heads: int = 4, ff_mult: int = 4, kernel: int = 5):
        self.proj = Linear(in_dim, 2 * hidden, rng)
        self.t1 = Transformer(2 * hidden, n_layers, n_heads, rng, ff_mult)
        self.t2 = Transformer(4 * hidden, n_layers, n_heads, rng, ff_mult)
        self.t3 = Transformer(4 * hidden, n_layers, n_heads, rng, ff_mult)
        self.conv_begin = Conv1d(4 * hidden, 1, kernel, rng, bias=False)
        self.conv_end = Conv1d(4 * hidden, 1, kernel, rng, bias=False)

    def set_contextualize(self, enabled: bool) -> None:
        for t in (self.t1, self.t2, self.t3):
            t.enabled = enabled

    def __call__(self, feats: Tensor, mask: np.ndarray) -> MomentScores:
        keep = mask[..., None].astype(feats.dtype)
        x = self.proj(feats)
        g = T.concat([self.t1(x, mask), x], axis=-1)
        h2 = self.t2(g, mask) * keep
        h3 = self.t3(h2, mask) * keep
        B, L = mask.shape
        b = T.reshape(self.conv_begin(h2), (B, L))
        e = T.reshape(self.conv_end(h3), (B, L))
        return MomentScores(T.masked_fill(b, ~mask, MASK_VALUE), T.masked_fill(e, ~mask, MASK_VALUE), mask)


class VideoScoringHead(Module):
    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator, n_layers: int = 1,
                 n_heads: int = 4, ff_mult: int = 4):
        self.proj = Linear(in_dim, hidden, rng)
        self.t1 = Transformer(hidden, n_layers, n_heads, rng, ff_mult)
        self.t2 = Transformer(hidden, n_layers, n_heads, rng, ff_mult)
        self.regress = Linear(hidden, 1, rng)

    def set_contextualize(self, enabled: bool) -> None:
        self.t1.enabled = self.t2.enabled = enabled

    def contextualize(self, feats: Tensor, mask: np.ndarray) -> Tensor:
        return self.t2(self.t1(self.proj(feats), mask), mask)

    def pool(self, r: Tensor, mask: np.ndarray) -> Tensor:
        if not mask.any(axis=-1).all():
            raise ValueError("video scoring needs at least one unmasked clip per video")
        filled = T.masked_fill(r, np.broadcast_to(~mask[..., None], r.shape), MASK_VALUE)
        return T.max(filled, axis=1)  # B, H

    def __call__(self, feats: Tensor, mask: np.ndarray) -> Tensor:
        pooled = self.pool(self.contextualize(feats, mask), mask)
        return T.reshape(self.regress(pooled), (mask.shape[0],))

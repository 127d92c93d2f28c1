"""Clip and token encoders: projection, learned temporal/modality embeddings, contextualization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .nn import Linear, Module, Transformer
from .tensor import Tensor

VISUAL, TEXTUAL = 0, 1


class EmbeddingTables(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, std: float = 0.02):
        H = cfg.hidden
        self.temporal_video = T.parameter(rng.normal(0, std, size=(cfg.max_clips, H)))
        self.temporal_query = T.parameter(rng.normal(0, std, size=(cfg.max_tokens, H)))
        self.modality = T.parameter(rng.normal(0, std, size=(2, H)))


@dataclass
class ContextualizedVideo:
    visual: Tensor  # (B, L_v, H)
    textual: Tensor  # (B, L_v, H)
    mask: np.ndarray  # (B, L_v) bool


@dataclass
class ContextualizedQuery:
    tokens: Tensor  # (1, L_q, H)
    mask: np.ndarray  # (1, L_q) bool


class VideoEncoder(Module):
    """Both clip streams are embedded, then attended jointly as one 2*L_v sequence."""

    def __init__(self, cfg: ModelConfig, tables: EmbeddingTables, rng: np.random.Generator):
        self.cfg = cfg
        self.tables = tables
        self.proj_visual = Linear(cfg.visual_dim, cfg.hidden, rng)
        self.proj_textual = Linear(cfg.text_dim, cfg.hidden, rng)
        self.mmt = Transformer(cfg.hidden, cfg.mmt_layers, cfg.n_heads, rng, cfg.ff_mult)

    def embed(self, visual: np.ndarray, textual: np.ndarray, mask: np.ndarray) -> tuple[Tensor, Tensor]:
        B, L, dv = visual.shape
        if L > self.cfg.max_clips:
            raise ValueError(f"video batch padded to {L} clips > L_v={self.cfg.max_clips}")
        if dv != self.cfg.visual_dim:
            raise ValueError(f"visual dim {dv} != configured {self.cfg.visual_dim}")
        if textual.shape[-1] != self.cfg.text_dim:
            raise ValueError(f"textual dim {textual.shape[-1]} != configured {self.cfg.text_dim}")
        keep = mask[..., None].astype(visual.dtype)
        # non-existing clips: zero vector + temporal + modality embedding
        v = self.proj_visual(T.tensor(visual)) * keep
        s = self.proj_textual(T.tensor(textual)) * keep
        # padding beyond L only adds masked positions, so a shorter batch keeps the valid outputs unchanged
        temporal = self.tables.temporal_video[:L]
        v = v + temporal + self.tables.modality[VISUAL]
        s = s + temporal + self.tables.modality[TEXTUAL]
        return v, s

    def __call__(self, visual: np.ndarray, textual: np.ndarray, mask: np.ndarray) -> ContextualizedVideo:
        v, s = self.embed(visual, textual, mask)
        L = visual.shape[1]
        joint = self.mmt(T.concat([v, s], axis=1), np.concatenate([mask, mask], axis=1))
        return ContextualizedVideo(joint[:, :L], joint[:, L:], mask)


class QueryEncoder(Module):
    def __init__(self, cfg: ModelConfig, tables: EmbeddingTables, rng: np.random.Generator):
        self.cfg = cfg
        self.tables = tables
        self.proj = Linear(cfg.text_dim, cfg.hidden, rng)
        self.transformer = Transformer(cfg.hidden, cfg.query_layers, cfg.n_heads, rng, cfg.ff_mult)

    def __call__(self, tokens: np.ndarray, mask: np.ndarray) -> ContextualizedQuery:
        L = tokens.shape[1]
        if L > self.cfg.max_tokens:
            raise ValueError(f"query padded to {L} tokens > L_q={self.cfg.max_tokens}")
        if not mask.any(axis=-1).all():
            raise ValueError("empty query")
        keep = mask[..., None].astype(tokens.dtype)
        x = self.proj(T.tensor(tokens)) * keep + self.tables.temporal_query[:L]
        return ContextualizedQuery(self.transformer(x, mask), mask)


def encode_video(encoder: VideoEncoder, visual: np.ndarray, textual: np.ndarray,
                 max_clips: int | None = None) -> ContextualizedVideo:
    """Encode one unpadded video of shape (n, D_v) / (n, D_t)."""
    L = max_clips or encoder.cfg.max_clips
    n = visual.shape[0]
    if n > L:
        raise ValueError(f"video has {n} clips > L_v={L}")
    if textual.shape[0] != n:
        raise ValueError("visual and textual clip counts differ")
    vis = np.zeros((1, L, visual.shape[1]), dtype=T.get_dtype())
    txt = np.zeros((1, L, textual.shape[1]), dtype=T.get_dtype())
    vis[0, :n], txt[0, :n] = visual, textual
    mask = np.zeros((1, L), dtype=bool)
    mask[0, :n] = True
    return encoder(vis, txt, mask)


def encode_query(encoder: QueryEncoder, tokens: np.ndarray) -> ContextualizedQuery:
    """Encode one unpadded query of shape (m, D_t)."""
    L = encoder.cfg.max_tokens
    m = tokens.shape[0]
    if m > L:
        raise ValueError(f"query has {m} tokens > L_q={L}")
    tok = np.zeros((1, L, tokens.shape[1]), dtype=T.get_dtype())
    tok[0, :m] = tokens
    mask = np.zeros((1, L), dtype=bool)
    mask[0, :m] = True
    return encoder(tok, mask)

"""The full two-step early-fusion ranker and its checkpoint format."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig, RunConfig, parse_config
from .container import read_arrays, write_arrays
from .data import QueryInput, VideoBatch
from .encoders import ContextualizedQuery, EmbeddingTables, QueryEncoder, VideoEncoder
from .heads import MomentHead, MomentScores, VideoScoringHead
from .nn import Module
from .qal import PooledQueryFeature, QueryAwareLearning
from .qdf import FusionWeights, QueryDependentFusion, fuse
from .tensor import Tensor

CONFIG_KEY = "meta/config"


@dataclass
class EncodedQuery:
    query: ContextualizedQuery
    fusion: FusionWeights


@dataclass
class ConquerOutput:
    scores: MomentScores
    video_score: Tensor | None  # (B,), only with the video scoring head
    fusion: FusionWeights
    features: Tensor  # (B, L_v, F) input to the heads


class Conquer(Module):
    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.model_seed)
        H = cfg.hidden
        self.tables = EmbeddingTables(cfg, rng)
        self.video_encoder = VideoEncoder(cfg, self.tables, rng)
        self.query_encoder = QueryEncoder(cfg, self.tables, rng)
        self.qdf = QueryDependentFusion(H, cfg.n_clusters, rng, cfg.qdf)
        if cfg.qal == "on":
            self.qal = QueryAwareLearning(H, rng)
            feat_dim = 4 * H
        else:
            self.qal = PooledQueryFeature(H, rng)
            feat_dim = H
        self.ml_head = MomentHead(feat_dim, H, rng, cfg.head_layers, cfg.n_heads, cfg.ff_mult, cfg.conv_kernel)
        self.vs_head = (VideoScoringHead(feat_dim, H, rng, cfg.head_layers, cfg.n_heads, cfg.ff_mult)
                        if cfg.vs_head == "on" else None)

    def set_contextualize(self, enabled: bool) -> None:
        """Switch every transformer stack between normal operation and identity."""
        self.video_encoder.mmt.enabled = enabled
        self.query_encoder.transformer.enabled = enabled
        self.ml_head.set_contextualize(enabled)
        if self.vs_head is not None:
            self.vs_head.set_contextualize(enabled)

    def encode_query(self, query: QueryInput) -> EncodedQuery:
        q = self.query_encoder(query.tokens, query.mask)
        return EncodedQuery(q, self.qdf.weights(q))

    def __call__(self, query: QueryInput | EncodedQuery, videos: VideoBatch) -> ConquerOutput:
        enc = query if isinstance(query, EncodedQuery) else self.encode_query(query)
        video = self.video_encoder(videos.visual, videos.textual, videos.mask)
        gamma = fuse(video, enc.fusion)
        feats = self.qal(gamma, enc.query.tokens, videos.mask, enc.query.mask)
        scores = self.ml_head(feats, videos.mask)
        r2 = self.vs_head(feats, videos.mask) if self.vs_head is not None else None
        return ConquerOutput(scores, r2, enc.fusion, feats)


def save_checkpoint(path, model: Conquer, cfg: RunConfig | None = None) -> None:
    arrays = dict(model.state_dict())
    if cfg is not None:
        arrays[CONFIG_KEY] = np.frombuffer(cfg.dumps().encode("utf-8"), dtype=np.uint8)
    write_arrays(path, arrays)


def load_checkpoint(path, cfg: RunConfig | None = None) -> tuple[Conquer, RunConfig]:
    """Rebuild a model from a checkpoint; the embedded config wins unless ``cfg`` is given."""
    arrays = read_arrays(path)
    raw = arrays.pop(CONFIG_KEY, None)
    if cfg is None:
        if raw is None:
            raise ValueError(f"{path}: checkpoint has no embedded config; pass one explicitly")
        cfg = parse_config(raw.tobytes().decode("utf-8"))
    model = Conquer(cfg.model)
    model.load_state_dict(arrays)
    return model, cfg


def forward_inference(model: Conquer, query: QueryInput, videos: VideoBatch) -> ConquerOutput:
    with T.no_grad():
        return model(query, videos)

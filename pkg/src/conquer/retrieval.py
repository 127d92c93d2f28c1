"""Stage-1 video ranking and stage-2 moment candidate generation, suppression and scoring."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .config import ModelConfig, RetrievalConfig
from .data import Corpus, QueryRecord, RankList, VideoRecord, batch_videos, oracle_rank_lists, query_input
from .encoders import EmbeddingTables, QueryEncoder, VideoEncoder
from .model import Conquer
from .nn import Module
from .optim import AdamW
from .qal import SelfAttentionPool
from .qdf import QueryDependentFusion
from .tensor import Tensor

log = logging.getLogger(__name__)

SCORING_MODES = ("general", "exclusive", "disjoint")


@dataclass(frozen=True)
class MomentLengthBounds:
    l_min: int = 1
    l_max: int = 24

    def __post_init__(self):
        if not 1 <= self.l_min <= self.l_max:
            raise ValueError(f"need 1 <= L_min <= L_max, got ({self.l_min}, {self.l_max})")


TVR_BOUNDS = MomentLengthBounds(1, 24)
DIDEMO_BOUNDS = MomentLengthBounds(3, 7)


@dataclass
class MomentCandidate:
    video_id: str
    begin: int
    end: int
    b_prob: float
    e_prob: float
    b_raw: float
    e_raw: float
    score: float = 0.0

    @property
    def prob(self) -> float:
        return self.b_prob * self.e_prob

    def times(self, clip_len: float, duration: float | None = None) -> tuple[float, float]:
        t1 = (self.end + 1) * clip_len
        if duration is not None:
            t1 = min(t1, duration)
        return self.begin * clip_len, t1


# ---------------------------------------------------------------- candidates


def normalize_scores(raw: np.ndarray) -> np.ndarray:
    """Softmax over a 1-D vector of (unmasked) raw scores, in float64."""
    z = np.asarray(raw, dtype=np.float64)
    z = np.exp(z - z.max())
    return z / z.sum()


@dataclass
class CandidateArrays:
    """Column-oriented candidates of one video."""

    video_id: str
    begin: np.ndarray
    end: np.ndarray
    b_prob: np.ndarray
    e_prob: np.ndarray
    b_raw: np.ndarray
    e_raw: np.ndarray

    def __len__(self) -> int:
        return len(self.begin)

    @property
    def prob(self) -> np.ndarray:
        return self.b_prob * self.e_prob

    def take(self, idx) -> "CandidateArrays":
        return CandidateArrays(self.video_id, self.begin[idx], self.end[idx], self.b_prob[idx],
                               self.e_prob[idx], self.b_raw[idx], self.e_raw[idx])

    def to_list(self) -> list[MomentCandidate]:
        return [MomentCandidate(self.video_id, int(b), int(e), float(bp), float(ep), float(br), float(er))
                for b, e, bp, ep, br, er in zip(self.begin, self.end, self.b_prob, self.e_prob,
                                                self.b_raw, self.e_raw)]


def candidate_arrays(begin_raw: np.ndarray, end_raw: np.ndarray, bounds: MomentLengthBounds,
                     video_id: str = "") -> CandidateArrays:
    n = len(begin_raw)
    if len(end_raw) != n:
        raise ValueError("begin and end score lengths differ")
    if n < bounds.l_min:
        raise ValueError(f"video {video_id!r} has {n} clips, shorter than L_min={bounds.l_min}")
    bi, ei = np.triu_indices(n)
    length = ei - bi + 1
    keep = (length >= bounds.l_min) & (length <= bounds.l_max)
    bi, ei = bi[keep], ei[keep]
    bp, ep = normalize_scores(begin_raw), normalize_scores(end_raw)
    br = np.asarray(begin_raw, dtype=np.float64)
    er = np.asarray(end_raw, dtype=np.float64)
    return CandidateArrays(video_id, bi, ei, bp[bi], ep[ei], br[bi], er[ei])


def generate_candidates(begin_raw, end_raw, bounds: MomentLengthBounds, video_id: str = "") -> list[MomentCandidate]:
    """All (i, j), i <= j, with length in bounds, probability b_hat_i * e_hat_j.

    ``begin_raw``/``end_raw`` hold the unmasked clips of one video only.
    """
    return candidate_arrays(np.asarray(begin_raw), np.asarray(end_raw), bounds, video_id).to_list()


# ---------------------------------------------------------------- NMS


def span_iou(b1, e1, b2, e2):
    """IoU of clip spans [b, e] (inclusive); vectorised over numpy inputs."""
    inter = np.maximum(0, np.minimum(e1, e2) - np.maximum(b1, b2) + 1)
    union = (e1 - b1 + 1) + (e2 - b2 + 1) - inter
    return inter / union


def nms_indices(begin: np.ndarray, end: np.ndarray, score: np.ndarray, iou_threshold: float = 0.7,
                keep_n: int | None = 100) -> np.ndarray:
    """Greedy suppression; ties in score go to the earlier (begin, end)."""
    order = np.lexsort((end, begin, -score))
    alive = np.ones(len(order), dtype=bool)
    b, e = begin[order], end[order]
    kept = []
    for pos in range(len(order)):
        if not alive[pos]:
            continue
        kept.append(order[pos])
        if keep_n is not None and len(kept) >= keep_n:
            break
        rest = slice(pos + 1, None)
        alive[rest] &= span_iou(b[pos], e[pos], b[rest], e[rest]) <= iou_threshold
    return np.asarray(kept, dtype=np.int64)


def nms(candidates: Sequence[MomentCandidate], iou_threshold: float = 0.7, keep_n: int | None = 100,
        key: str = "prob") -> list[MomentCandidate]:
    """Keep the best candidate, drop any other with IoU > threshold against it, repeat.

    Candidates are compared within their own video only.
    """
    if not candidates:
        return []
    score = np.array([getattr(c, key) for c in candidates], dtype=np.float64)
    begin = np.array([c.begin for c in candidates])
    end = np.array([c.end for c in candidates])
    vids = [c.video_id for c in candidates]
    if len(set(vids)) > 1:
        raise ValueError("nms expects candidates from a single video")
    return [candidates[i] for i in nms_indices(begin, end, score, iou_threshold, keep_n)]


# ---------------------------------------------------------------- scoring


def _sort_key(c: MomentCandidate):
    return (-c.score, c.video_id, c.begin, c.end)


def score_moments(candidates: Sequence[MomentCandidate], r1: Mapping[str, float] | None = None,
                  r2: Mapping[str, float] | None = None, mode: str = "general") -> list[MomentCandidate]:
    """Score and globally sort candidates.

    general: b_hat * e_hat * r1, exclusive: b_hat * e_hat * r2, disjoint: b + e (raw).
    """
    if mode == "general":
        if r1 is None:
            raise ValueError("general scoring needs stage-1 video scores (r1)")
        scored = [replace(c, score=c.b_prob * c.e_prob * r1[c.video_id]) for c in candidates]
    elif mode == "exclusive":
        if r2 is None:
            raise ValueError("exclusive scoring needs video scoring head outputs (r2)")
        scored = [replace(c, score=c.b_prob * c.e_prob * r2[c.video_id]) for c in candidates]
    elif mode == "disjoint":
        scored = [replace(c, score=c.b_raw + c.e_raw) for c in candidates]
    else:
        raise ValueError(f"unknown scoring mode {mode!r}; expected one of {SCORING_MODES}")
    return sorted(scored, key=_sort_key)


def _scores_array(c: CandidateArrays, mode: str, r1: float | None, r2: float | None) -> np.ndarray:
    if mode == "general":
        return c.prob * r1
    if mode == "exclusive":
        return c.prob * r2
    return c.b_raw + c.e_raw


# ---------------------------------------------------------------- stage 2 search


@dataclass
class RankedMoment:
    rank: int
    video_id: str
    begin: int
    end: int
    t_begin: float
    t_end: float
    score: float


def video_scores_from_head(raw: np.ndarray) -> np.ndarray:
    """Video-head regressions turned into positive similarities (softmax over the retrieved videos)."""
    return normalize_scores(raw)


def stage2_candidates(model: Conquer, query: QueryRecord, videos: Sequence[VideoRecord],
                      rcfg: RetrievalConfig, need_r2: bool = False):
    """Per-video candidates after length pruning and per-video NMS, plus the head's r2 scores."""
    mc = model.cfg
    qi = query_input(query.tokens, mc.max_tokens)
    vb = batch_videos(videos, mc.max_clips)
    with T.no_grad():
        out = model(qi, vb)
    bounds = MomentLengthBounds(rcfg.l_min, rcfg.l_max)
    begin, end = out.scores.begin.data, out.scores.end.data
    r2 = None
    if need_r2:
        if out.video_score is None:
            raise ValueError("exclusive scoring needs a model trained with vs_head=on")
        r2 = video_scores_from_head(out.video_score.data)
    per_video = []
    for i, v in enumerate(videos):
        n = v.n_clips
        if n < bounds.l_min:
            continue
        cand = candidate_arrays(begin[i, :n], end[i, :n], bounds, v.video_id)
        keep = nms_indices(cand.begin, cand.end, cand.prob, rcfg.nms_iou, rcfg.keep_n)
        per_video.append(cand.take(keep))
    return per_video, r2, out


def vcmr_search(model: Conquer, query: QueryRecord, corpus: Corpus, rank_list: RankList,
                rcfg: RetrievalConfig, scoring: str = "general", top_k: int | None = None,
                max_results: int | None = None) -> list[RankedMoment]:
    """Rank moments from the top-k stage-1 videos of one query."""
    if scoring not in SCORING_MODES:
        raise ValueError(f"unknown scoring mode {scoring!r}")
    k = top_k or rcfg.top_k
    if k > len(rank_list.entries):
        log.warning("top_k=%d exceeds the %d ranked videos; clamping", k, len(rank_list.entries))
        k = len(rank_list.entries)
    top = rank_list.top(k)
    videos = [corpus[v] for v, _ in top]
    r1 = {v: s for v, s in top}
    per_video, r2, _ = stage2_candidates(model, query, videos, rcfg, need_r2=scoring == "exclusive")
    rows = []
    for i, cand in enumerate(per_video):
        r2_i = None
        if r2 is not None:
            r2_i = float(r2[[v.video_id for v in videos].index(cand.video_id)])
        s = _scores_array(cand, scoring, r1[cand.video_id], r2_i)
        for j in range(len(cand)):
            rows.append((-float(s[j]), cand.video_id, int(cand.begin[j]), int(cand.end[j])))
    rows.sort()
    limit = max_results or rcfg.max_results
    out = []
    for rank, (neg, vid, b, e) in enumerate(rows[:limit], 1):
        rec = corpus[vid]
        t0, t1 = b * rec.clip_len, min((e + 1) * rec.clip_len, rec.duration)
        out.append(RankedMoment(rank, vid, b, e, t0, t1, -neg))
    return out


def svmr_search(model: Conquer, query: QueryRecord, video: VideoRecord, rcfg: RetrievalConfig,
                max_results: int | None = None) -> list[RankedMoment]:
    """Rank moments inside one (ground-truth) video by b_hat * e_hat."""
    per_video, _, _ = stage2_candidates(model, query, [video], rcfg)
    if not per_video:
        return []
    cand = per_video[0]
    p = cand.prob
    order = np.lexsort((cand.end, cand.begin, -p))[: max_results or rcfg.max_results]
    return [RankedMoment(r, video.video_id, int(cand.begin[i]), int(cand.end[i]),
                         cand.begin[i] * video.clip_len, min((cand.end[i] + 1) * video.clip_len, video.duration),
                         float(p[i])) for r, i in enumerate(order, 1)]


# ---------------------------------------------------------------- stage 1


def cosine_scores(query_vec: np.ndarray, pooled: np.ndarray) -> np.ndarray:
    q = query_vec / (np.linalg.norm(query_vec) + 1e-12)
    p = pooled / (np.linalg.norm(pooled, axis=-1, keepdims=True) + 1e-12)
    return p @ q


def simplified_scores(q_visual: np.ndarray, q_textual: np.ndarray, pooled_visual: np.ndarray,
                      pooled_textual: np.ndarray, mu_visual: float, mu_textual: float) -> np.ndarray:
    """mu_v * cos(q_v, pooled V) + mu_t * cos(q_t, pooled S), one score per video."""
    return mu_visual * cosine_scores(q_visual, pooled_visual) + mu_textual * cosine_scores(q_textual, pooled_textual)


def rank_from_scores(query_id: str, video_ids: Sequence[str], scores: np.ndarray) -> RankList:
    order = sorted(range(len(video_ids)), key=lambda i: (-float(scores[i]), video_ids[i]))
    return RankList(query_id, [(video_ids[i], float(scores[i])) for i in order])


class SimplifiedRetriever(Module):
    """Late-fusion first stage: query-dependent weights over two cosine similarities.

    Video representations do not depend on the query, so they can be indexed
    once with :meth:`index`.
    """

    def __init__(self, cfg: ModelConfig, temperature: float = 10.0):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.model_seed + 7919)
        self.tables = EmbeddingTables(cfg, rng)
        self.video_encoder = VideoEncoder(cfg, self.tables, rng)
        self.query_encoder = QueryEncoder(cfg, self.tables, rng)
        self.qdf = QueryDependentFusion(cfg.hidden, cfg.n_clusters, rng, "learned")
        self.pool_visual = SelfAttentionPool(cfg.hidden, rng)
        self.pool_textual = SelfAttentionPool(cfg.hidden, rng)
        self.temperature = temperature

    def encode_videos(self, videos: Sequence[VideoRecord]) -> tuple[Tensor, Tensor]:
        vb = batch_videos(videos, self.cfg.max_clips)
        enc = self.video_encoder(vb.visual, vb.textual, vb.mask)
        keep = vb.mask[..., None].astype(enc.visual.dtype)
        count = vb.mask.sum(axis=1, keepdims=True).astype(enc.visual.dtype)
        pv = T.sum(enc.visual * keep, axis=1) / count
        pt = T.sum(enc.textual * keep, axis=1) / count
        return pv, pt

    def encode_query(self, query: QueryRecord):
        qi = query_input(query.tokens, self.cfg.max_tokens)
        q = self.query_encoder(qi.tokens, qi.mask)
        mu = self.qdf.weights(q).weights
        qv = T.reshape(self.pool_visual(q.tokens, q.mask), (1, -1))
        qt = T.reshape(self.pool_textual(q.tokens, q.mask), (1, -1))
        return qv, qt, mu

    def scores(self, query: QueryRecord, pooled_visual: Tensor, pooled_textual: Tensor) -> Tensor:
        qv, qt, mu = self.encode_query(query)
        cv = T.matmul(T.l2_normalize(pooled_visual), T.swapaxes(T.l2_normalize(qv), 0, 1))
        ct = T.matmul(T.l2_normalize(pooled_textual), T.swapaxes(T.l2_normalize(qt), 0, 1))
        s = cv * mu[:, 0] + ct * mu[:, 1]
        return T.reshape(s, (pooled_visual.shape[0],))

    def index(self, corpus: Corpus, chunk: int = 64):
        ids = list(corpus.videos)
        pv, pt = [], []
        with T.no_grad():
            for i in range(0, len(ids), chunk):
                a, b = self.encode_videos([corpus[v] for v in ids[i:i + chunk]])
                pv.append(a.data)
                pt.append(b.data)
        return ids, T.tensor(np.concatenate(pv)), T.tensor(np.concatenate(pt))

    def rank(self, query: QueryRecord, index) -> RankList:
        ids, pv, pt = index
        with T.no_grad():
            s = self.scores(query, pv, pt).data
        return rank_from_scores(query.query_id, ids, s)


def train_simplified(retriever: SimplifiedRetriever, corpus: Corpus, queries: Sequence[QueryRecord],
                     epochs: int = 5, lr: float = 1e-3, n_neg: int = 7, seed: int = 0) -> list[float]:
    """Contrastive training: softmax over the positive and random negative videos."""
    rng = np.random.default_rng(seed)
    opt = AdamW(retriever.parameters(), lr=lr)
    ids = list(corpus.videos)
    history = []
    for _ in range(epochs):
        total = 0.0
        for qi in rng.permutation(len(queries)):
            q = queries[qi]
            others = [v for v in ids if v != q.video_id]
            neg = [others[j] for j in rng.choice(len(others), size=min(n_neg, len(others)), replace=False)]
            pv, pt = retriever.encode_videos([corpus[q.video_id]] + [corpus[v] for v in neg])
            logits = retriever.scores(q, pv, pt) * retriever.temperature
            loss = -T.log_softmax(logits)[0]
            opt.zero_grad()
            loss.backward()
            opt.step(allow_missing=True)
            total += loss.item()
        history.append(total / max(1, len(queries)))
    return history


def stage1_rank(corpus: Corpus, queries: Sequence[QueryRecord], mode: str = "oracle", *,
                retriever: SimplifiedRetriever | None = None, rank_dist: str = "uniform:1:10",
                noise: float = 0.0, decay: float = 0.02, seed: int = 0) -> dict[str, RankList]:
    """Rank-list per query, from the planted-rank oracle or the simplified retriever."""
    for q in queries:
        if q.video_id not in corpus.videos:
            raise KeyError(f"query {q.query_id} refers to unknown video {q.video_id!r}")
    if mode == "oracle":
        rng = np.random.default_rng(seed)
        lists = oracle_rank_lists(queries, list(corpus.videos), rng, rank_dist, decay, noise)
        return {rl.query_id: rl for rl in lists}
    if mode == "simplified":
        if retriever is None:
            raise ValueError("simplified mode needs a retriever")
        idx = retriever.index(corpus)
        return {q.query_id: retriever.rank(q, idx) for q in queries}
    raise ValueError(f"unknown stage-1 mode {mode!r}")

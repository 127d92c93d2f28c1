"""Shared-normalization losses, hard-negative sampling and the training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .config import RunConfig
from .data import Corpus, QueryRecord, RankList, batch_videos, query_input
from .evaluation import vcmr_r1_sum
from .model import Conquer, save_checkpoint
from .optim import AdamW
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def align_ground_truth(begin_s: float, end_s: float, clip_len: float,
                       n_clips: int | None = None) -> tuple[int, int]:
    """Floor the begin time and ceil the end time onto clip indices (end inclusive)."""
    if not 0 <= begin_s < end_s:
        raise ValueError(f"need 0 <= begin < end, got ({begin_s}, {end_s})")
    b = math.floor(begin_s / clip_len + 1e-9)
    e = math.ceil(end_s / clip_len - 1e-9) - 1
    if n_clips is not None:
        if b >= n_clips:
            raise ValueError(f"span ({begin_s}, {end_s}) starts after the video's {n_clips} clips")
        e = min(e, n_clips - 1)
    return b, max(b, e)


@dataclass
class LossReport:
    moment: Tensor
    video: Tensor | None
    total: Tensor
    begin: float = 0.0
    end: float = 0.0

    def floats(self) -> dict[str, float]:
        out = {"moment": self.moment.item(), "total": self.total.item(), "begin": self.begin, "end": self.end}
        if self.video is not None:
            out["video"] = self.video.item()
        return out


def shared_log_probs(scores: Tensor) -> Tensor:
    """Log-softmax over the concatenation of every video's clip scores; (B, L) -> (B*L,)."""
    return T.log_softmax(T.reshape(scores, (scores.data.size,)))


def shared_softmax_loss(begin: Tensor, end: Tensor, gt: tuple[int, int],
                        mask: np.ndarray | None = None) -> tuple[Tensor, float, float]:
    """Begin + end NLL of the positive (row 0) under one softmax shared by all videos.

    Returns the summed moment loss and its begin/end parts as floats.
    """
    b_gt, e_gt = gt
    if mask is not None and not (mask[0, b_gt] and mask[0, e_gt]):
        raise ValueError(f"ground-truth index ({b_gt}, {e_gt}) falls on a masked clip")
    lb = -shared_log_probs(begin)[b_gt]
    le = -shared_log_probs(end)[e_gt]
    return lb + le, lb.item(), le.item()


def video_ce_loss(video_scores: Tensor) -> Tensor:
    """NLL of the positive (index 0) among all video scores of the batch."""
    if video_scores.shape[0] < 2:
        raise ValueError("video loss needs at least one negative video")
    return -T.log_softmax(video_scores)[0]


def sample_negatives(rank_list: RankList, gt_video: str, x: int, n_neg: int,
                     rng: np.random.Generator) -> list[str]:
    """Uniform draws without replacement from ranks 1..min(p + x, |list|), gt excluded."""
    p = rank_list.rank_of(gt_video)
    if p is None:
        raise TrainingError(f"ground-truth video {gt_video} absent from rank list of {rank_list.query_id}")
    if n_neg == 0:
        return []
    depth = min(p + x, len(rank_list.entries))
    pool = [v for v, _ in rank_list.entries[:depth] if v != gt_video]
    if len(pool) < n_neg:
        raise TrainingError(f"only {len(pool)} negative candidates within depth {depth}, need {n_neg}")
    picks = rng.choice(len(pool), size=n_neg, replace=False)
    return [pool[i] for i in picks]


def filter_trainable(queries: Sequence[QueryRecord], rank_lists: Mapping[str, RankList],
                     exclusion_depth: int = 100) -> list[QueryRecord]:
    """Drop queries whose ground-truth video is missing or ranked deeper than ``exclusion_depth``."""
    kept = []
    for q in queries:
        rl = rank_lists.get(q.query_id)
        p = rl.rank_of(q.video_id) if rl is not None else None
        if p is not None and p <= exclusion_depth:
            kept.append(q)
    return kept


class EarlyStopping:
    """Stop once the validation value has dropped ``patience`` epochs in a row."""

    def __init__(self, patience: int = 3):
        self.patience = patience
        self.history: list[float] = []
        self.drops = 0
        self.best_epoch = 0

    def update(self, value: float) -> bool:
        if self.history and value < self.history[-1]:
            self.drops += 1
        else:
            self.drops = 0
        if not self.history or value > max(self.history):
            self.best_epoch = len(self.history) + 1
        self.history.append(value)
        return self.drops >= self.patience


@dataclass
class EpochLog:
    epoch: int
    loss: float
    r1_05: float
    r1_07: float

    @property
    def total(self) -> float:
        return self.r1_05 + self.r1_07

    def line(self) -> str:
        return f"{self.epoch}\t{self.loss:.6f}\t{self.r1_05:.2f}\t{self.r1_07:.2f}\t{self.total:.2f}"


@dataclass
class TrainResult:
    model: Conquer
    history: list[EpochLog] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False
    n_train: int = 0
    seconds: float = 0.0


def training_step(model: Conquer, opt: AdamW, corpus: Corpus, query: QueryRecord, negatives: Sequence[str],
                  cfg: RunConfig) -> LossReport:
    tc, mc = cfg.train, model.cfg
    videos = [corpus[query.video_id]] + [corpus[v] for v in negatives]
    vb = batch_videos(videos, mc.max_clips, T.get_dtype())
    qi = query_input(query.tokens, mc.max_tokens, T.get_dtype())
    gt = align_ground_truth(query.t_begin, query.t_end, videos[0].clip_len, videos[0].n_clips)
    out = model(qi, vb)
    moment, lb, le = shared_softmax_loss(out.scores.begin, out.scores.end, gt, vb.mask)
    total = moment * tc.loss_w_moment
    video = None
    if out.video_score is not None and len(videos) > 1:
        video = video_ce_loss(out.video_score)
        total = total + video * tc.loss_w_video
    opt.zero_grad()
    total.backward()
    opt.step(allow_missing=out.video_score is not None and len(videos) == 1)
    return LossReport(moment, video, total, lb, le)


def train(model: Conquer, corpus: Corpus, train_queries: Sequence[QueryRecord], val_queries: Sequence[QueryRecord],
          rank_lists: Mapping[str, RankList], cfg: RunConfig, out_dir: str | Path | None = None,
          on_epoch: Callable[[EpochLog], None] | None = None) -> TrainResult:
    """Train with per-epoch validation and early stopping; the best epoch's weights are restored."""
    tc = cfg.train
    if tc.scoring == "exclusive" and model.vs_head is None:
        raise TrainingError("exclusive scoring needs vs_head=on")
    usable = filter_trainable(train_queries, rank_lists, tc.exclusion_depth)
    if not usable:
        raise TrainingError("no training queries left after excluding gt rank > "
                            f"{tc.exclusion_depth}")
    log.info("training on %d/%d queries (%d excluded)", len(usable), len(train_queries),
             len(train_queries) - len(usable))
    rng = np.random.default_rng(tc.train_seed)
    opt = AdamW(model.parameters(), lr=tc.lr, weight_decay=tc.weight_decay)
    stopper = EarlyStopping(tc.patience)
    result = TrainResult(model, n_train=len(usable))
    best_state = model.state_dict()
    metrics_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out_dir / "metrics.tsv", "w", encoding="utf-8")
        metrics_fh.write("epoch\tloss\tR1@0.5\tR1@0.7\tsum\n")
    start = time.perf_counter()
    try:
        for epoch in range(1, tc.max_epochs + 1):
            losses = []
            for qi in rng.permutation(len(usable)):
                q = usable[qi]
                negs = sample_negatives(rank_lists[q.query_id], q.video_id, tc.depth_extension_x, tc.n_neg, rng)
                losses.append(training_step(model, opt, corpus, q, negs, cfg).total.item())
            r05, r07 = vcmr_r1_sum(model, corpus, val_queries, rank_lists, cfg.retrieval, tc.scoring, tc.val_top_k) \
                if val_queries else (0.0, 0.0)
            entry = EpochLog(epoch, float(np.mean(losses)), r05, r07)
            result.history.append(entry)
            log.info("epoch %d loss %.5f R1@0.5 %.2f R1@0.7 %.2f", epoch, entry.loss, r05, r07)
            if metrics_fh:
                metrics_fh.write(entry.line() + "\n")
                metrics_fh.flush()
            if on_epoch:
                on_epoch(entry)
            stop = stopper.update(entry.total)
            if stopper.best_epoch == epoch:
                best_state = model.state_dict()
                if out_dir is not None:
                    save_checkpoint(out_dir / "best.ckpt", model, cfg)
            if stop:
                result.stopped_early = True
                break
    finally:
        if metrics_fh:
            metrics_fh.close()
    model.load_state_dict(best_state)
    result.best_epoch = stopper.best_epoch
    result.seconds = time.perf_counter() - start
    return result

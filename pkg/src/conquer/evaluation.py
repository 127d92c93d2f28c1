"""Temporal IoU and recall@K for VCMR, SVMR and VR."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .config import RetrievalConfig
from .data import Corpus, QueryRecord, RankList
from .model import Conquer
from .retrieval import svmr_search, vcmr_search

TASKS = ("VCMR", "SVMR", "VR")
DEFAULT_KS = (1, 5, 10, 100)
DEFAULT_IOUS = (0.5, 0.7)


def temporal_iou(span_a: tuple[float, float], span_b: tuple[float, float]) -> float:
    a0, a1 = span_a
    b0, b1 = span_b
    if not (a0 < a1 and b0 < b1):
        raise ValueError(f"degenerate span: {span_a} / {span_b}")
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    return inter / ((a1 - a0) + (b1 - b0) - inter)


# a ranked moment as (video id, t_begin, t_end); ground truth likewise
Moment = tuple[str, float, float]


def _first_hit(ranked: Sequence[Moment], gt: Moment, iou_thr: float | None, task: str) -> int | None:
    """1-based rank of the first qualifying entry under ``task`` semantics, or None."""
    gvid, g0, g1 = gt
    if task == "VR":
        seen: list[str] = []
        for vid, _, _ in ranked:
            if vid not in seen:
                seen.append(vid)
                if vid == gvid:
                    return len(seen)
        return None
    pos = 0
    for vid, t0, t1 in ranked:
        if task == "SVMR" and vid != gvid:
            continue
        pos += 1
        if vid == gvid and temporal_iou((t0, t1), (g0, g1)) >= iou_thr - 1e-12:
            return pos
    return None


def recall_at_k(ranked: Mapping[str, Sequence[Moment]], gt: Mapping[str, Moment], k: int,
                iou_thr: float | None = 0.7, task: str = "VCMR") -> float:
    """Percentage of queries with a qualifying answer at rank <= k.

    VCMR ranks moments across the corpus; SVMR only counts moments from the
    ground-truth video; VR ranks videos by first appearance and ignores IoU.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    if task != "VR" and not (iou_thr is not None and 0 < iou_thr <= 1):
        raise ValueError("IoU threshold must be in (0, 1]")
    if not gt:
        return 0.0
    hits = 0
    for qid, g in gt.items():
        r = _first_hit(ranked.get(qid, ()), g, iou_thr, task)
        if r is not None and r <= k:
            hits += 1
    return 100.0 * hits / len(gt)


def oracle_recall(rank_lists: Mapping[str, RankList], gt_videos: Mapping[str, str], k: int) -> float:
    """Percentage of queries whose ground-truth video is within the stage-1 top-k."""
    if not gt_videos:
        return 0.0
    hits = 0
    for qid, vid in gt_videos.items():
        rl = rank_lists.get(qid)
        if rl is not None and any(v == vid for v, _ in rl.entries[:k]):
            hits += 1
    return 100.0 * hits / len(gt_videos)


@dataclass
class EvalReport:
    values: dict[tuple[str, int, float | None], float] = field(default_factory=dict)
    n_queries: int = 0
    oracle_recall: float = 0.0
    top_k: int = 10

    def get(self, task: str, k: int, iou: float | None = None) -> float:
        return self.values[(task, k, None if task == "VR" else iou)]

    def to_kv(self) -> str:
        lines = []
        for (task, k, iou), v in sorted(self.values.items(), key=lambda kv: (TASKS.index(kv[0][0]), kv[0][2] or 0, kv[0][1])):
            key = f"{task}.{k}" if iou is None else f"{task}.{k}.{iou}"
            lines.append(f"{key}={v:.2f}")
        lines.append(f"oracle.{self.top_k}={self.oracle_recall:.2f}")
        lines.append(f"queries={self.n_queries}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        ks = sorted({k for _, k, _ in self.values})
        head = f"{'task':<6}{'IoU':>6}" + "".join(f"{'R@' + str(k):>9}" for k in ks)
        lines = [head, "-" * len(head)]
        rows = sorted({(t, i) for t, _, i in self.values}, key=lambda r: (TASKS.index(r[0]), r[1] or 0))
        for task, iou in rows:
            cells = "".join(f"{self.values.get((task, k, iou), float('nan')):>9.2f}" for k in ks)
            lines.append(f"{task:<6}{'-' if iou is None else iou:>6}{cells}")
        lines.append(f"queries={self.n_queries}  oracle recall@{self.top_k}={self.oracle_recall:.2f}")
        return "\n".join(lines) + "\n"


def evaluate(model: Conquer, corpus: Corpus, queries: Sequence[QueryRecord], rank_lists: Mapping[str, RankList],
             rcfg: RetrievalConfig, scoring: str = "general", top_k: int | None = None,
             ks: Sequence[int] = DEFAULT_KS, ious: Sequence[float] = DEFAULT_IOUS,
             tasks: Sequence[str] = TASKS) -> EvalReport:
    k = top_k or rcfg.top_k
    vcmr: dict[str, list[Moment]] = {}
    svmr: dict[str, list[Moment]] = {}
    gt: dict[str, Moment] = {}
    max_k = max(ks)
    for q in queries:
        gt[q.query_id] = (q.video_id, q.t_begin, q.t_end)
        if "VCMR" in tasks or "VR" in tasks:
            moments = vcmr_search(model, q, corpus, rank_lists[q.query_id], rcfg, scoring, k, max_results=max_k)
            vcmr[q.query_id] = [(m.video_id, m.t_begin, m.t_end) for m in moments]
        if "SVMR" in tasks:
            moments = svmr_search(model, q, corpus[q.video_id], rcfg, max_results=max_k)
            svmr[q.query_id] = [(m.video_id, m.t_begin, m.t_end) for m in moments]
    report = EvalReport(n_queries=len(queries), top_k=k)
    report.oracle_recall = oracle_recall(rank_lists, {q.query_id: q.video_id for q in queries}, k)
    for task in tasks:
        ranked = svmr if task == "SVMR" else vcmr
        for kk in ks:
            if task == "VR":
                report.values[(task, kk, None)] = recall_at_k(ranked, gt, kk, None, "VR")
                continue
            for iou in ious:
                report.values[(task, kk, iou)] = recall_at_k(ranked, gt, kk, iou, task)
    return report


def vcmr_r1_sum(model: Conquer, corpus: Corpus, queries: Sequence[QueryRecord], rank_lists, rcfg: RetrievalConfig,
                scoring: str = "general", top_k: int = 10) -> tuple[float, float]:
    """VCMR R@1 at IoU 0.5 and 0.7, the early-stopping signal."""
    rep = evaluate(model, corpus, queries, rank_lists, rcfg, scoring, top_k, ks=(1,), tasks=("VCMR",))
    return rep.get("VCMR", 1, 0.5), rep.get("VCMR", 1, 0.7)

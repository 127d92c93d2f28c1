"""Corpus records, feature-file ingestion, subtitle assignment and the synthetic corpus."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .container import ContainerError, read_arrays, write_arrays

log = logging.getLogger(__name__)

DEFAULT_CLIP_LEN = 1.5


class CorpusError(ValueError):
    pass


class DimensionMismatch(CorpusError):
    def __init__(self, path, what: str, expected: int, actual: int):
        super().__init__(f"{path}: {what} dimension mismatch, expected {expected}, got {actual}")
        self.path = str(path)
        self.expected = expected
        self.actual = actual


@dataclass
class VideoRecord:
    video_id: str
    duration: float
    visual: np.ndarray  # (n, D_v)
    textual: np.ndarray  # (n, D_t)
    clip_len: float = DEFAULT_CLIP_LEN

    @property
    def n_clips(self) -> int:
        return int(self.visual.shape[0])


@dataclass
class QueryRecord:
    query_id: str
    tokens: np.ndarray  # (m, D_t)
    video_id: str
    t_begin: float
    t_end: float
    split: str = "train"
    beta: float | None = None  # modality bias, known only for synthetic queries


@dataclass
class SubtitleSpan:
    t_begin: float
    t_end: float
    feature: np.ndarray

    def __post_init__(self):
        if not self.t_begin < self.t_end:
            raise ValueError(f"subtitle span must satisfy t_begin < t_end, got {self.t_begin}, {self.t_end}")


@dataclass
class RankList:
    query_id: str
    entries: list[tuple[str, float]]  # (video id, stage-1 score), best first

    def __post_init__(self):
        ids = [v for v, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError(f"rank list for {self.query_id} has duplicate video ids")
        scores = [s for _, s in self.entries]
        if any(b > a for a, b in zip(scores, scores[1:])):
            raise ValueError(f"rank list for {self.query_id} is not sorted by score")

    def rank_of(self, video_id: str) -> int | None:
        """1-based rank, or None when absent."""
        for i, (v, _) in enumerate(self.entries):
            if v == video_id:
                return i + 1
        return None

    def top(self, k: int) -> list[tuple[str, float]]:
        return self.entries[:k]


@dataclass
class Corpus:
    videos: dict[str, VideoRecord]
    clip_len: float = DEFAULT_CLIP_LEN
    corpus_id: str = "corpus"

    def __len__(self) -> int:
        return len(self.videos)

    def __getitem__(self, vid: str) -> VideoRecord:
        try:
            return self.videos[vid]
        except KeyError:
            raise KeyError(f"unknown video id {vid!r}") from None

    @property
    def visual_dim(self) -> int:
        return next(iter(self.videos.values())).visual.shape[1]

    @property
    def text_dim(self) -> int:
        return next(iter(self.videos.values())).textual.shape[1]


# ---------------------------------------------------------------- clips & subtitles


def clip_count(duration: float, clip_len: float = DEFAULT_CLIP_LEN) -> int:
    return max(1, math.ceil(duration / clip_len - 1e-9))


def assign_subtitles(subtitles: Sequence[SubtitleSpan], clip_len: float, n: int,
                     text_dim: int | None = None) -> np.ndarray:
    """Per-clip textual features: mean of every subtitle overlapping the clip, else zeros.

    A subtitle overlaps clip i when it intersects [i*clip_len, (i+1)*clip_len)
    with positive length.
    """
    if text_dim is None:
        if not subtitles:
            raise ValueError("text_dim is required when there are no subtitles")
        text_dim = len(subtitles[0].feature)
    acc = np.zeros((n, text_dim), dtype=np.float64)
    counts = np.zeros(n, dtype=np.int64)
    for sub in subtitles:
        first = max(0, math.floor(sub.t_begin / clip_len))
        last = min(n - 1, math.ceil(sub.t_end / clip_len) - 1)
        for i in range(first, last + 1):
            lo, hi = i * clip_len, (i + 1) * clip_len
            if min(hi, sub.t_end) - max(lo, sub.t_begin) > 0:
                acc[i] += sub.feature
                counts[i] += 1
    nz = counts > 0
    acc[nz] /= counts[nz, None]
    return acc.astype(np.float32)


# ---------------------------------------------------------------- files


MANIFEST = "manifest.tsv"
QUERIES = "queries.tsv"
QUERY_FEATURES = "queries.bin"
RANKLIST = "ranklist.tsv"


def write_features(path, matrix: np.ndarray, name: str = "features") -> None:
    write_arrays(path, {name: np.asarray(matrix)})


def read_features(path, name: str = "features") -> np.ndarray:
    arrays = read_arrays(path)
    if name not in arrays:
        raise ContainerError(f"{path}: no matrix named {name!r}")
    arr = arrays[name]
    if arr.ndim != 2:
        raise ContainerError(f"{path}: {name!r} must be 2-D, got shape {arr.shape}")
    return arr


def load_corpus(manifest_path, visual_dim: int | None = None, text_dim: int | None = None,
                max_clips: int | None = None) -> Corpus:
    """Load the videos listed in a manifest.

    Manifest lines are tab separated ``video_id duration visual_path textual_path subtitle_path``
    with ``-`` for absent files.  ``# key=value`` header lines set ``corpus_id`` and ``clip_len``.
    Relative paths resolve against the manifest's directory.
    """
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    clip_len = DEFAULT_CLIP_LEN
    corpus_id = root.name
    videos: dict[str, VideoRecord] = {}
    with open(manifest_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                if key == "clip_len":
                    clip_len = float(val)
                elif key == "corpus_id":
                    corpus_id = val
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise CorpusError(f"{manifest_path}:{lineno}: expected 5 tab-separated fields, got {len(parts)}")
            vid, dur, vpath, tpath, spath = parts
            duration = float(dur)
            n = clip_count(duration, clip_len)
            vfile = root / vpath
            visual = read_features(vfile)
            if visual_dim is not None and visual.shape[1] != visual_dim:
                raise DimensionMismatch(vfile, "visual", visual_dim, visual.shape[1])
            if visual.shape[0] != n:
                raise CorpusError(f"{vfile}: {visual.shape[0]} clip rows, duration implies {n}")
            if tpath != "-":
                tfile = root / tpath
                textual = read_features(tfile)
                if text_dim is not None and textual.shape[1] != text_dim:
                    raise DimensionMismatch(tfile, "textual", text_dim, textual.shape[1])
                if textual.shape[0] != n:
                    raise CorpusError(f"{tfile}: {textual.shape[0]} clip rows, duration implies {n}")
            elif spath != "-":
                arrays = read_arrays(root / spath)
                spans, feats = arrays["spans"], arrays["features"]
                if text_dim is not None and feats.shape[1] != text_dim:
                    raise DimensionMismatch(root / spath, "textual", text_dim, feats.shape[1])
                subs = [SubtitleSpan(float(a), float(b), f) for (a, b), f in zip(spans, feats)]
                textual = assign_subtitles(subs, clip_len, n, feats.shape[1])
            else:
                if text_dim is None:
                    raise CorpusError(f"{manifest_path}:{lineno}: no textual source and text_dim unknown")
                textual = np.zeros((n, text_dim), dtype=np.float32)
            if max_clips is not None and n > max_clips:
                log.warning("video %s has %d clips; truncating to %d", vid, n, max_clips)
                visual, textual = visual[:max_clips], textual[:max_clips]
                duration = max_clips * clip_len
            videos[vid] = VideoRecord(vid, duration, visual, textual, clip_len)
    return Corpus(videos, clip_len, corpus_id)


def write_corpus(directory, corpus: Corpus, queries: Sequence[QueryRecord] = (),
                 rank_lists: Sequence[RankList] = ()) -> None:
    d = Path(directory)
    (d / "features").mkdir(parents=True, exist_ok=True)
    with open(d / MANIFEST, "w", encoding="utf-8") as fh:
        fh.write(f"# corpus_id={corpus.corpus_id}\n# clip_len={corpus.clip_len}\n")
        for vid, rec in corpus.videos.items():
            vpath = f"features/{vid}.visual.bin"
            tpath = f"features/{vid}.textual.bin"
            write_features(d / vpath, rec.visual)
            write_features(d / tpath, rec.textual)
            fh.write(f"{vid}\t{rec.duration!r}\t{vpath}\t{tpath}\t-\n")
    if queries:
        write_queries(d / QUERIES, d / QUERY_FEATURES, queries)
    if rank_lists:
        write_rank_lists(d / RANKLIST, rank_lists)


def write_queries(tsv_path, bin_path, queries: Sequence[QueryRecord]) -> None:
    with open(tsv_path, "w", encoding="utf-8") as fh:
        fh.write("query_id\tvideo_id\tt_begin\tt_end\tsplit\tbeta\n")
        for q in queries:
            beta = "-" if q.beta is None else repr(q.beta)
            fh.write(f"{q.query_id}\t{q.video_id}\t{q.t_begin!r}\t{q.t_end!r}\t{q.split}\t{beta}\n")
    write_arrays(bin_path, {q.query_id: q.tokens for q in queries})


def load_queries(tsv_path, bin_path=None, text_dim: int | None = None) -> list[QueryRecord]:
    tsv_path = Path(tsv_path)
    bin_path = Path(bin_path) if bin_path else tsv_path.with_suffix(".bin")
    feats = read_arrays(bin_path)
    out = []
    with open(tsv_path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header[:4] != ["query_id", "video_id", "t_begin", "t_end"]:
            raise CorpusError(f"{tsv_path}: unexpected header {header}")
        for line in fh:
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            qid, vid, tb, te = parts[:4]
            split = parts[4] if len(parts) > 4 else "test"
            beta = float(parts[5]) if len(parts) > 5 and parts[5] != "-" else None
            if qid not in feats:
                raise CorpusError(f"{bin_path}: missing token features for query {qid}")
            tokens = feats[qid]
            if text_dim is not None and tokens.shape[1] != text_dim:
                raise DimensionMismatch(bin_path, f"query {qid} token", text_dim, tokens.shape[1])
            out.append(QueryRecord(qid, tokens, vid, float(tb), float(te), split, beta))
    return out


def write_rank_lists(path, rank_lists: Sequence[RankList]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("query_id\trank\tvideo_id\tscore\n")
        for rl in rank_lists:
            for i, (vid, s) in enumerate(rl.entries, 1):
                fh.write(f"{rl.query_id}\t{i}\t{vid}\t{s!r}\n")


def load_rank_lists(path) -> dict[str, RankList]:
    rows: dict[str, list[tuple[int, str, float]]] = {}
    with open(path, encoding="utf-8") as fh:
        fh.readline()
        for line in fh:
            if not line.strip():
                continue
            qid, rank, vid, score = line.rstrip("\n").split("\t")
            rows.setdefault(qid, []).append((int(rank), vid, float(score)))
    return {qid: RankList(qid, [(v, s) for _, v, s in sorted(r)]) for qid, r in rows.items()}


def load_dataset(directory, max_clips: int | None = None):
    """Corpus, queries and rank lists from a directory written by :func:`write_corpus`."""
    d = Path(directory)
    corpus = load_corpus(d / MANIFEST, max_clips=max_clips)
    queries = load_queries(d / QUERIES, d / QUERY_FEATURES, corpus.text_dim) if (d / QUERIES).exists() else []
    ranks = load_rank_lists(d / RANKLIST) if (d / RANKLIST).exists() else {}
    return corpus, queries, ranks


# ---------------------------------------------------------------- batching


@dataclass
class VideoBatch:
    video_ids: list[str]
    visual: np.ndarray  # (B, L_v, D_v)
    textual: np.ndarray  # (B, L_v, D_t)
    mask: np.ndarray  # (B, L_v) bool
    n_clips: np.ndarray  # (B,)

    def __len__(self) -> int:
        return len(self.video_ids)


@dataclass
class QueryInput:
    tokens: np.ndarray  # (1, L_q, D_t)
    mask: np.ndarray  # (1, L_q) bool


def batch_videos(videos: Sequence[VideoRecord], max_clips: int, dtype=np.float32, trim: bool = True) -> VideoBatch:
    """Pad a list of videos into one masked batch.

    With ``trim`` the padded length is the longest video in the batch rather
    than ``max_clips``; masking makes the two layouts produce identical scores.
    """
    B = len(videos)
    if B == 0:
        raise ValueError("empty video batch")
    dv, dt = videos[0].visual.shape[1], videos[0].textual.shape[1]
    L = min(max_clips, max(v.n_clips for v in videos)) if trim else max_clips
    vis = np.zeros((B, L, dv), dtype=dtype)
    txt = np.zeros((B, L, dt), dtype=dtype)
    mask = np.zeros((B, L), dtype=bool)
    counts = np.zeros(B, dtype=np.int64)
    for i, v in enumerate(videos):
        n = v.n_clips
        if n > max_clips:
            raise ValueError(f"video {v.video_id} has {n} clips > max_clips={max_clips}")
        if v.visual.shape[1] != dv or v.textual.shape[1] != dt:
            raise ValueError(f"video {v.video_id}: feature dims differ within batch")
        vis[i, :n] = v.visual
        txt[i, :n] = v.textual
        mask[i, :n] = True
        counts[i] = n
    return VideoBatch([v.video_id for v in videos], vis, txt, mask, counts)


def query_input(tokens: np.ndarray, max_tokens: int, dtype=np.float32, trim: bool = True) -> QueryInput:
    m = len(tokens)
    if m == 0:
        raise ValueError("empty query")
    if m > max_tokens:
        raise ValueError(f"query has {m} tokens > max_tokens={max_tokens}")
    L = m if trim else max_tokens
    tok = np.zeros((1, L, tokens.shape[1]), dtype=dtype)
    tok[0, :m] = tokens
    mask = np.zeros((1, L), dtype=bool)
    mask[0, :m] = True
    return QueryInput(tok, mask)


# ---------------------------------------------------------------- synthetic corpus


@dataclass
class SyntheticSpec:
    """Parameters of the planted-moment corpus generator.

    Each query describes ``concepts_per_query`` latent concepts that occur one
    after another inside its planted span.  Every span clip carries one of them
    in both channels, weighted ``beta`` in the visual one and ``1 - beta`` in
    the textual one; everything else is unit-variance noise.  ``snr`` is the
    total signal amplitude per dimension (both channels together) relative to
    that noise.  Query tokens are noisy views of the concepts plus
    one cue token whose direction encodes the query's modality bias.
    With ``concept_vocab > 0`` concepts are drawn from a fixed vocabulary of
    that size (so they recur across queries); with 0 every query gets fresh ones.
    """

    n_videos: int = 50
    min_clips: int = 12
    max_clips: int = 20
    queries_per_video: int = 4
    span_min: int = 1
    span_max: int = 6
    beta: float = 0.5
    beta_mix: tuple[float, ...] = ()
    snr: float = 2.0
    visual_dim: int = 32
    text_dim: int = 32
    concept_dim: int = 16
    min_tokens: int = 4
    max_tokens: int = 8
    token_noise: float = 0.5
    shared_text_map: bool = True
    concepts_per_query: int = 2
    concept_vocab: int = 0
    clip_len: float = DEFAULT_CLIP_LEN
    rank_dist: str = "uniform:1:10"
    rank_decay: float = 0.02
    rank_noise: float = 0.0
    split: tuple[float, float, float] = (0.7, 0.15, 0.15)
    seed: int = 0

    def validate(self) -> None:
        if not 1 <= self.span_min <= self.span_max:
            raise ValueError("need 1 <= span_min <= span_max")
        if self.min_clips > self.max_clips or self.min_clips < 1:
            raise ValueError("need 1 <= min_clips <= max_clips")
        if self.span_max > self.min_clips:
            raise ValueError(f"infeasible spec: span_max={self.span_max} longer than shortest video "
                             f"({self.min_clips} clips)")
        if self.queries_per_video * self.span_min > self.min_clips:
            raise ValueError("infeasible spec: planted spans cannot fit without overlap")
        for b in (self.beta, *self.beta_mix):
            if not 0.0 <= b <= 1.0:
                raise ValueError(f"modality bias {b} outside [0, 1]")
        if self.concepts_per_query < 1:
            raise ValueError("need concepts_per_query >= 1")
        if self.concept_vocab and self.concept_vocab < self.concepts_per_query:
            raise ValueError("concept_vocab smaller than concepts_per_query")
        if self.min_tokens < 1 or self.min_tokens > self.max_tokens:
            raise ValueError("need 1 <= min_tokens <= max_tokens")


def _rank_sampler(spec: str, rng: np.random.Generator, n_videos: int):
    kind, *args = spec.split(":")
    if kind == "fixed":
        p = int(args[0])
        return lambda: min(p, n_videos)
    if kind == "uniform":
        lo, hi = int(args[0]), int(args[1])
        hi = min(hi, n_videos)
        return lambda: int(rng.integers(lo, hi + 1))
    if kind == "geometric":
        prob = float(args[0])
        return lambda: int(min(rng.geometric(prob), n_videos))
    raise ValueError(f"unknown rank distribution {spec!r}")


def oracle_rank_lists(queries: Sequence[QueryRecord], video_ids: Sequence[str], rng: np.random.Generator,
                      rank_dist: str = "uniform:1:10", decay: float = 0.02, noise: float = 0.0,
                      ranks: Sequence[int] | None = None) -> list[RankList]:
    """Stage-1 stand-in: plant each ground-truth video at a sampled (or given) rank.

    Other videos fill the remaining ranks in random order.  Scores decay
    exponentially with rank; ``noise`` jitters them before re-sorting the
    score column, so the planted ranks are never disturbed.
    """
    sampler = _rank_sampler(rank_dist, rng, len(video_ids))
    out = []
    for qi, q in enumerate(queries):
        p = ranks[qi] if ranks is not None else sampler()
        others = [v for v in video_ids if v != q.video_id]
        order = [others[i] for i in rng.permutation(len(others))]
        order.insert(p - 1, q.video_id)
        base = np.exp(-decay * np.arange(len(order)))
        if noise > 0:
            base = np.sort(np.clip(base + noise * rng.normal(size=len(order)), 1e-6, None))[::-1]
        out.append(RankList(q.query_id, [(v, float(s)) for v, s in zip(order, base)]))
    return out


def generate_synthetic(spec: SyntheticSpec):
    """Build ``(corpus, queries, rank_lists)`` reproducibly from ``spec.seed``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    dc = spec.concept_dim
    # fixed random maps from concept space to each feature space
    A_v = np.linalg.qr(rng.normal(size=(max(spec.visual_dim, dc),) * 2))[0][:spec.visual_dim, :dc]
    A_t = np.linalg.qr(rng.normal(size=(max(spec.text_dim, dc),) * 2))[0][:spec.text_dim, :dc]
    A_q = np.linalg.qr(rng.normal(size=(max(spec.text_dim, dc),) * 2))[0][:spec.text_dim, :dc]
    if spec.shared_text_map:
        # queries and subtitles pass through the same text encoder
        A_q = A_t
    cue_v = rng.normal(size=spec.text_dim)
    cue_t = rng.normal(size=spec.text_dim)
    vocab = rng.normal(size=(spec.concept_vocab, dc))

    def embed(A, c, dim):
        v = A @ c
        return v / (np.linalg.norm(v) + 1e-12) * math.sqrt(dim)

    videos: dict[str, VideoRecord] = {}
    queries: list[QueryRecord] = []
    qcount = 0
    for vi in range(spec.n_videos):
        vid = f"v{vi:04d}"
        n = int(rng.integers(spec.min_clips, spec.max_clips + 1))
        visual = rng.normal(size=(n, spec.visual_dim))
        textual = rng.normal(size=(n, spec.text_dim))
        spans = _place_spans(rng, n, spec.queries_per_video, spec.span_min, spec.span_max)
        for (b, e) in spans:
            if spec.beta_mix:
                beta = float(spec.beta_mix[qcount % len(spec.beta_mix)])
            else:
                beta = spec.beta
            # the moment is a sequence of steps, each clip showing one of the query's concepts
            k = spec.concepts_per_query
            if spec.concept_vocab:
                C = vocab[rng.choice(spec.concept_vocab, size=k, replace=False)]
            else:
                C = rng.normal(size=(k, dc))
            C = C / np.linalg.norm(C, axis=1, keepdims=True)
            steps = np.minimum((np.arange(e - b + 1) * k) // (e - b + 1), k - 1)
            # channel weights beta : 1 - beta, scaled so the total signal amplitude is snr
            wv, wt = np.array([beta, 1.0 - beta]) / math.hypot(beta, 1.0 - beta)
            for off, j in enumerate(steps):
                visual[b + off] += spec.snr * wv * embed(A_v, C[j], spec.visual_dim)
                textual[b + off] += spec.snr * wt * embed(A_t, C[j], spec.text_dim)
            m = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
            n_content = max(m - 1, 1)
            word = np.arange(n_content) % k  # every concept gets at least one token when n_content >= k
            content = np.stack([embed(A_q, C[j], spec.text_dim) for j in word])
            content += spec.token_noise * rng.normal(size=content.shape)
            cue = beta * cue_v + (1.0 - beta) * cue_t + spec.token_noise * rng.normal(size=spec.text_dim)
            tokens = np.vstack([content, cue[None]]) if m > 1 else content
            queries.append(QueryRecord(
                query_id=f"q{qcount:05d}", tokens=tokens.astype(np.float32), video_id=vid,
                t_begin=b * spec.clip_len, t_end=(e + 1) * spec.clip_len, beta=beta))
            qcount += 1
        videos[vid] = VideoRecord(vid, n * spec.clip_len, visual.astype(np.float32),
                                  textual.astype(np.float32), spec.clip_len)

    order = rng.permutation(len(queries))
    n_train = int(round(spec.split[0] * len(queries)))
    n_val = int(round(spec.split[1] * len(queries)))
    for rank, qi in enumerate(order):
        queries[qi].split = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")

    corpus = Corpus(videos, spec.clip_len, f"synthetic-{spec.seed}")
    ranks = oracle_rank_lists(queries, list(videos), rng, spec.rank_dist, spec.rank_decay, spec.rank_noise)
    return corpus, queries, ranks


def _place_spans(rng, n: int, k: int, lo: int, hi: int) -> list[tuple[int, int]]:
    """k non-overlapping spans of length in [lo, hi] inside n clips."""
    for _ in range(1000):
        lengths = rng.integers(lo, hi + 1, size=k)
        slack = n - int(lengths.sum())
        if slack < 0:
            continue
        # distribute slack into k+1 gaps
        cuts = np.sort(rng.integers(0, slack + 1, size=k))
        gaps = np.diff(np.concatenate([[0], cuts]))
        spans, pos = [], 0
        for g, ln in zip(gaps, lengths):
            pos += int(g)
            spans.append((pos, pos + int(ln) - 1))
            pos += int(ln)
        order = rng.permutation(k)
        return [spans[i] for i in order]
    raise ValueError(f"cannot place {k} spans of length {lo}..{hi} in {n} clips")


def split_queries(queries: Sequence[QueryRecord], split: str) -> list[QueryRecord]:
    return [q for q in queries if q.split == split]


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


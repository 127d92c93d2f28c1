"""Acceptance criteria, each run at its stated tolerance; one PASS/FAIL line per criterion."""

import time
from pathlib import Path

import numpy as np
import pytest

from conquer import tensor as T
from conquer.config import load_config
from conquer.data import RankList, batch_videos, generate_synthetic, query_input, split_queries
from conquer.evaluation import evaluate, recall_at_k, temporal_iou
from conquer.gradcheck import run_all
from conquer.model import Conquer, load_checkpoint, save_checkpoint
from conquer.optim import AdamW
from conquer.retrieval import (MomentCandidate, MomentLengthBounds, generate_candidates, nms, normalize_scores,
                               vcmr_search)
from conquer.training import sample_negatives, shared_log_probs, shared_softmax_loss, train

from conftest import record_acceptance
from test_evaluation import brute_recall, random_instance
from test_retrieval import brute_candidates, brute_nms

# desk-scale recipe shared by every synthetic run
DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.cfg"


def desk_config(**overrides):
    return load_config(DESK, [f"{k}={v}" for k, v in overrides.items()])


_RUNS: dict = {}


def synthetic_run(**overrides):
    """Train once per distinct override set and evaluate on the held-out test split."""
    key = tuple(sorted(overrides.items()))
    if key not in _RUNS:
        cfg = desk_config(**overrides)
        corpus, queries, ranks = generate_synthetic(cfg.synth)
        rl = {r.query_id: r for r in ranks}
        model = Conquer(cfg.model)
        start = time.process_time()
        res = train(model, corpus, split_queries(queries, "train"), split_queries(queries, "val"), rl, cfg)
        cpu = time.process_time() - start
        test = split_queries(queries, "test")
        rep = evaluate(model, corpus, test, rl, cfg.retrieval, cfg.train.scoring, cfg.retrieval.top_k,
                       ks=(1,), tasks=("VCMR", "VR"))
        _RUNS[key] = dict(model=model, corpus=corpus, queries=queries, cfg=cfg, result=res, cpu=cpu,
                          r1=rep.get("VCMR", 1, 0.7), vr1=rep.get("VR", 1))
    return _RUNS[key]


# ---------------------------------------------------------------- 1


def test_criterion_1_gradient_integrity():
    start = time.perf_counter()
    results = run_all(seeds=20, tol=1e-4)
    secs = time.perf_counter() - start
    worst = max(results, key=lambda r: r.max_rel_error)
    ok = all(r.passed for r in results) and all(r.seeds >= 20 for r in results) and secs < 300
    record_acceptance(1, "gradient integrity", ok,
                      f"{len(results)} checks x 20 seeds, worst {worst.name} {worst.max_rel_error:.2e} "
                      f"(< 1e-4), {secs:.0f}s (< 300s)")
    assert ok, [r.line() for r in results if not r.passed]


# ---------------------------------------------------------------- 2


def test_criterion_2_oracle_equivalence():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    n = 1000
    worst = 0.0
    for _ in range(n):
        # candidates
        m = int(rng.integers(1, 11))
        lo = int(rng.integers(1, m + 1))
        hi = int(rng.integers(lo, 11))
        b, e = rng.normal(size=m) * 3, rng.normal(size=m) * 3
        got = {(c.begin, c.end): c.prob for c in generate_candidates(b, e, MomentLengthBounds(lo, hi))}
        ref = brute_candidates(b, e, lo, hi)
        assert got.keys() == ref.keys()
        worst = max([worst] + [abs(got[k] - ref[k]) for k in ref])
        # nms on at most 5 candidates
        spans = []
        for _ in range(int(rng.integers(1, 6))):
            s0 = int(rng.integers(0, 10))
            spans.append((s0, int(rng.integers(s0, 10))))
        scores = rng.random(len(spans))
        cs = [MomentCandidate("v", s0, s1, float(p), 1.0, 0.0, 0.0) for (s0, s1), p in zip(spans, scores)]
        assert [(c.begin, c.end) for c in nms(cs, 0.7, None)] == \
               [spans[i] for i in brute_nms(spans, scores, 0.7, None)]
        # shared-softmax losses
        with T.precision(np.float64):
            bb, ee = rng.normal(size=(3, m)) * 2, rng.normal(size=(3, m)) * 2
            gb, ge = sorted(int(x) for x in rng.integers(0, m, size=2))
            _, lb, le = shared_softmax_loss(T.tensor(bb), T.tensor(ee), (gb, ge))
        worst = max(worst, abs(lb - (np.log(np.exp(bb).sum()) - bb[0, gb])),
                    abs(le - (np.log(np.exp(ee).sum()) - ee[0, ge])))
        # temporal IoU
        a0, b0 = rng.uniform(0, 10, size=2)
        a1, b1 = a0 + rng.uniform(0.1, 5), b0 + rng.uniform(0.1, 5)
        inter = max(0.0, min(a1, b1) - max(a0, b0))
        worst = max(worst, abs(temporal_iou((a0, a1), (b0, b1)) - inter / ((a1 - a0) + (b1 - b0) - inter)))
        # recall@k
        ranked, gt = random_instance(rng)
        for task in ("VCMR", "SVMR", "VR"):
            k = int(rng.integers(1, 6))
            worst = max(worst, abs(recall_at_k(ranked, gt, k, None if task == "VR" else 0.5, task)
                                   - brute_recall(ranked, gt, k, 0.5, task)))
    secs = time.perf_counter() - start
    ok = worst <= 1e-9 and secs < 120
    record_acceptance(2, "oracle equivalence", ok,
                      f"{n} instances per routine, max deviation {worst:.1e} (<= 1e-9), {secs:.1f}s (< 120s)")
    assert ok


# ---------------------------------------------------------------- 3


def test_criterion_3_normalization_invariants():
    rng = np.random.default_rng(3)
    cfg = desk_config(hidden="16", n_clusters="8", vs_head="on", synth_n_videos="20")
    corpus, queries, ranks = generate_synthetic(cfg.synth)
    rl = {r.query_id: r for r in ranks}
    model = Conquer(cfg.model)
    opt = AdamW(model.parameters(), lr=3e-3)
    worst = {"b_hat/e_hat": 0.0, "P_begin/P_end": 0.0, "fusion": 0.0, "netvlad": 0.0}
    for step in range(100):
        q = queries[int(rng.integers(len(queries)))]
        tokens = q.tokens * rng.uniform(0.2, 5.0)  # fuzz the input scale
        negs = sample_negatives(rl[q.query_id], q.video_id, 5, int(rng.integers(0, 4)), rng)
        videos = [corpus[q.video_id]] + [corpus[v] for v in negs]
        vb = batch_videos(videos, cfg.model.max_clips)
        enc = model.encode_query(query_input(tokens, cfg.model.max_tokens))
        w = enc.fusion.weights.data
        worst["fusion"] = max(worst["fusion"], abs(w.sum() - 1), float(-w.min()))
        desc = model.qdf.netvlad(enc.query).data
        worst["netvlad"] = max(worst["netvlad"], abs(np.linalg.norm(desc) - 1))
        out = model(enc, vb)
        for i, v in enumerate(videos):
            n = v.n_clips
            for raw in (out.scores.begin.data[i, :n], out.scores.end.data[i, :n]):
                worst["b_hat/e_hat"] = max(worst["b_hat/e_hat"], abs(normalize_scores(raw).sum() - 1))
        for s in (out.scores.begin, out.scores.end):
            worst["P_begin/P_end"] = max(worst["P_begin/P_end"], abs(np.exp(shared_log_probs(s).data).sum() - 1))
        b = round(q.t_begin / v.clip_len)
        loss, _, _ = shared_softmax_loss(out.scores.begin, out.scores.end, (b, b), vb.mask)
        opt.zero_grad()
        loss.backward()
        opt.step(allow_missing=True)
    ok = max(worst.values()) <= 1e-6
    record_acceptance(3, "normalization invariants", ok,
                      "100 fuzz steps, max deviation " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert ok


# ---------------------------------------------------------------- 4


@pytest.mark.slow
def test_criterion_4_synthetic_end_to_end():
    full = synthetic_run()
    base = synthetic_run(qdf="average", qal="off")
    qal_only = synthetic_run(qdf="average")
    qdf_only = synthetic_run(qal="off")
    cpu_max = max(r["cpu"] for r in (full, base, qal_only, qdf_only))
    a = full["r1"] >= 80.0
    b = base["r1"] < full["r1"]
    c = qal_only["r1"] >= qdf_only["r1"]
    epochs = max(len(r["result"].history) for r in (full, base, qal_only, qdf_only))
    ok = a and b and c and cpu_max < 1200 and epochs <= 30
    record_acceptance(4, "synthetic end-to-end", ok,
                      f"(a) full R@1 IoU0.7 {full['r1']:.1f} (>= 80) {'ok' if a else 'MISSED'}; "
                      f"(b) baseline {base['r1']:.1f} < full {'ok' if b else 'MISSED'}; "
                      f"(c) QAL-only {qal_only['r1']:.1f} >= QDF-only {qdf_only['r1']:.1f} "
                      f"{'ok' if c else 'MISSED'}; slowest run {cpu_max:.0f}s CPU")
    assert a, "full model below 80%"
    assert b, "baseline not below the full model"
    assert c, "QAL-only below QDF-only"
    assert cpu_max < 1200 and epochs <= 30


# ---------------------------------------------------------------- 5


@pytest.mark.slow
def test_criterion_5_fusion_semantics():
    run = synthetic_run(synth_beta_mix="0.9,0.1")
    model = run["model"]
    mus = {0.9: [], 0.1: []}
    with T.no_grad():
        for q in run["queries"]:
            if q.split == "train":
                continue
            mus[q.beta].append(model.encode_query(query_input(q.tokens, model.cfg.max_tokens)).fusion.visual)
    gap = float(np.mean(mus[0.9]) - np.mean(mus[0.1]))
    ok = gap >= 0.15
    record_acceptance(5, "QDF semantics", ok,
                      f"held-out mean mu_v visual {np.mean(mus[0.9]):.3f} vs textual {np.mean(mus[0.1]):.3f}, "
                      f"gap {gap:.3f} (>= 0.15)")
    assert ok


# ---------------------------------------------------------------- 6


@pytest.mark.slow
def test_criterion_6_shared_normalization():
    rows = []
    for seed in range(4):
        extra = {} if seed == 0 else {"synth_seed": seed}
        with_neg = synthetic_run(**extra)["r1"]
        without = synthetic_run(n_neg=0, **extra)["r1"]
        rows.append((seed, with_neg, without))
    wins = sum(w >= wo for _, w, wo in rows)
    ok = wins >= 3
    record_acceptance(6, "shared normalization", ok,
                      f"N_neg=3 >= N_neg=0 in {wins}/4 seeds (need 3): "
                      + ", ".join(f"seed {s}: {w:.1f} vs {wo:.1f}" for s, w, wo in rows))
    assert ok


# ---------------------------------------------------------------- 7


def test_criterion_7_scoring_contract(tmp_path):
    cfg = desk_config(vs_head="on", synth_n_videos="20")
    corpus, queries, ranks = generate_synthetic(cfg.synth)
    save_checkpoint(tmp_path / "fixed.ckpt", Conquer(cfg.model), cfg)
    model, _ = load_checkpoint(tmp_path / "fixed.ckpt")
    rcfg = cfg.retrieval
    checked = mismatches = 0
    for rl in ranks[:40]:
        q = next(x for x in queries if x.query_id == rl.query_id)
        runs = {m: vcmr_search(model, q, corpus, rl, rcfg, m, 10, max_results=10_000)
                for m in ("general", "exclusive", "disjoint")}
        for vid in {m.video_id for m in runs["general"]}:
            g = [(m.begin, m.end) for m in runs["general"] if m.video_id == vid]
            x = [(m.begin, m.end) for m in runs["exclusive"] if m.video_id == vid]
            mismatches += g != x
        base = [(m.video_id, m.begin, m.end) for m in runs["general"]]
        for c in (2.0, 0.37, 1e3):
            scaled = RankList(rl.query_id, [(v, s * c) for v, s in rl.entries])
            again = [(m.video_id, m.begin, m.end)
                     for m in vcmr_search(model, q, corpus, scaled, rcfg, "general", 10, max_results=10_000)]
            mismatches += again != base
        # disjoint ranks by raw begin + end, which the probabilities never enter
        dj = runs["disjoint"]
        mismatches += any(a.score < b.score for a, b in zip(dj, dj[1:]))
        checked += 1
    ok = mismatches == 0
    record_acceptance(7, "scoring-mode contract", ok,
                      f"{checked} queries: within-video order general == exclusive, r1 x {{2, 0.37, 1000}} "
                      f"leaves general ranking identical; {mismatches} mismatches")
    assert ok


# ---------------------------------------------------------------- 8


def test_criterion_8_throughput():
    cfg = desk_config(hidden="32")
    corpus, queries, ranks = generate_synthetic(cfg.synth)
    model = Conquer(cfg.model)
    qs = {q.query_id: q for q in queries}
    lists = ranks[:100]
    vcmr_search(model, qs[lists[0].query_id], corpus, lists[0], cfg.retrieval, "general", 10)  # warm-up
    start = time.perf_counter()
    for rl in lists:
        vcmr_search(model, qs[rl.query_id], corpus, rl, cfg.retrieval, "general", 10)
    ms = (time.perf_counter() - start) / len(lists) * 1000
    ok = ms < 250 and len(lists) == 100
    record_acceptance(8, "throughput", ok, f"{ms:.1f} ms/query over 100 queries, top-10 videos, H=32 (< 250 ms)")
    assert ok
